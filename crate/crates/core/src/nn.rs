//! Minimal feed-forward networks with hand-written backpropagation.
//!
//! Two heads are supported: softmax cross-entropy for the classifiers that
//! clients train, and linear MSE for the diffusion noise predictor. Every
//! parameter is 64-bit so analytic gradients can be checked against central
//! finite differences at tight tolerances.
//!
//! Parameters flatten to a [`ParamVector`] in layer order, weights before
//! biases, row-major within each weight matrix. Weight matrices are stored
//! `fan_in × fan_out` so a forward pass is `X·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    SoftmaxCrossEntropy,
    LinearMse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    head: OutputHead,
}

impl NetworkSpec {
    /// `activations` has one entry per hidden layer (`layer_sizes.len() - 2`).
    pub fn new(
        layer_sizes: Vec<usize>,
        activations: Vec<Activation>,
        head: OutputHead,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return input("a network needs at least an input and an output size");
        }
        if layer_sizes.contains(&0) {
            return input(format!("layer sizes must be positive, got {layer_sizes:?}"));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return input(format!(
                "{} hidden layers but {} activations",
                layer_sizes.len() - 2,
                activations.len()
            ));
        }
        Ok(Self { layer_sizes, activations, head })
    }

    /// ReLU hidden layers with a softmax cross-entropy head.
    pub fn classifier(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes, vec![Activation::Relu; hidden.len()], OutputHead::SoftmaxCrossEntropy)
    }

    /// ReLU hidden layers with a linear MSE head.
    pub fn regressor(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        Self::new(sizes, vec![Activation::Relu; hidden.len()], OutputHead::LinearMse)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::with_capacity(2 * self.num_layers());
        for (layer, pair) in self.layer_sizes.windows(2).enumerate() {
            entries.push(LayoutEntry { layer, kind: ParamKind::Weight, shape: vec![pair[0], pair[1]] });
            entries.push(LayoutEntry { layer, kind: ParamKind::Bias, shape: vec![pair[1]] });
        }
        Layout { entries }
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayoutEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered description of how a flat parameter vector maps onto layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        Self { entries }
    }

    /// A layout of one anonymous segment, for vectors that do not come from a
    /// network (test fixtures, synthetic updates).
    pub fn flat(len: usize) -> Self {
        Self { entries: vec![LayoutEntry { layer: 0, kind: ParamKind::Weight, shape: vec![len] }] }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(LayoutEntry::len).sum()
    }

    /// Entries with their coordinate ranges in the flat vector.
    pub fn segments(&self) -> impl Iterator<Item = (&LayoutEntry, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.entries.iter().map(move |e| {
            let r = offset..offset + e.len();
            offset = r.end;
            (e, r)
        })
    }

    /// Coordinate ranges grouped by layer index (weights and bias of a layer
    /// are contiguous, so each layer is a single range).
    pub fn layer_ranges(&self) -> Result<Vec<std::ops::Range<usize>>> {
        let mut out: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
        for (e, r) in self.segments() {
            match out.last_mut() {
                Some((layer, range)) if *layer == e.layer => {
                    if range.end != r.start {
                        return input("layout segments of a layer are not contiguous");
                    }
                    range.end = r.end;
                }
                Some((layer, _)) if e.layer < *layer => {
                    return input(format!("layout layer {} appears after layer {layer}", e.layer));
                }
                Some((layer, _)) if e.layer == *layer => unreachable!(),
                _ => out.push((e.layer, r)),
            }
        }
        Ok(out.into_iter().map(|(_, r)| r).collect())
    }
}

/// Flat view of every network parameter plus the layout needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return input(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.total_len()
            ));
        }
        Ok(Self { values, layout })
    }

    /// Convenience constructor with a single-segment layout.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let layout = Layout::flat(values.len());
        Self { values, layout }
    }

    pub fn zeros(layout: Layout) -> Self {
        Self { values: vec![0.0; layout.total_len()], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return input("parameter layouts differ");
        }
        Ok(())
    }

    /// `self - base`, coordinate-wise.
    pub fn delta_from(&self, base: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(base)?;
        let values = self.values.iter().zip(&base.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector { values, layout: self.layout.clone() })
    }

    pub fn plus(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(ParamVector { values, layout: self.layout.clone() })
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector { values: self.values.iter().map(|v| v * c).collect(), layout: self.layout.clone() }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// `∂loss/∂parameter` in the same layout as the network it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    params: ParamVector,
}

impl GradientRecord {
    pub fn new(params: ParamVector) -> Self {
        Self { params }
    }

    pub fn values(&self) -> &[f64] {
        self.params.values()
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn as_params(&self) -> &ParamVector {
        &self.params
    }

    pub fn plus(&self, other: &GradientRecord) -> Result<GradientRecord> {
        Ok(GradientRecord { params: self.params.plus(&other.params)? })
    }
}

/// Supervision for [`Network::loss_and_grad`].
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(ArrayView2<'a, f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for pair in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-limit..=limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Self { spec: spec.clone(), weights, biases }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let weights = spec.layer_sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect();
        let biases = spec.layer_sizes.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Self { spec: spec.clone(), weights, biases }
    }

    pub fn from_parts(
        spec: &NetworkSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if weights.len() != spec.num_layers() || biases.len() != spec.num_layers() {
            return input("parameter count does not match the number of layers");
        }
        for (l, pair) in spec.layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (pair[0], pair[1]) || biases[l].len() != pair[1] {
                return input(format!("layer {l} shape does not match spec"));
            }
            if weights[l].iter().chain(biases[l].iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: l, detail: "non-finite parameter".into() });
            }
        }
        Ok(Self { spec: spec.clone(), weights, biases })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.spec.input_dim() {
            return input(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.spec.input_dim()
            ));
        }
        Ok(())
    }

    fn activate(&self, layer: usize, z: &mut Array2<f64>) {
        if let Activation::Relu = self.spec.activations[layer] {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Raw network output (logits for the softmax head).
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        let last = self.spec.num_layers() - 1;
        let mut h = batch.to_owned();
        for l in 0..=last {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            check_finite(&z, l)?;
            if l < last {
                self.activate(l, &mut z);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn predict_classes(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        let out = self.forward(batch)?;
        Ok(out.rows().into_iter().map(|r| argmax(r.as_slice().unwrap_or(&r.to_vec()))).collect())
    }

    pub fn loss(&self, batch: ArrayView2<f64>, targets: Targets) -> Result<f64> {
        let out = self.forward(batch)?;
        let (loss, _) = self.head_loss(&out, targets)?;
        Ok(loss)
    }

    /// Loss and `∂loss/∂out` for the output head.
    fn head_loss(&self, out: &Array2<f64>, targets: Targets) -> Result<(f64, Array2<f64>)> {
        let n = out.nrows();
        if n == 0 {
            return input("empty batch");
        }
        match (self.spec.head, targets) {
            (OutputHead::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                if labels.len() != n {
                    return input(format!("{} labels for {n} rows", labels.len()));
                }
                let classes = out.ncols();
                let mut grad = Array2::zeros(out.raw_dim());
                let mut loss = 0.0;
                for (i, (row, &y)) in out.rows().into_iter().zip(labels).enumerate() {
                    if y >= classes {
                        return input(format!("label {y} out of range for {classes} classes"));
                    }
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let log_z = max + sum.ln();
                    loss += log_z - row[y];
                    for (c, &v) in row.iter().enumerate() {
                        grad[[i, c]] = (v - log_z).exp();
                    }
                    grad[[i, y]] -= 1.0;
                }
                grad /= n as f64;
                Ok((loss / n as f64, grad))
            }
            (OutputHead::LinearMse, Targets::Values(t)) => {
                if t.dim() != out.dim() {
                    return input(format!("targets {:?} do not match output {:?}", t.dim(), out.dim()));
                }
                let diff = out - &t;
                let count = diff.len() as f64;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
                Ok((loss, diff * (2.0 / count)))
            }
            (head, _) => input(format!("targets incompatible with {head:?} head")),
        }
    }

    pub fn loss_and_grad(
        &self,
        batch: ArrayView2<f64>,
        targets: Targets,
    ) -> Result<(f64, GradientRecord)> {
        self.check_batch(&batch)?;
        let last = self.spec.num_layers() - 1;
        // activations[l] is the input to layer l
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(last + 2);
        activations.push(batch.to_owned());
        for l in 0..=last {
            let mut z = activations[l].dot(&self.weights[l]) + &self.biases[l];
            check_finite(&z, l)?;
            if l < last {
                self.activate(l, &mut z);
            }
            activations.push(z);
        }
        let (loss, mut delta) = self.head_loss(&activations[last + 1], targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { layer: last, detail: format!("loss = {loss}") });
        }

        let mut grad_w: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); last + 1];
        let mut grad_b: Vec<Array1<f64>> = vec![Array1::zeros(0); last + 1];
        for l in (0..=last).rev() {
            grad_w[l] = activations[l].t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                if let Activation::Relu = self.spec.activations[l - 1] {
                    ndarray::Zip::from(&mut back)
                        .and(&activations[l])
                        .for_each(|g, &a| {
                            if a <= 0.0 {
                                *g = 0.0;
                            }
                        });
                }
                check_finite(&back, l - 1)?;
                delta = back;
            }
        }

        let mut values = Vec::with_capacity(self.spec.param_count());
        for l in 0..=last {
            values.extend(grad_w[l].iter().copied());
            values.extend(grad_b[l].iter().copied());
        }
        let params = ParamVector::new(values, self.spec.layout())?;
        Ok((loss, GradientRecord::new(params)))
    }

    /// Returns a new network with every parameter `p` replaced by `p - lr·g`.
    pub fn sgd_step(&self, grad: &GradientRecord, lr: f64) -> Result<Network> {
        let mut next = self.clone();
        next.apply_sgd(grad, lr)?;
        Ok(next)
    }

    pub(crate) fn apply_sgd(&mut self, grad: &GradientRecord, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return input(format!("learning rate must be non-negative, got {lr}"));
        }
        if *grad.layout() != self.spec.layout() {
            return input("gradient layout does not match network");
        }
        let mut g = grad.values().iter();
        for l in 0..self.spec.num_layers() {
            for (p, gv) in self.weights[l].iter_mut().zip(g.by_ref()) {
                *p -= lr * gv;
            }
            for (p, gv) in self.biases[l].iter_mut().zip(g.by_ref()) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.spec.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            values.extend(w.iter().copied());
            values.extend(b.iter().copied());
        }
        ParamVector { values, layout: self.spec.layout() }
    }

    pub fn unflatten(pv: &ParamVector, spec: &NetworkSpec) -> Result<Network> {
        if *pv.layout() != spec.layout() {
            return input("parameter layout does not match network spec");
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for pair in spec.layer_sizes.windows(2) {
            let (fi, fo) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec((fi, fo), pv.values[offset..offset + fi * fo].to_vec())
                .map_err(|e| Error::Input(e.to_string()))?;
            offset += fi * fo;
            let b = Array1::from(pv.values[offset..offset + fo].to_vec());
            offset += fo;
            weights.push(w);
            biases.push(b);
        }
        Network::from_parts(spec, weights, biases)
    }
}

fn check_finite(m: &Array2<f64>, layer: usize) -> Result<()> {
    if let Some(v) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric { layer, detail: format!("activation value {v}") });
    }
    Ok(())
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD over `(features, targets)`, reshuffling every epoch.
pub fn train_sgd<R: Rng + ?Sized>(
    net: &Network,
    features: ArrayView2<f64>,
    targets: Targets,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Network> {
    if batch_size == 0 {
        return input("batch size must be positive");
    }
    let n = features.nrows();
    let mut net = net.clone();
    if n == 0 || epochs == 0 {
        return Ok(net);
    }
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(batch_size) {
            let xb = features.select(Axis(0), chunk);
            let grad = match targets {
                Targets::Classes(labels) => {
                    let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    net.loss_and_grad(xb.view(), Targets::Classes(&yb))?.1
                }
                Targets::Values(t) => {
                    let tb = t.select(Axis(0), chunk);
                    net.loss_and_grad(xb.view(), Targets::Values(tb.view()))?.1
                }
            };
            net.apply_sgd(&grad, lr)?;
        }
    }
    Ok(net)
}

/// Fisher–Yates shuffle; kept local so sequences stay stable across rand
/// releases.
pub(crate) fn shuffle<T, R: Rng + ?Sized>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
