//! DDPM machinery for the poisoning generator: noise schedules, the jumping
//! (compressed-horizon) schedule, the poisoning context, a conditional MLP
//! noise predictor, its training loop, and reverse sampling.
//!
//! Time steps are 1-based throughout (`t ∈ [1, horizon]`), matching the usual
//! DDPM indexing; slices are indexed with `t - 1`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{input, Error, Result};
use crate::nn::{shuffle, Network, NetworkSpec, Targets};
use crate::rng;

/// Relative tolerance on the cumulative-noise match between a jump schedule
/// and its base schedule.
pub const CONSISTENCY_TOLERANCE: f64 = 0.05;

pub const TIME_EMBEDDING_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("horizon must be at least 1".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for (i, a) in alphas.iter().enumerate() {
            let next = acc * a;
            if !(next < acc) {
                return Err(Error::Schedule(format!("alpha_bar stops decreasing at t = {}", i + 1)));
            }
            acc = next;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// β linear from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon == 0 {
            return input("horizon must be at least 1");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return input(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let betas = if horizon == 1 {
            vec![beta_start]
        } else {
            let span = (horizon - 1) as f64;
            (0..horizon).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span).collect()
        };
        Self::from_betas(betas)
    }

    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Σ β_t over the whole horizon.
    pub fn cumulative_noise(&self) -> f64 {
        self.betas.iter().sum()
    }

    /// ∫ β over the continuous step interval `[from, to)`, with β piecewise
    /// constant on unit steps and held at β_T past the horizon.
    fn integrate(&self, from: f64, to: f64) -> f64 {
        let last = self.betas.len() - 1;
        let mut total = 0.0;
        let mut s = from;
        while s < to {
            let k = s.floor();
            let next = (k + 1.0).min(to);
            total += self.betas[(k as usize).min(last)] * (next - s);
            s = next;
        }
        total
    }
}

/// Steps needed for `log ᾱ` to reach `-target_log_decay` when each step
/// lowers it by `per_step_decrement`.
pub fn steps_to_decay(target_log_decay: f64, per_step_decrement: f64) -> Result<usize> {
    if !(target_log_decay > 0.0 && per_step_decrement > 0.0) {
        return input("decay target and per-step decrement must be positive");
    }
    Ok((target_log_decay / per_step_decrement).ceil() as usize)
}

/// [`steps_to_decay`] for a constant per-step β, using the exact `-ln(1-β)`.
pub fn steps_for_constant_beta(beta: f64, target_log_decay: f64) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        return input(format!("beta must be in (0, 1), got {beta}"));
    }
    steps_to_decay(target_log_decay, -(1.0 - beta).ln())
}

/// How the stride sequence `e_t` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpansionSpec {
    /// Constant stride `T / t_hat`.
    Horizon { t_hat: usize },
    /// Constant stride `value`.
    Constant { value: f64 },
    /// Arithmetic progression from `start` to `end`.
    Arithmetic { start: f64, end: f64 },
    /// Geometric progression from `start` to `end`.
    Geometric { start: f64, end: f64 },
}

impl Default for ExpansionSpec {
    fn default() -> Self {
        ExpansionSpec::Horizon { t_hat: 20 }
    }
}

impl ExpansionSpec {
    fn progression(&self, len: usize) -> Vec<f64> {
        let frac = |t: usize| if len == 1 { 0.0 } else { t as f64 / (len - 1) as f64 };
        match *self {
            ExpansionSpec::Horizon { .. } | ExpansionSpec::Constant { .. } => unreachable!(),
            ExpansionSpec::Arithmetic { start, end } => {
                (0..len).map(|t| start + (end - start) * frac(t)).collect()
            }
            ExpansionSpec::Geometric { start, end } => {
                (0..len).map(|t| start * (end / start).powf(frac(t))).collect()
            }
        }
    }

    /// The stride sequence for a base horizon `base_horizon`. Its length
    /// `T̂` always satisfies `T̂ = round(T / ē)`; for progressions the
    /// candidate whose total stride is closest to `T` is chosen.
    pub fn sequence(&self, base_horizon: usize) -> Result<Vec<f64>> {
        let t = base_horizon as f64;
        match *self {
            ExpansionSpec::Horizon { t_hat } => {
                if t_hat == 0 || t_hat > base_horizon {
                    return input(format!("t_hat must be in [1, {base_horizon}], got {t_hat}"));
                }
                Ok(vec![t / t_hat as f64; t_hat])
            }
            ExpansionSpec::Constant { value } => {
                if !(value >= 1.0) {
                    return input(format!("stride must be >= 1, got {value}"));
                }
                let len = (t / value).round().max(1.0) as usize;
                Ok(vec![value; len])
            }
            ExpansionSpec::Arithmetic { start, end } | ExpansionSpec::Geometric { start, end } => {
                if !(start >= 1.0 && end >= 1.0) {
                    return input("progression strides must be >= 1");
                }
                let mut best: Option<(f64, Vec<f64>)> = None;
                for len in 1..=base_horizon {
                    let seq = self.progression(len);
                    let mean = seq.iter().sum::<f64>() / len as f64;
                    if (t / mean).round() as usize != len {
                        continue;
                    }
                    let gap = (mean * len as f64 - t).abs();
                    if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                        best = Some((gap, seq));
                    }
                }
                best.map(|(_, s)| s).ok_or_else(|| {
                    Error::Schedule(format!("no horizon satisfies T̂ = round(T/ē) for {self:?}"))
                })
            }
        }
    }
}

/// A compressed schedule of `T̂` large-stride steps over a base schedule.
///
/// Step `t` covers the stride `[S_{t-1}, S_t)` of base steps, where
/// `S_t = e_1 + … + e_t`; its variance is `β̂_t = e_t · β̄_t` with `β̄_t` the
/// mean base β over that stride, so `Σ β̂` tracks `Σ β` of the base.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpSchedule {
    base: DiffusionSchedule,
    expansion: Vec<f64>,
    compressed: DiffusionSchedule,
    mean_stride: f64,
}

impl JumpSchedule {
    pub fn new(base: DiffusionSchedule, expansion: Vec<f64>) -> Result<Self> {
        if expansion.is_empty() {
            return Err(Error::Schedule("expansion sequence is empty".into()));
        }
        if let Some((i, e)) = expansion.iter().enumerate().find(|(_, e)| !(**e >= 1.0)) {
            return Err(Error::Schedule(format!("e_{} = {e} is below 1", i + 1)));
        }
        let t_hat = expansion.len();
        let mean_stride = expansion.iter().sum::<f64>() / t_hat as f64;
        let implied = (base.horizon() as f64 / mean_stride).round() as usize;
        if implied != t_hat {
            return Err(Error::Schedule(format!(
                "{t_hat} jump steps but round(T/ē) = {implied} (T = {}, ē = {mean_stride})",
                base.horizon()
            )));
        }

        let mut betas_hat = Vec::with_capacity(t_hat);
        let mut pos = 0.0;
        for (i, &e) in expansion.iter().enumerate() {
            let b = base.integrate(pos, pos + e);
            if b >= 1.0 {
                return Err(Error::Schedule(format!("beta_hat_{} = {b} is not below 1", i + 1)));
            }
            betas_hat.push(b);
            pos += e;
        }
        let compressed = DiffusionSchedule::from_betas(betas_hat)?;

        let base_total = base.cumulative_noise();
        let jump_total = compressed.cumulative_noise();
        if (jump_total - base_total).abs() > CONSISTENCY_TOLERANCE * base_total {
            return Err(Error::Schedule(format!(
                "cumulative noise {jump_total} deviates from base {base_total} by more than {}%",
                CONSISTENCY_TOLERANCE * 100.0
            )));
        }
        Ok(Self { base, expansion, compressed, mean_stride })
    }

    pub fn from_spec(base: DiffusionSchedule, spec: &ExpansionSpec) -> Result<Self> {
        let seq = spec.sequence(base.horizon())?;
        Self::new(base, seq)
    }

    pub fn base(&self) -> &DiffusionSchedule {
        &self.base
    }

    pub fn expansion(&self) -> &[f64] {
        &self.expansion
    }

    /// The compressed schedule (β̂, α̂, ᾱ̂) over `T̂` steps.
    pub fn steps(&self) -> &DiffusionSchedule {
        &self.compressed
    }

    pub fn betas_hat(&self) -> &[f64] {
        self.compressed.betas()
    }

    pub fn mean_stride(&self) -> f64 {
        self.mean_stride
    }

    pub fn horizon_hat(&self) -> usize {
        self.expansion.len()
    }

    /// `|Σ β̂ − Σ β| / Σ β`.
    pub fn consistency_gap(&self) -> f64 {
        let base = self.base.cumulative_noise();
        (self.compressed.cumulative_noise() - base).abs() / base
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · noise`. Takes no poisoning input: the forward
/// process is the same with or without a poisoning vector.
pub fn forward_sample(
    schedule: &DiffusionSchedule,
    x0: &[f64],
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.horizon() {
        return input(format!("t = {t} outside [1, {}]", schedule.horizon()));
    }
    if x0.len() != noise.len() {
        return input("noise and sample dimensions differ");
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Scale, shift and seed of the poisoning vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonVectorSpec {
    pub sigma_v: f64,
    pub mu_v: f64,
    pub dim: usize,
    pub seed: u64,
    /// Draw a fresh vector per sample instead of one per attack instance.
    #[serde(default)]
    pub resample: bool,
}

impl PoisonVectorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_v >= 0.0) || !self.mu_v.is_finite() || self.dim == 0 {
            return input("poisoning vector needs sigma_v >= 0, finite mu_v and dim >= 1");
        }
        Ok(())
    }

    /// Realizes `c = σ_v · z + μ_v · 1` with `z ~ N(0, I)` drawn from the
    /// spec's own seed.
    pub fn realize(&self) -> Result<PoisonContext> {
        self.validate()?;
        let mut r = rng::stream(self.seed, &[rng::ATTACK, 0x7666]);
        let base: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let fixed = base.iter().map(|z| self.sigma_v * z + self.mu_v).collect();
        Ok(PoisonContext { spec: *self, fixed })
    }
}

/// A realized poisoning context `r(v)`, already shaped like one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonContext {
    spec: PoisonVectorSpec,
    fixed: Vec<f64>,
}

impl PoisonContext {
    pub fn spec(&self) -> &PoisonVectorSpec {
        &self.spec
    }

    pub fn fixed(&self) -> &[f64] {
        &self.fixed
    }

    /// Vector to add to one sample. Only draws from `rng` when resampling.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.spec.resample {
            (0..self.spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.spec.sigma_v * z + self.spec.mu_v
                })
                .collect()
        } else {
            self.fixed.clone()
        }
    }
}

/// Sinusoidal embedding of a (1-based) time step.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out.resize(width, 0.0);
    out
}

/// Noise predictor ε_θ: an MLP over `sample ⊕ time embedding ⊕ label one-hot`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    net: Network,
    sample_dim: usize,
    classes: usize,
}

impl Denoiser {
    fn spec(sample_dim: usize, classes: usize, hidden: &[usize]) -> Result<NetworkSpec> {
        NetworkSpec::regressor(sample_dim + TIME_EMBEDDING_WIDTH + classes, hidden, sample_dim)
    }

    pub fn init<R: Rng + ?Sized>(
        sample_dim: usize,
        classes: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::spec(sample_dim, classes, hidden)?;
        Ok(Self { net: Network::init(&spec, rng), sample_dim, classes })
    }

    /// A predictor that always returns zero noise.
    pub fn zeros(sample_dim: usize, classes: usize, hidden: &[usize]) -> Result<Self> {
        let spec = Self::spec(sample_dim, classes, hidden)?;
        Ok(Self { net: Network::zeros(&spec), sample_dim, classes })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    fn assemble(&self, x: ArrayView2<f64>, steps: &[usize], labels: &[usize]) -> Result<Array2<f64>> {
        if x.ncols() != self.sample_dim {
            return input(format!("sample width {} but denoiser expects {}", x.ncols(), self.sample_dim));
        }
        if steps.len() != x.nrows() || labels.len() != x.nrows() {
            return input("one time step and label per row required");
        }
        let width = self.sample_dim + TIME_EMBEDDING_WIDTH + self.classes;
        let mut inputs = Array2::zeros((x.nrows(), width));
        for (i, row) in x.rows().into_iter().enumerate() {
            if labels[i] >= self.classes {
                return input(format!("label {} outside denoiser's {} classes", labels[i], self.classes));
            }
            let mut out = inputs.row_mut(i);
            for (k, v) in row.iter().enumerate() {
                out[k] = *v;
            }
            for (k, v) in time_embedding(steps[i], TIME_EMBEDDING_WIDTH).into_iter().enumerate() {
                out[self.sample_dim + k] = v;
            }
            out[self.sample_dim + TIME_EMBEDDING_WIDTH + labels[i]] = 1.0;
        }
        Ok(inputs)
    }

    /// ε̂ for each row of `x` at its time step and label.
    pub fn predict(&self, x: ArrayView2<f64>, steps: &[usize], labels: &[usize]) -> Result<Array2<f64>> {
        let inputs = self.assemble(x, steps, labels)?;
        self.net.forward(inputs.view())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: Vec<usize>,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.05, batch: 32, hidden: vec![128] }
    }
}

/// Trains ε_θ on `dataset` shifted by the poisoning context: each step draws
/// `t ~ U[1, T̂]`, `ε ~ N(0, I)` and regresses ε from
/// `√ᾱ̂_t (x + r(v)) + √(1 − ᾱ̂_t) ε`. `context = None` is the unconditioned
/// pipeline. Returns the denoiser and the mean loss of every epoch.
pub fn train_denoiser(
    dataset: &LabeledDataset,
    jump: &JumpSchedule,
    context: Option<&PoisonContext>,
    params: &DenoiserTraining,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if params.batch == 0 {
        return input("denoiser batch size must be positive");
    }
    if let Some(c) = context {
        if c.fixed().len() != dataset.dim() {
            return input("poisoning vector dimension differs from sample dimension");
        }
    }
    let mut init_rng = rng::stream(seed, &[rng::INIT]);
    let mut denoiser =
        Denoiser::init(dataset.dim(), dataset.class_count(), &params.hidden, &mut init_rng)?;
    let mut r = rng::stream(seed, &[rng::ATTACK, 0x7472]);
    let steps = jump.steps();
    let t_hat = steps.horizon();
    let dim = dataset.dim();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        shuffle(&mut order, &mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(params.batch).enumerate() {
            let mut noisy = Array2::zeros((chunk.len(), dim));
            let mut eps = Array2::zeros((chunk.len(), dim));
            let mut ts = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                let t = r.random_range(1..=t_hat);
                let ab = steps.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                let shift = context.map(|c| c.draw(&mut r));
                let x = dataset.features().row(i);
                for k in 0..dim {
                    let e: f64 = StandardNormal.sample(&mut r);
                    let base = match &shift {
                        Some(s) => x[k] + s[k],
                        None => x[k],
                    };
                    noisy[[row, k]] = a * base + b * e;
                    eps[[row, k]] = e;
                }
                ts.push(t);
                labels.push(dataset.labels()[i]);
            }
            let inputs = denoiser.assemble(noisy.view(), &ts, &labels)?;
            let (loss, grad) = denoiser
                .net
                .loss_and_grad(inputs.view(), Targets::Values(eps.view()))
                .map_err(|_| Error::Diverged { epoch, step, loss: f64::NAN })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            denoiser.net.apply_sgd(&grad, params.lr)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok((denoiser, epoch_losses))
}

/// Closed-form reverse update for one coordinate block:
/// `(1/√α_t)(input − (1−α_t)/√(1−ᾱ_t) · ε̂) + σ_t z`, where `input` already
/// includes the poisoning shift.
pub fn reverse_update(
    input: &[f64],
    eps_hat: &[f64],
    alpha_t: f64,
    alpha_bar_t: f64,
    sigma_t: f64,
    z: &[f64],
) -> Vec<f64> {
    let coef = if alpha_t == 1.0 { 0.0 } else { (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt() };
    let scale = 1.0 / alpha_t.sqrt();
    input
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((x, e), zz)| scale * (x - coef * e) + sigma_t * zz)
        .collect()
}

/// `σ_t = √β̂_t` for `t > 1`, and 0 on the final step.
pub fn sigma_for_step(jump: &JumpSchedule, t: usize) -> f64 {
    if t <= 1 {
        0.0
    } else {
        jump.steps().beta(t).sqrt()
    }
}

/// One reverse step on a batch of rows: the shifted input `x_t + r(v)` is fed
/// to ε_θ and to [`reverse_update`]. `shifts` holds one context vector per row.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_step(
    denoiser: &Denoiser,
    jump: &JumpSchedule,
    x_t: ArrayView2<f64>,
    t: usize,
    labels: &[usize],
    shifts: ArrayView2<f64>,
    z: ArrayView2<f64>,
    sigma_t: f64,
) -> Result<Array2<f64>> {
    let steps = jump.steps();
    if t == 0 || t > steps.horizon() {
        return input(format!("t = {t} outside [1, {}]", steps.horizon()));
    }
    if shifts.dim() != x_t.dim() || z.dim() != x_t.dim() {
        return input("shift and noise matrices must match the sample batch");
    }
    let shifted = &x_t + &shifts;
    let ts = vec![t; x_t.nrows()];
    let eps = denoiser.predict(shifted.view(), &ts, labels)?;
    let (alpha, alpha_bar) = (steps.alpha(t), steps.alpha_bar(t));
    let mut out = Array2::zeros(x_t.raw_dim());
    for i in 0..x_t.nrows() {
        let row = reverse_update(
            shifted.row(i).as_slice().unwrap(),
            eps.row(i).as_slice().unwrap(),
            alpha,
            alpha_bar,
            sigma_t,
            &z.row(i).to_vec(),
        );
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

/// Runs the reverse chain from `x_T̂ ~ N(0, I)` down to `t = 1` for `k_p`
/// samples and clips the result to `[-1, 1]`. Labels are copied from
/// `source_labels` when `k_p` equals its length, otherwise drawn with
/// replacement. Sample `i` draws all of its noise from its own stream, so the
/// output does not depend on batch composition.
pub fn generate_poisoned_dataset(
    denoiser: &Denoiser,
    jump: &JumpSchedule,
    context: Option<&PoisonContext>,
    source_labels: &[usize],
    classes: usize,
    k_p: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if k_p == 0 {
        return input("K_p must be at least 1");
    }
    if source_labels.is_empty() {
        return input("no source labels to copy");
    }
    let dim = denoiser.sample_dim();
    let labels: Vec<usize> = if k_p == source_labels.len() {
        source_labels.to_vec()
    } else {
        let mut r = rng::stream(seed, &[rng::ATTACK, 0x6c62]);
        (0..k_p).map(|_| source_labels[r.random_range(0..source_labels.len())]).collect()
    };

    let mut streams: Vec<_> = (0..k_p).map(|i| rng::stream(seed, &[rng::ATTACK, 0x6765, i as u64])).collect();
    let mut x = Array2::zeros((k_p, dim));
    let mut shifts = Array2::zeros((k_p, dim));
    for (i, r) in streams.iter_mut().enumerate() {
        if let Some(c) = context {
            shifts.row_mut(i).assign(&ndarray::ArrayView1::from(&c.draw(r)));
        }
        for k in 0..dim {
            x[[i, k]] = StandardNormal.sample(r);
        }
    }
    let mut z = Array2::zeros((k_p, dim));
    for t in (1..=jump.horizon_hat()).rev() {
        let sigma = sigma_for_step(jump, t);
        if t > 1 {
            for (i, r) in streams.iter_mut().enumerate() {
                for k in 0..dim {
                    z[[i, k]] = StandardNormal.sample(r);
                }
            }
        } else {
            z.fill(0.0);
        }
        x = reverse_sample_step(denoiser, jump, x.view(), t, &labels, shifts.view(), z.view(), sigma)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { layer: 0, detail: "reverse sampling produced non-finite values".into() });
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    LabeledDataset::new(x, labels, classes)
}

/// Writes one CSV row per sample with the label in the last column.
pub fn write_samples_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).chain(["label".into()]).collect();
    writeln!(f, "{}", header.join(","))?;
    for (row, y) in ds.features().axis_iter(Axis(0)).zip(ds.labels()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{y}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}
