//! Server-side defenses. Per-round detectors score the selected clients'
//! updates; interval detectors review each client's projected updates over a
//! window of rounds; robust aggregators replace the plain mean.
//!
//! Everything here operates on update deltas (local model minus the global
//! model the client started from), one row per client.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::nn::{Layout, ParamVector};
use crate::rng;

/// One flat update per client, rows aligned with `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMatrix {
    rows: Array2<f64>,
    ids: Vec<usize>,
}

impl UpdateMatrix {
    pub fn new(rows: Array2<f64>, ids: Vec<usize>) -> Result<Self> {
        if rows.nrows() != ids.len() {
            return input(format!("{} rows but {} client ids", rows.nrows(), ids.len()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return input("client ids must be unique");
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return input("update matrix contains non-finite values");
        }
        Ok(Self { rows, ids })
    }

    pub fn from_params(ids: Vec<usize>, updates: &[ParamVector]) -> Result<Self> {
        let dim = updates.first().map_or(0, |u| u.len());
        if updates.iter().any(|u| u.len() != dim) {
            return input("updates have different lengths");
        }
        let flat: Vec<f64> = updates.iter().flat_map(|u| u.values().iter().copied()).collect();
        let rows = Array2::from_shape_vec((updates.len(), dim), flat)
            .map_err(|e| crate::Error::Input(e.to_string()))?;
        Self::new(rows, ids)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub detector: String,
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    /// Upper threshold: a score above it is flagged.
    pub threshold: f64,
    /// Lower threshold for two-sided rules: a score below it is flagged.
    pub lower_threshold: Option<f64>,
    /// Set by clustering detectors when the split is not well separated.
    pub low_confidence: bool,
}

impl DetectionReport {
    fn upper(detector: &str, ids: Vec<usize>, scores: Vec<f64>, threshold: f64) -> Self {
        let flags = scores.iter().map(|s| *s > threshold).collect();
        Self {
            detector: detector.into(),
            ids,
            scores,
            flags,
            threshold,
            lower_threshold: None,
            low_confidence: false,
        }
    }

    pub fn flagged_ids(&self) -> Vec<usize> {
        self.ids.iter().zip(&self.flags).filter(|(_, f)| **f).map(|(i, _)| *i).collect()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and (unscaled) median absolute deviation.
pub fn median_mad(xs: &[f64]) -> (f64, f64) {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    (m, median(&dev))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Result of [`pca_reduce`]: one row of `k` coordinates per input row, and
/// the matching covariance eigenvalues in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

fn standardize(x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.to_owned();
    let n = x.nrows() as f64;
    for mut col in z.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            col.mapv_inplace(|v| v / sd);
        } else {
            col.fill(0.0);
        }
    }
    z
}

/// Standardizes every coordinate and projects the rows onto the top-`k`
/// principal directions. The covariance eigenproblem is solved in its
/// `rows × rows` Gram form, which has the same nonzero spectrum. Each
/// direction is signed so that its largest-magnitude loading is positive.
pub fn pca_reduce(x: ArrayView2<f64>, k: usize) -> Result<Projection> {
    let (n, d) = x.dim();
    if n < 2 {
        return input("PCA needs at least two rows");
    }
    if k == 0 || k > (n - 1).min(d) {
        return input(format!("k = {k} must be in [1, {}]", (n - 1).min(d)));
    }
    let z = standardize(x);
    let gram = z.dot(&z.t()) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut coords = Array2::zeros((n, k));
    let mut eigenvalues = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        eigenvalues.push(lambda);
        if lambda <= 1e-12 * trace.max(f64::MIN_POSITIVE) {
            continue;
        }
        let u = Array1::from_iter(eig.eigenvectors.column(idx).iter().copied());
        let mut dir = z.t().dot(&u);
        let norm = dir.dot(&dir).sqrt();
        dir /= norm;
        let lead = dir.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            dir.mapv_inplace(|v| -v);
        }
        coords.column_mut(c).assign(&z.dot(&dir));
    }
    Ok(Projection { coords, eigenvalues })
}

/// Distance of each client's `k`-dimensional PCA point from the centroid,
/// flagged above `mean + kappa · std`.
pub fn detect_pca(m: &UpdateMatrix, k: usize, kappa: f64) -> Result<DetectionReport> {
    if m.len() < 4 {
        return input("PCA detection needs at least four clients");
    }
    let p = pca_reduce(m.rows().view(), k.min((m.len() - 1).min(m.dim())))?;
    let centroid = p.coords.mean_axis(Axis(0)).unwrap();
    let scores: Vec<f64> = p
        .coords
        .rows()
        .into_iter()
        .map(|r| dist(r.as_slice().unwrap(), centroid.as_slice().unwrap()))
        .collect();
    let (mean, sd) = mean_std(&scores);
    Ok(DetectionReport::upper("pca", m.ids().to_vec(), scores, mean + kappa * sd))
}

/// Two-means clustering result.
#[derive(Clone, Debug)]
pub(crate) struct TwoMeans {
    pub assign: Vec<usize>,
    pub centers: [Vec<f64>; 2],
    pub inertia: f64,
}

fn lloyd(points: &[Vec<f64>], mut centers: [Vec<f64>; 2]) -> TwoMeans {
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| if dist(p, &centers[1]) < dist(p, &centers[0]) { 1 } else { 0 })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (k, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[k]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| dist(p, &centers[a]).powi(2)).sum();
    TwoMeans { assign, centers, inertia }
}

/// 2-means with farthest-point initialization. Restart `i` seeds the first
/// center with a point picked by `seed` from a content-sorted ordering, so the
/// outcome does not depend on the order of `points`.
pub(crate) fn two_means(points: &[Vec<f64>], restarts: usize, seed: u64) -> TwoMeans {
    let mut sorted: Vec<usize> = (0..points.len()).collect();
    sorted.sort_by(|&a, &b| {
        points[a].iter().zip(&points[b]).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    });
    let mut r = rng::stream(seed, &[rng::DEFENSE, 0x6b6d]);
    let mut best: Option<TwoMeans> = None;
    for _ in 0..restarts.max(1) {
        let first = &points[sorted[rand::Rng::random_range(&mut r, 0..points.len())]];
        let far = sorted
            .iter()
            .map(|&i| &points[i])
            .fold((first, -1.0), |(bp, bd), p| {
                let d = dist(p, first);
                if d > bd { (p, d) } else { (bp, bd) }
            })
            .0;
        let run = lloyd(points, [first.clone(), far.clone()]);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia - 1e-12 * b.inertia.abs()) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn rows_to_points(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// 2-means on PCA coordinates; the smaller cluster is flagged, or on equal
/// sizes the one whose center lies farther from the overall centroid (and,
/// when that ties too, the one with the larger mean update norm). Scores are
/// `d(x, kept center) − d(x, flagged center)`, so a point is flagged exactly
/// when its score is positive. The split is marked low-confidence when it
/// explains less than [`SPLIT_EXPLAINED_MIN`] of the total scatter.
pub fn detect_kmeans(m: &UpdateMatrix, k: usize, seed: u64) -> Result<DetectionReport> {
    if m.len() < 4 {
        return input("k-means detection needs at least four clients");
    }
    let p = pca_reduce(m.rows().view(), k.min((m.len() - 1).min(m.dim())))?;
    let points = rows_to_points(&p.coords);
    let km = two_means(&points, 20, seed);
    let sizes = [0, 1].map(|c| km.assign.iter().filter(|a| **a == c).count());
    let centroid: Vec<f64> = (0..p.coords.ncols()).map(|j| p.coords.column(j).mean().unwrap()).collect();
    let flagged = match sizes[0].cmp(&sizes[1]) {
        Ordering::Less => 0,
        Ordering::Greater => 1,
        Ordering::Equal => {
            let (d0, d1) = (dist(&km.centers[0], &centroid), dist(&km.centers[1], &centroid));
            if (d0 - d1).abs() > 1e-9 * (d0 + d1) {
                usize::from(d1 > d0)
            } else {
                // equal sizes put both centers at the same distance from the
                // centroid; fall back to the group moving further from zero
                let norm = |c: usize| {
                    let rows: Vec<usize> = (0..m.len()).filter(|&i| km.assign[i] == c).collect();
                    rows.iter().map(|&i| m.rows().row(i).dot(&m.rows().row(i)).sqrt()).sum::<f64>() / rows.len() as f64
                };
                usize::from(norm(1) > norm(0))
            }
        }
    };
    let kept = 1 - flagged;
    let scores: Vec<f64> = points
        .iter()
        .map(|x| dist(x, &km.centers[kept]) - dist(x, &km.centers[flagged]))
        .collect();
    let flags: Vec<bool> = km.assign.iter().map(|a| *a == flagged).collect();

    let total: f64 = points.iter().map(|x| dist(x, &centroid).powi(2)).sum();
    let low_confidence = total == 0.0 || km.inertia > (1.0 - SPLIT_EXPLAINED_MIN) * total;
    Ok(DetectionReport {
        detector: "kmeans".into(),
        ids: m.ids().to_vec(),
        scores,
        flags,
        threshold: 0.0,
        lower_threshold: None,
        low_confidence,
    })
}

/// Share of the scatter a 2-means split must explain to count as a real
/// separation. Splitting one Gaussian cloud explains at most 2/π ≈ 0.64.
pub const SPLIT_EXPLAINED_MIN: f64 = 0.8;

/// `1 −` mean cosine similarity to the other clients, flagged above
/// `mean + kappa · std`.
pub fn detect_cosine(m: &UpdateMatrix, kappa: f64) -> Result<DetectionReport> {
    let n = m.len();
    if n < 3 {
        return input("cosine detection needs at least three clients");
    }
    let norms: Vec<f64> = m.rows().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|v| *v == 0.0) {
        return input(format!("client {} submitted a zero update", m.ids()[i]));
    }
    let gram = m.rows().dot(&m.rows().t());
    let scores: Vec<f64> = (0..n)
        .map(|j| {
            let s: f64 = (0..n).filter(|&i| i != j).map(|i| gram[[i, j]] / (norms[i] * norms[j])).sum();
            1.0 - s / (n - 1) as f64
        })
        .collect();
    let (mean, sd) = mean_std(&scores);
    Ok(DetectionReport::upper("cosine", m.ids().to_vec(), scores, mean + kappa * sd))
}

/// Top right singular vector of `x` (unit norm, largest-magnitude entry
/// positive), from the eigenproblem of `x xᵀ`.
pub fn top_singular_direction(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows();
    let gram = x.dot(&x.t());
    let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
    let top = (0..n).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
    let u = Array1::from_iter(eig.eigenvectors.column(top).iter().copied());
    let mut v = x.t().dot(&u);
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
    if lead < 0.0 {
        v.mapv_inplace(|a| -a);
    }
    v
}

/// Divide-and-conquer: on a seeded coordinate subsample, center the rows,
/// score each by its squared projection on the top singular direction and
/// flag the `⌈c_mult · f_est⌉` largest. `subsample_dim = 0` keeps every
/// coordinate.
pub fn detect_dnc(
    m: &UpdateMatrix,
    subsample_dim: usize,
    c_mult: f64,
    f_est: usize,
    seed: u64,
) -> Result<DetectionReport> {
    let n = m.len();
    if n < 4 {
        return input("DnC needs at least four clients");
    }
    if 2 * f_est >= n {
        return input(format!("f_est = {f_est} must be below half of {n} clients"));
    }
    if !(c_mult >= 0.0) {
        return input("c_mult must be non-negative");
    }
    let cols: Vec<usize> = if subsample_dim == 0 || subsample_dim >= m.dim() {
        (0..m.dim()).collect()
    } else {
        let mut r = rng::stream(seed, &[rng::DEFENSE, 0x646e]);
        let mut c = sample(&mut r, m.dim(), subsample_dim).into_vec();
        c.sort_unstable();
        c
    };
    let mut x = m.rows().select(Axis(1), &cols);
    let mean = x.mean_axis(Axis(0)).unwrap();
    x -= &mean;
    let v = top_singular_direction(x.view());
    let scores: Vec<f64> = x.dot(&v).iter().map(|p| p * p).collect();
    let remove = ((c_mult * f_est as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(m.ids()[a].cmp(&m.ids()[b])));
    let mut flags = vec![false; n];
    for &i in &order[..remove] {
        flags[i] = true;
    }
    let threshold = order.get(remove).map_or(f64::NEG_INFINITY, |&i| scores[i]);
    Ok(DetectionReport {
        detector: "dnc".into(),
        ids: m.ids().to_vec(),
        scores,
        flags,
        threshold,
        lower_threshold: None,
        low_confidence: false,
    })
}

/// Keeps scores that differ from the median only by rounding from tripping a
/// zero-MAD threshold.
fn rounding_slack(median: f64) -> f64 {
    1e-9 * median.abs().max(f64::MIN_POSITIVE)
}

/// Projected 2-D points of one client over a review window.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientHistory {
    pub id: usize,
    pub points: Vec<[f64; 2]>,
}

fn centroid2(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Stealthiness review: the distance between two clients is the distance
/// between their window-mean points; `s_j` is client `j`'s mean distance to
/// every other client, flagged above `median + 2 · MAD`.
pub fn interval_distance(history: &[ClientHistory]) -> Result<DetectionReport> {
    if history.len() < 2 {
        return input("interval review needs at least two clients");
    }
    if let Some(h) = history.iter().find(|h| h.points.is_empty()) {
        return input(format!("client {} has no points in the window", h.id));
    }
    let means: Vec<[f64; 2]> = history.iter().map(|h| centroid2(&h.points)).collect();
    let n = means.len();
    let scores: Vec<f64> = (0..n)
        .map(|j| (0..n).filter(|&i| i != j).map(|i| dist2(means[j], means[i])).sum::<f64>() / (n - 1) as f64)
        .collect();
    let (med, mad) = median_mad(&scores);
    Ok(DetectionReport::upper(
        "interval_distance",
        history.iter().map(|h| h.id).collect(),
        scores,
        med + 2.0 * mad + rounding_slack(med),
    ))
}

/// Mean distance of a client's points to their own centroid.
pub fn dispersion(points: &[[f64; 2]]) -> f64 {
    let c = centroid2(points);
    points.iter().map(|p| dist2(*p, c)).sum::<f64>() / points.len() as f64
}

/// Flags clients whose dispersion falls outside `median ± 2 · MAD`: too
/// consistent (a collapsed update generator) or too erratic.
pub fn detect_consistency(history: &[ClientHistory], min_points: usize) -> Result<DetectionReport> {
    let min_points = min_points.max(3);
    if history.len() < 2 {
        return input("consistency review needs at least two clients");
    }
    if let Some(h) = history.iter().find(|h| h.points.len() < min_points) {
        return input(format!("client {} has {} points, need {min_points}", h.id, h.points.len()));
    }
    let scores: Vec<f64> = history.iter().map(|h| dispersion(&h.points)).collect();
    let (med, mad) = median_mad(&scores);
    let slack = rounding_slack(med);
    let (low, high) = (med - 2.0 * mad - slack, med + 2.0 * mad + slack);
    let flags = scores.iter().map(|s| *s < low || *s > high).collect();
    Ok(DetectionReport {
        detector: "consistency".into(),
        ids: history.iter().map(|h| h.id).collect(),
        scores,
        flags,
        threshold: high,
        lower_threshold: Some(low),
        low_confidence: false,
    })
}

/// Mean of the selected rows, accumulated as deviations from the first so
/// identical rows average to themselves exactly.
pub(crate) fn mean_rows(x: ArrayView2<f64>, rows: &[usize]) -> Vec<f64> {
    let first = x.row(rows[0]);
    let mut acc = vec![0.0; x.ncols()];
    for &i in &rows[1..] {
        for ((a, v), f) in acc.iter_mut().zip(x.row(i)).zip(first) {
            *a += v - f;
        }
    }
    first.iter().zip(acc).map(|(f, a)| f + a / rows.len() as f64).collect()
}

/// Multi-Krum: each row's score is the sum of squared distances to its
/// `B − f − 2` nearest other rows; the `m` lowest scores (ties to the lower
/// client id) are averaged.
pub fn aggregate_multikrum(updates: &UpdateMatrix, f: usize, m: usize) -> Result<Vec<f64>> {
    Ok(multikrum_selection(updates, f, m)?.0)
}

/// Multi-Krum mean together with the per-row selection mask.
pub fn multikrum_selection(updates: &UpdateMatrix, f: usize, m: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let b = updates.len();
    if b < 2 * f + 3 {
        return input(format!("Multi-Krum needs B >= 2f + 3 (B = {b}, f = {f})"));
    }
    if m == 0 || m > b - f {
        return input(format!("Multi-Krum m = {m} must be in [1, {}]", b - f));
    }
    let x = updates.rows();
    let neighbours = b - f - 2;
    let scores: Vec<f64> = (0..b)
        .map(|j| {
            let mut d: Vec<f64> = (0..b)
                .filter(|&i| i != j)
                .map(|i| x.row(i).iter().zip(x.row(j)).map(|(a, c)| (a - c).powi(2)).sum())
                .collect();
            d.sort_by(|a, c| a.total_cmp(c));
            d[..neighbours].iter().sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(updates.ids()[a].cmp(&updates.ids()[c])));
    let chosen = &order[..m];
    let mut mask = vec![false; b];
    for &i in chosen {
        mask[i] = true;
    }
    let keep: Vec<usize> = (0..b).filter(|&i| mask[i]).collect();
    Ok((mean_rows(x.view(), &keep), mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignGuardParams {
    pub norm_low: f64,
    pub norm_high: f64,
    /// Coordinates sampled for sign statistics; 0 uses all of them.
    pub subsample: usize,
    /// Disable to skip the sign-statistics clustering stage.
    pub cluster: bool,
}

impl Default for SignGuardParams {
    fn default() -> Self {
        Self { norm_low: 0.1, norm_high: 3.0, subsample: 0, cluster: true }
    }
}

/// SignGuard mean together with the per-row survival mask.
pub fn signguard_selection(
    updates: &UpdateMatrix,
    params: &SignGuardParams,
    seed: u64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let b = updates.len();
    if b < 3 {
        return input("SignGuard needs at least three clients");
    }
    let x = updates.rows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let med = median(&norms);
    let mut alive: Vec<usize> = (0..b)
        .filter(|&i| norms[i] >= params.norm_low * med && norms[i] <= params.norm_high * med)
        .collect();
    if alive.is_empty() {
        return Err(Error::Defense("SignGuard magnitude filter removed every update".into()));
    }

    if params.cluster && alive.len() >= 2 {
        let cols: Vec<usize> = if params.subsample == 0 || params.subsample >= x.ncols() {
            (0..x.ncols()).collect()
        } else {
            let mut r = rng::stream(seed, &[rng::DEFENSE, 0x7367]);
            sample(&mut r, x.ncols(), params.subsample).into_vec()
        };
        let stats: Vec<Vec<f64>> = alive
            .iter()
            .map(|&i| {
                let row = x.row(i);
                let total = cols.len() as f64;
                let pos = cols.iter().filter(|&&c| row[c] > 0.0).count() as f64 / total;
                let neg = cols.iter().filter(|&&c| row[c] < 0.0).count() as f64 / total;
                vec![pos, neg, 1.0 - pos - neg]
            })
            .collect();
        let km = two_means(&stats, 10, seed);
        let sizes = [0, 1].map(|c| km.assign.iter().filter(|a| **a == c).count());
        if sizes[0] > 0 && sizes[1] > 0 {
            let keep = match sizes[0].cmp(&sizes[1]) {
                Ordering::Greater => 0,
                Ordering::Less => 1,
                Ordering::Equal => {
                    let centre: Vec<f64> = (0..3).map(|k| median(&stats.iter().map(|s| s[k]).collect::<Vec<_>>())).collect();
                    if dist(&km.centers[1], &centre) < dist(&km.centers[0], &centre) { 1 } else { 0 }
                }
            };
            alive = alive.iter().zip(&km.assign).filter(|(_, a)| **a == keep).map(|(i, _)| *i).collect();
        }
    }
    let mut mask = vec![false; b];
    for &i in &alive {
        mask[i] = true;
    }
    Ok((mean_rows(x.view(), &alive), mask))
}

/// SignGuard: a magnitude band around the median norm, then 2-means on
/// per-row sign statistics keeping the larger cluster.
pub fn aggregate_signguard(updates: &UpdateMatrix, params: &SignGuardParams, seed: u64) -> Result<Vec<f64>> {
    Ok(signguard_selection(updates, params, seed)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LasaParams {
    pub k_frac: f64,
    pub mag_low: f64,
    pub mag_high: f64,
    pub purity_min: f64,
}

impl Default for LasaParams {
    fn default() -> Self {
        Self { k_frac: 0.3, mag_low: 0.5, mag_high: 2.0, purity_min: 0.5 }
    }
}

/// LASA result: aggregated update and the `clients × layers` acceptance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LasaOutcome {
    pub aggregate: Vec<f64>,
    pub accepted: Vec<Vec<bool>>,
}

/// Layer-adaptive sparsified aggregation. Each row keeps its top `k_frac`
/// coordinates by magnitude within every layer. A client's layer is accepted
/// when its norm is within the magnitude band around the layer's median norm
/// and enough of its nonzero coordinates agree in sign with the per-coordinate
/// majority. Layers nobody passes aggregate to zero (the global layer is kept).
pub fn aggregate_lasa(updates: &UpdateMatrix, layout: &Layout, params: &LasaParams) -> Result<LasaOutcome> {
    if layout.total_len() != updates.dim() {
        return input(format!("layout covers {} values, updates have {}", layout.total_len(), updates.dim()));
    }
    if !(params.k_frac > 0.0 && params.k_frac <= 1.0) {
        return input("k_frac must be in (0, 1]");
    }
    let ranges = layout.layer_ranges()?;
    let b = updates.len();
    let x = updates.rows();
    let mut sparse = Array2::<f64>::zeros(x.raw_dim());
    for range in &ranges {
        let keep = ((params.k_frac * range.len() as f64).ceil() as usize).min(range.len());
        for i in 0..b {
            let mut idx: Vec<usize> = range.clone().collect();
            idx.sort_by(|&a, &c| x[[i, c]].abs().total_cmp(&x[[i, a]].abs()).then(a.cmp(&c)));
            for &c in &idx[..keep] {
                sparse[[i, c]] = x[[i, c]];
            }
        }
    }

    let mut aggregate = vec![0.0; updates.dim()];
    let mut accepted = vec![vec![false; ranges.len()]; b];
    for (l, range) in ranges.iter().enumerate() {
        let norms: Vec<f64> = (0..b)
            .map(|i| range.clone().map(|c| sparse[[i, c]].powi(2)).sum::<f64>().sqrt())
            .collect();
        let med = median(&norms);
        let majority: Vec<f64> = range
            .clone()
            .map(|c| (0..b).map(|i| sparse[[i, c]].signum() * (sparse[[i, c]] != 0.0) as u8 as f64).sum::<f64>().signum())
            .collect();
        let mut members = Vec::new();
        for i in 0..b {
            let nonzero: Vec<usize> = range.clone().filter(|&c| sparse[[i, c]] != 0.0).collect();
            let purity = if nonzero.is_empty() {
                1.0
            } else {
                nonzero.iter().filter(|&&c| sparse[[i, c]].signum() == majority[c - range.start]).count() as f64
                    / nonzero.len() as f64
            };
            let in_band = norms[i] >= params.mag_low * med && norms[i] <= params.mag_high * med;
            if in_band && purity >= params.purity_min {
                accepted[i][l] = true;
                members.push(i);
            }
        }
        if members.is_empty() {
            continue;
        }
        for c in range.clone() {
            aggregate[c] = members.iter().map(|&i| sparse[[i, c]]).sum::<f64>() / members.len() as f64;
        }
    }
    Ok(LasaOutcome { aggregate, accepted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorKind {
    Pca {
        #[serde(default = "two")]
        components: usize,
        #[serde(default = "two_f")]
        kappa: f64,
    },
    Kmeans {
        #[serde(default = "two")]
        components: usize,
    },
    Cosine {
        #[serde(default = "two_f")]
        kappa: f64,
    },
    Dnc {
        #[serde(default)]
        subsample_dim: usize,
        #[serde(default = "one_f")]
        c_mult: f64,
        #[serde(default = "three")]
        f_est: usize,
    },
    IntervalDistance,
    Consistency,
}

fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn two_f() -> f64 {
    2.0
}
fn one_f() -> f64 {
    1.0
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Pca { .. } => "pca",
            DetectorKind::Kmeans { .. } => "kmeans",
            DetectorKind::Cosine { .. } => "cosine",
            DetectorKind::Dnc { .. } => "dnc",
            DetectorKind::IntervalDistance => "interval_distance",
            DetectorKind::Consistency => "consistency",
        }
    }

    /// Interval detectors review projected histories every window instead
    /// of the raw updates of one round.
    pub fn is_interval(&self) -> bool {
        matches!(self, DetectorKind::IntervalDistance | DetectorKind::Consistency)
    }

    pub fn detect_round(&self, m: &UpdateMatrix, seed: u64) -> Result<DetectionReport> {
        match *self {
            DetectorKind::Pca { components, kappa } => detect_pca(m, components, kappa),
            DetectorKind::Kmeans { components } => detect_kmeans(m, components, seed),
            DetectorKind::Cosine { kappa } => detect_cosine(m, kappa),
            DetectorKind::Dnc { subsample_dim, c_mult, f_est } => detect_dnc(m, subsample_dim, c_mult, f_est, seed),
            DetectorKind::IntervalDistance | DetectorKind::Consistency => {
                input(format!("{} reviews histories, not single rounds", self.name()))
            }
        }
    }

    pub fn detect_history(&self, history: &[ClientHistory]) -> Result<DetectionReport> {
        match self {
            DetectorKind::IntervalDistance => interval_distance(history),
            DetectorKind::Consistency => detect_consistency(history, 3),
            _ => input(format!("{} reviews single rounds, not histories", self.name())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorKind {
    #[default]
    Fedavg,
    Multikrum {
        f: usize,
        /// Rows averaged; defaults to `B − f`.
        #[serde(default)]
        m: Option<usize>,
    },
    Signguard(SignGuardParams),
    Lasa(LasaParams),
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Multikrum { .. } => "multikrum",
            AggregatorKind::Signguard(_) => "signguard",
            AggregatorKind::Lasa(_) => "lasa",
        }
    }

    /// Aggregated update delta for one round.
    pub fn aggregate(&self, updates: &UpdateMatrix, layout: &Layout, seed: u64) -> Result<Vec<f64>> {
        if updates.is_empty() {
            return input("no updates to aggregate");
        }
        match self {
            AggregatorKind::Fedavg => {
                let all: Vec<usize> = (0..updates.len()).collect();
                Ok(mean_rows(updates.rows().view(), &all))
            }
            AggregatorKind::Multikrum { f, m } => {
                aggregate_multikrum(updates, *f, m.unwrap_or(updates.len().saturating_sub(*f)))
            }
            AggregatorKind::Signguard(p) => aggregate_signguard(updates, p, seed),
            AggregatorKind::Lasa(p) => Ok(aggregate_lasa(updates, layout, p)?.aggregate),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayoutEntry, ParamKind};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(rows: Vec<Vec<f64>>) -> UpdateMatrix {
        let n = rows.len();
        let d = rows[0].len();
        let flat = rows.into_iter().flatten().collect();
        UpdateMatrix::new(Array2::from_shape_vec((n, d), flat).unwrap(), (0..n).collect()).unwrap()
    }

    fn gaussian(n: usize, d: usize, scale: f64, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            scale * z
        })
    }

    /// Cyclic Jacobi eigen-solver for small symmetric matrices.
    fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = a.nrows();
        let mut a = a.clone();
        let mut v = Array2::<f64>::eye(n);
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                        v[[k, p]] = c * vkp - s * vkq;
                        v[[k, q]] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[[i, i]]).collect(), v)
    }

    #[test]
    fn pca_matches_covariance_oracle() {
        let x = gaussian(8, 5, 1.0, 3) + &array![[3.0, 0.0, -1.0, 0.5, 2.0]];
        let p = pca_reduce(x.view(), 3).unwrap();
        // brute force: explicit covariance of standardized columns
        let n = x.nrows() as f64;
        let mut z = x.clone();
        for mut c in z.columns_mut() {
            let m = c.sum() / n;
            c.mapv_inplace(|v| v - m);
            let sd = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            c.mapv_inplace(|v| v / sd);
        }
        let cov = z.t().dot(&z) / (n - 1.0);
        let (vals, vecs) = jacobi_eigen(&cov);
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for c in 0..3 {
            let dir = vecs.column(order[c]);
            let oracle = z.dot(&dir);
            let got = p.coords.column(c);
            let same = oracle.iter().zip(got).all(|(a, b)| (a - b).abs() < 1e-8);
            let flipped = oracle.iter().zip(got).all(|(a, b)| (a + b).abs() < 1e-8);
            assert!(same || flipped, "component {c}");
            assert!((p.eigenvalues[c] - vals[order[c]]).abs() < 1e-8);
        }
        let var = |c: usize| p.coords.column(c).iter().map(|v| v * v).sum::<f64>();
        assert!(var(0) >= var(1) && var(1) >= var(2));
    }

    #[test]
    fn pca_on_a_line_has_one_component() {
        let x = Array2::from_shape_fn((6, 2), |(i, j)| i as f64 * if j == 0 { 1.0 } else { 2.0 });
        let p = pca_reduce(x.view(), 1).unwrap();
        assert!(p.coords.column(0).iter().any(|v| v.abs() > 0.1));
        // k = 2 needs a second direction: its variance is zero
        let p = pca_reduce(x.view(), 2).unwrap();
        assert!(p.coords.column(1).iter().all(|v| v.abs() < 1e-9));
        assert!(pca_reduce(x.view(), 3).is_err());
        assert!(pca_reduce(x.slice(ndarray::s![..1, ..]), 1).is_err());
    }

    /// `n - outliers` rows scattered around a shared update direction, and
    /// `outliers` rows displaced from it by `separation` cluster diameters.
    fn planted(n: usize, outliers: usize, d: usize, separation: f64, seed: u64) -> UpdateMatrix {
        let mut x = gaussian(n, d, 0.1, seed);
        let mut r = rng::stream(seed, &[1]);
        let mut unit = || {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect::<Vec<f64>>()
        };
        let (centre, dir) = (unit(), unit());
        for i in 0..n {
            for k in 0..d {
                x[[i, k]] += centre[k];
            }
        }
        let mut diameter = 0.0f64;
        for i in 0..n - outliers {
            for j in 0..i {
                diameter = diameter.max(dist(&x.row(i).to_vec(), &x.row(j).to_vec()));
            }
        }
        for i in n - outliers..n {
            for k in 0..d {
                x[[i, k]] += separation * diameter * dir[k];
            }
        }
        UpdateMatrix::new(x, (0..n).collect()).unwrap()
    }

    #[test]
    fn pca_flags_far_outlier() {
        let mut x = gaussian(10, 3, 0.01, 6);
        let far = 100.0 / 3f64.sqrt();
        x.row_mut(9).mapv_inplace(|v| v + far);
        let rep = detect_pca(&UpdateMatrix::new(x.clone(), (0..10).collect()).unwrap(), 2, 2.0).unwrap();
        assert_eq!(rep.flagged_ids(), vec![9]);
        // brute force: the outlier's score is the largest
        let top = (0..10).max_by(|&a, &b| rep.scores[a].total_cmp(&rep.scores[b])).unwrap();
        assert_eq!(top, 9);
    }

    #[test]
    fn pca_identical_rows_and_scaling() {
        let rep = detect_pca(&matrix(vec![vec![1.0, 2.0]; 5]), 1, 2.0).unwrap();
        assert!(rep.flags.iter().all(|f| !f));
        let m = planted(10, 1, 20, 10.0, 4);
        let scaled = UpdateMatrix::new(m.rows() * 7.5, m.ids().to_vec()).unwrap();
        assert_eq!(detect_pca(&m, 2, 2.0).unwrap().flags, detect_pca(&scaled, 2, 2.0).unwrap().flags);
    }

    #[test]
    fn kmeans_flags_small_group() {
        let mut rows: Vec<Vec<f64>> = (0..8).map(|i| vec![0.01 * i as f64, 0.0, 0.02 * (i % 3) as f64]).collect();
        rows.push(vec![5.0, 5.0, 5.0]);
        rows.push(vec![5.1, 5.0, 4.9]);
        let rep = detect_kmeans(&matrix(rows), 2, 0).unwrap();
        assert_eq!(rep.flagged_ids(), vec![8, 9]);
        assert!(!rep.low_confidence);
        for (s, f) in rep.scores.iter().zip(&rep.flags) {
            assert_eq!(*s > 0.0, *f);
        }
    }

    #[test]
    fn kmeans_tie_flags_farther_group() {
        // two mirror-image pairs: equal sizes, centers equidistant from the
        // centroid, so the pair moving further from zero is flagged
        let rows = vec![vec![0.0, 0.1], vec![0.1, 0.0], vec![5.0, 5.1], vec![5.1, 5.0]];
        let rep = detect_kmeans(&matrix(rows), 2, 0).unwrap();
        assert_eq!(rep.flagged_ids(), vec![2, 3]);
    }

    #[test]
    fn kmeans_single_cluster_is_low_confidence() {
        let x = gaussian(12, 2, 1.0, 8);
        let rep = detect_kmeans(&UpdateMatrix::new(x.clone(), (0..12).collect()).unwrap(), 2, 1).unwrap();
        assert!(rep.low_confidence);
    }

    #[test]
    fn cosine_scores() {
        let rep = detect_cosine(&matrix(vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![0.5, 1.0], vec![3.0, 6.0]]), 2.0).unwrap();
        assert!(rep.scores.iter().all(|s| s.abs() < 1e-12));
        assert!(rep.flags.iter().all(|f| !f));
        let mut rows: Vec<Vec<f64>> = (0..9).map(|i| vec![1.0, 1e-3 * i as f64]).collect();
        rows.push(vec![-1.0, 0.0]);
        let rep = detect_cosine(&matrix(rows.clone()), 2.0).unwrap();
        assert_eq!(rep.flagged_ids(), vec![9]);
        // exact oracle for the inverted row's score
        let want: f64 = 1.0 - rows[..9].iter().map(|r| -r[0] / (r[0] * r[0] + r[1] * r[1]).sqrt()).sum::<f64>() / 9.0;
        assert!((rep.scores[9] - want).abs() < 1e-12 && (want - 2.0).abs() < 1e-4);
        let scaled: Vec<Vec<f64>> = rows.iter().enumerate().map(|(i, r)| r.iter().map(|v| v * (i + 1) as f64).collect()).collect();
        let rep2 = detect_cosine(&matrix(scaled), 2.0).unwrap();
        for (a, b) in rep.scores.iter().zip(&rep2.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = detect_cosine(&matrix(vec![vec![1.0], vec![0.0], vec![2.0]]), 2.0).unwrap_err();
        assert!(err.to_string().contains("client 1"));
    }

    fn power_iteration(x: &Array2<f64>) -> Array1<f64> {
        let mut v = Array1::from_elem(x.ncols(), 1.0);
        for _ in 0..5000 {
            let next = x.t().dot(&x.dot(&v));
            let n = next.dot(&next).sqrt();
            v = next / n;
        }
        v
    }

    #[test]
    fn top_direction_matches_svd_and_power_iteration() {
        let x = gaussian(7, 5, 1.0, 11) * &array![4.0, 1.0, 0.5, 0.2, 0.1];
        let v = top_singular_direction(x.view());
        let svd = DMatrix::from_fn(7, 5, |i, j| x[[i, j]]).svd(false, true);
        let top = (0..5).max_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        let vt = svd.v_t.unwrap();
        let oracle: Vec<f64> = (0..5).map(|j| vt[(top, j)]).collect();
        let same = v.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-6);
        let flipped = v.iter().zip(&oracle).all(|(a, b)| (a + b).abs() < 1e-6);
        assert!(same || flipped);
        let p = power_iteration(&x);
        assert!((v.dot(&p).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dnc_rules() {
        let m = planted(10, 2, 30, 10.0, 2);
        let rep = detect_dnc(&m, 0, 1.0, 2, 0).unwrap();
        assert_eq!(rep.flagged_ids(), vec![8, 9]);
        // oracle: projections from power iteration on the centered matrix
        let mut x = m.rows().clone();
        let mean = x.mean_axis(Axis(0)).unwrap();
        x -= &mean;
        let v = power_iteration(&x);
        let proj: Vec<f64> = x.dot(&v).iter().map(|p| p * p).collect();
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]));
        assert_eq!({ let mut t = order[..2].to_vec(); t.sort(); t }, vec![8, 9]);
        assert!(detect_dnc(&m, 0, 1.0, 0, 0).unwrap().flags.iter().all(|f| !f));
        assert!(detect_dnc(&m, 0, 1.0, 5, 0).is_err());
        let sub = detect_dnc(&m, 10, 1.0, 2, 3).unwrap();
        assert_eq!(sub, detect_dnc(&m, 10, 1.0, 2, 3).unwrap());
    }

    #[test]
    fn planted_outliers_are_excluded_at_low_fractions() {
        for seed in 0..10 {
            let m = planted(10, 1, 40, 10.0, seed);
            assert_eq!(detect_pca(&m, 2, 2.0).unwrap().flagged_ids(), vec![9]);
            assert!(detect_cosine(&m, 2.0).unwrap().flags[9]);
            assert_eq!(detect_dnc(&m, 0, 1.0, 1, seed).unwrap().flagged_ids(), vec![9]);
            let (_, mask) = multikrum_selection(&m, 1, 9).unwrap();
            assert!(!mask[9]);
        }
    }

    fn history(points: Vec<Vec<[f64; 2]>>) -> Vec<ClientHistory> {
        points.into_iter().enumerate().map(|(id, points)| ClientHistory { id, points }).collect()
    }

    #[test]
    fn interval_distance_rules() {
        let same = history(vec![vec![[1.0, 1.0], [2.0, 0.0]]; 5]);
        let rep = interval_distance(&same).unwrap();
        assert!(rep.flags.iter().all(|f| !f));
        assert!(rep.scores.windows(2).all(|w| w[0] == w[1]));

        let mut pts: Vec<Vec<[f64; 2]>> = (0..6).map(|i| vec![[0.1 * i as f64, 0.0], [0.0, 0.1 * i as f64]]).collect();
        pts.push(vec![[50.0, 50.0], [52.0, 48.0]]);
        let h = history(pts);
        let rep = interval_distance(&h).unwrap();
        assert_eq!(rep.flagged_ids(), vec![6]);
        // brute-force pairwise means
        let means: Vec<[f64; 2]> = h.iter().map(|c| {
            let n = c.points.len() as f64;
            [c.points.iter().map(|p| p[0]).sum::<f64>() / n, c.points.iter().map(|p| p[1]).sum::<f64>() / n]
        }).collect();
        for j in 0..h.len() {
            let s: f64 = (0..h.len()).filter(|&i| i != j).map(|i| dist2(means[i], means[j])).sum::<f64>() / 6.0;
            assert!((s - rep.scores[j]).abs() < 1e-12);
        }
        assert!(interval_distance(&history(vec![vec![[0.0, 0.0]], vec![]])).is_err());
    }

    #[test]
    fn consistency_rules() {
        let ring = |c: [f64; 2], r: f64| -> Vec<[f64; 2]> {
            (0..6).map(|k| {
                let a = k as f64;
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            }).collect()
        };
        let same = history((0..5).map(|i| ring([i as f64, 0.0], 1.0)).collect());
        assert!(detect_consistency(&same, 3).unwrap().flags.iter().all(|f| !f));

        let mut clouds: Vec<Vec<[f64; 2]>> = (0..8).map(|i| ring([0.0, i as f64], 1.0 + 0.05 * i as f64)).collect();
        clouds.push(vec![[3.0, 3.0]; 6]);
        let rep = detect_consistency(&history(clouds.clone()), 3).unwrap();
        assert_eq!(rep.flagged_ids(), vec![8]);
        assert!(rep.scores[8] < rep.lower_threshold.unwrap());

        let shifted: Vec<[f64; 2]> = clouds[2].iter().map(|p| [p[0] + 40.0, p[1] - 7.0]).collect();
        assert!((dispersion(&shifted) - dispersion(&clouds[2])).abs() < 1e-12);
        assert!(detect_consistency(&history(vec![vec![[0.0, 0.0]; 2]; 3]), 3).is_err());
    }

    #[test]
    fn multikrum_rules() {
        let id = matrix(vec![vec![1.0, -2.0]; 5]);
        assert_eq!(aggregate_multikrum(&id, 1, 3).unwrap(), vec![1.0, -2.0]);

        let mut rows: Vec<Vec<f64>> = (0..7).map(|i| vec![0.1 * (i % 3) as f64, 0.05 * i as f64]).collect();
        rows.push(vec![100.0, 0.0]);
        let m = matrix(rows.clone());
        let (agg, mask) = multikrum_selection(&m, 1, 6).unwrap();
        assert!(!mask[7]);
        for k in 0..2 {
            let lo = rows[..7].iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let hi = rows[..7].iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(agg[k] >= lo && agg[k] <= hi);
        }
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(aggregate_multikrum(&m, 0, 8).unwrap(), mean_rows(m.rows().view(), &all));
        assert!(aggregate_multikrum(&m, 3, 2).is_err());
        assert!(aggregate_multikrum(&m, 1, 8).is_err());
    }

    #[test]
    fn signguard_rules() {
        let id = matrix(vec![vec![0.5, -1.0, 2.0]; 4]);
        let (agg, mask) = signguard_selection(&id, &SignGuardParams::default(), 0).unwrap();
        assert_eq!(agg, vec![0.5, -1.0, 2.0]);
        assert!(mask.iter().all(|m| *m));

        let base = gaussian(10, 50, 1.0, 5);
        let mut big = base.clone();
        big.row_mut(3).mapv_inplace(|v| v * 100.0);
        let (_, mask) = signguard_selection(&UpdateMatrix::new(big, (0..10).collect()).unwrap(), &SignGuardParams::default(), 0).unwrap();
        assert!(!mask[3]);

        // nine rows with a shared positive bias, one sign-inverted
        let mut biased = base.mapv(|v| v + 1.0);
        biased.row_mut(6).mapv_inplace(|v| -v);
        let (_, mask) = signguard_selection(&UpdateMatrix::new(biased, (0..10).collect()).unwrap(), &SignGuardParams::default(), 0).unwrap();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 1);
        assert!(!mask[6]);

        let wide = SignGuardParams { norm_low: 0.0, norm_high: f64::INFINITY, cluster: false, ..Default::default() };
        let m = UpdateMatrix::new(base, (0..10).collect()).unwrap();
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(aggregate_signguard(&m, &wide, 0).unwrap(), mean_rows(m.rows().view(), &all));

        let narrow = SignGuardParams { norm_low: 1.5, norm_high: 1.9, ..Default::default() };
        let rows = matrix(vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!(matches!(aggregate_signguard(&rows, &narrow, 0), Err(Error::Defense(_))));
    }

    fn two_layer_layout() -> Layout {
        Layout::new(vec![
            LayoutEntry { layer: 0, kind: ParamKind::Weight, shape: vec![2, 3] },
            LayoutEntry { layer: 0, kind: ParamKind::Bias, shape: vec![3] },
            LayoutEntry { layer: 1, kind: ParamKind::Weight, shape: vec![3, 1] },
            LayoutEntry { layer: 1, kind: ParamKind::Bias, shape: vec![1] },
        ])
    }

    #[test]
    fn lasa_rules() {
        let layout = two_layer_layout();
        let row: Vec<f64> = (1..=13).map(|v| v as f64 * 0.1).collect();
        let id = matrix(vec![row.clone(); 4]);
        let out = aggregate_lasa(&id, &layout, &LasaParams::default()).unwrap();
        assert!(out.accepted.iter().all(|r| r.iter().all(|a| *a)));
        // layer 0: 9 values keep ceil(2.7) = 3; layer 1: 4 values keep 2
        let mut want = vec![0.0; 13];
        for c in [6, 7, 8, 11, 12] {
            want[c] = row[c];
        }
        assert_eq!(out.aggregate, want);

        let mut r = rng::stream(2, &[]);
        let mut rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..13).map(|_| 1.0 + r.random_range(0.0..0.2)).collect()).collect();
        for v in rows[2][9..13].iter_mut() {
            *v = -*v;
        }
        let m = matrix(rows.clone());
        let out = aggregate_lasa(&m, &layout, &LasaParams::default()).unwrap();
        assert_eq!(out.accepted[2], vec![true, false]);
        assert!(out.accepted.iter().enumerate().all(|(i, a)| i == 2 || a == &vec![true, true]));

        let open = LasaParams { k_frac: 1.0, mag_low: 0.0, mag_high: f64::INFINITY, purity_min: 0.0 };
        let out = aggregate_lasa(&m, &layout, &open).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let fedavg = mean_rows(m.rows().view(), &all);
        for (a, b) in out.aggregate.iter().zip(&fedavg) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(aggregate_lasa(&m, &Layout::flat(5), &open).is_err());
    }

    #[test]
    fn lasa_rejected_layer_keeps_global() {
        let layout = two_layer_layout();
        let mut rows = vec![vec![1.0; 13]; 3];
        rows[0][9] = -50.0;
        rows[1][10] = 50.0;
        rows[2][9..13].iter_mut().for_each(|v| *v = 0.01);
        let strict = LasaParams { purity_min: 1.0, mag_low: 0.99, mag_high: 1.01, ..Default::default() };
        let out = aggregate_lasa(&matrix(rows), &layout, &strict).unwrap();
        if out.accepted.iter().all(|a| !a[1]) {
            assert!(out.aggregate[9..].iter().all(|v| *v == 0.0));
        }
    }

    fn permute(m: &UpdateMatrix, perm: &[usize]) -> UpdateMatrix {
        let rows = m.rows().select(Axis(0), perm);
        UpdateMatrix::new(rows, perm.iter().map(|&i| m.ids()[i]).collect()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn detectors_are_permutation_equivariant(seed in 0u64..1000, shift in any::<u64>()) {
            let m = planted(9, 2, 12, 5.0, seed);
            let mut perm: Vec<usize> = (0..9).collect();
            crate::nn::shuffle(&mut perm, &mut rng::stream(shift, &[]));
            let p = permute(&m, &perm);
            let checks: Vec<(DetectionReport, DetectionReport)> = vec![
                (detect_pca(&m, 2, 2.0).unwrap(), detect_pca(&p, 2, 2.0).unwrap()),
                (detect_cosine(&m, 2.0).unwrap(), detect_cosine(&p, 2.0).unwrap()),
                (detect_dnc(&m, 6, 1.0, 2, 1).unwrap(), detect_dnc(&p, 6, 1.0, 2, 1).unwrap()),
                (detect_kmeans(&m, 2, 1).unwrap(), detect_kmeans(&p, 2, 1).unwrap()),
            ];
            for (a, b) in checks {
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert!((a.scores[i] - b.scores[k]).abs() < 1e-8 * (1.0 + a.scores[i].abs()));
                    prop_assert_eq!(a.flags[i], b.flags[k]);
                }
            }
            let (ka, ma) = multikrum_selection(&m, 2, 5).unwrap();
            let (kb, mb) = multikrum_selection(&p, 2, 5).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(ma[i], mb[k]);
            }
            for (a, b) in ka.iter().zip(&kb) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let (_, sa) = signguard_selection(&m, &SignGuardParams::default(), 0).unwrap();
            let (_, sb) = signguard_selection(&p, &SignGuardParams::default(), 0).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(sa[i], sb[k]);
            }
        }

        #[test]
        fn interval_scores_are_translation_invariant(seed in 0u64..1000, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let mut r = rng::stream(seed, &[]);
            let h: Vec<ClientHistory> = (0..6).map(|id| ClientHistory {
                id,
                points: (0..4).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
            }).collect();
            let moved: Vec<ClientHistory> = h.iter().map(|c| ClientHistory {
                id: c.id,
                points: c.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            }).collect();
            let (a, b) = (interval_distance(&h).unwrap(), interval_distance(&moved).unwrap());
            let (c, d) = (detect_consistency(&h, 3).unwrap(), detect_consistency(&moved, 3).unwrap());
            for j in 0..6 {
                prop_assert!((a.scores[j] - b.scores[j]).abs() < 1e-9);
                prop_assert!((c.scores[j] - d.scores[j]).abs() < 1e-9);
            }
        }
    }
}
