//! Round-based federated learning: client sampling, local SGD, aggregation,
//! optional per-round or per-window defenses, and global evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackPlan};
use crate::datasets::{partition_dirichlet, partition_iid, LabeledDataset, PartitionMode, PartitionPlan};
use crate::defenses::{AggregatorKind, DetectionReport, DetectorKind, UpdateMatrix};
use crate::error::{input, Error, Result};
use crate::metrics::{export_projection, histories, WindowEntry};
use crate::nn::{train_sgd, Network, NetworkSpec, ParamVector, Targets};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub detector: DetectorKind,
    /// Review window `R'` for interval detectors, in rounds.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Exclude flagged updates from the round's aggregation.
    #[serde(default = "yes")]
    pub drop_flagged: bool,
}

fn default_window() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlConfig {
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub partition: PartitionMode,
    pub malicious_fraction: f64,
    pub attack: AttackPlan,
    pub aggregator: AggregatorKind,
    pub defense: Option<DefenseConfig>,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            client_fraction: 0.5,
            rounds: 30,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.05,
            hidden: vec![32],
            partition: PartitionMode::Iid,
            malicious_fraction: 0.0,
            attack: AttackPlan::of(AttackKind::None),
            aggregator: AggregatorKind::Fedavg,
            defense: None,
            seed: 0,
        }
    }
}

/// Number of clients selected per round, `⌈fraction · N⌉`.
pub fn clients_per_round(clients: usize, fraction: f64) -> usize {
    // the epsilon keeps exact products such as 0.2 · 100 from rounding up
    ((fraction * clients as f64) - 1e-9).ceil().max(1.0) as usize
}

impl FlConfig {
    pub fn per_round(&self) -> usize {
        clients_per_round(self.clients, self.client_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::Config { key: k.into(), message: m });
        if self.clients == 0 {
            return bad("fl.clients", "need at least one client".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("fl.client_fraction", format!("{} is outside (0, 1]", self.client_fraction));
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return bad("fl.malicious_fraction", format!("{} is outside [0, 1]", self.malicious_fraction));
        }
        if self.batch_size == 0 {
            return bad("fl.batch_size", "must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("fl.lr", "must be a finite non-negative number".into());
        }
        if self.hidden.contains(&0) {
            return bad("fl.hidden", "layer widths must be positive".into());
        }
        if let PartitionMode::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0) {
                return bad("data.partition.alpha", "must be positive".into());
            }
        }
        self.attack.validate().map_err(|e| Error::Config { key: "attack".into(), message: e.to_string() })?;
        let b = self.per_round();
        match &self.aggregator {
            AggregatorKind::Multikrum { f, m } => {
                if 2 * f + 3 > b {
                    return bad("aggregator.f", format!("Multi-Krum needs B >= 2f + 3, B = {b}"));
                }
                if let Some(m) = m {
                    if *m == 0 || *m > b - f {
                        return bad("aggregator.m", format!("must be in [1, {}]", b - f));
                    }
                }
            }
            AggregatorKind::Lasa(p) if !(p.k_frac > 0.0 && p.k_frac <= 1.0) => {
                return bad("aggregator.k_frac", "must be in (0, 1]".into());
            }
            _ => {}
        }
        if let Some(d) = &self.defense {
            if d.detector.is_interval() && d.window == 0 {
                return bad("defense.window", "must be at least one round".into());
            }
            if !d.detector.is_interval() && b < 4 {
                return bad("defense.detector", format!("per-round detectors need B >= 4, B = {b}"));
            }
            if let DetectorKind::Dnc { f_est, .. } = d.detector {
                if 2 * f_est >= b {
                    return bad("defense.detector.f_est", format!("must be below B/2 = {}", b as f64 / 2.0));
                }
            }
        }
        Ok(())
    }
}

/// Picks `⌈fraction · N⌉` distinct clients uniformly, sorted by id.
pub fn select_clients(clients: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return input(format!("client fraction {fraction} is outside (0, 1]"));
    }
    let b = clients_per_round(clients, fraction).min(clients);
    let mut r = rng::stream(seed, &[rng::SELECT, round as u64]);
    let mut ids = sample(&mut r, clients, b).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The first `⌊fraction · N⌋` clients of a seeded shuffle, sorted by id.
/// Larger fractions extend smaller ones.
pub fn malicious_clients(clients: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction * clients as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..clients).collect();
    crate::nn::shuffle(&mut order, &mut rng::stream(seed, &[rng::MALICIOUS]));
    let mut ids = order[..count.min(clients)].to_vec();
    ids.sort_unstable();
    ids
}

/// Runs `epochs` of mini-batch SGD on `ds` starting from `global`.
pub fn local_train(
    global: &ParamVector,
    spec: &NetworkSpec,
    ds: &LabeledDataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamVector> {
    let net = Network::unflatten(global, spec)?;
    let trained = train_sgd(
        &net,
        ds.features().view(),
        Targets::Classes(ds.labels()),
        epochs,
        batch,
        lr,
        &mut rng::stream(seed, &[]),
    )?;
    Ok(trained.flatten())
}

/// Coordinate-wise mean of the client models.
pub fn aggregate_fedavg(updates: &[ParamVector]) -> Result<ParamVector> {
    let first = updates.first().ok_or_else(|| Error::Input("no updates to aggregate".into()))?;
    if updates.iter().any(|u| u.layout() != first.layout()) {
        return input("updates have different layouts");
    }
    // summing deviations from the first update keeps the mean of identical
    // updates exact
    let k = updates.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for u in &updates[1..] {
        for ((a, v), f) in acc.iter_mut().zip(u.values()).zip(first.values()) {
            *a += v - f;
        }
    }
    let mean = first.values().iter().zip(acc).map(|(f, a)| f + a / k).collect();
    ParamVector::new(mean, first.layout().clone())
}

pub fn accuracy(params: &ParamVector, spec: &NetworkSpec, test: &LabeledDataset) -> Result<f64> {
    let net = Network::unflatten(params, spec)?;
    let pred = net.predict_classes(test.features().view())?;
    let hits = pred.iter().zip(test.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Post-training client models, aligned with `selected`.
    pub updates: Vec<ParamVector>,
    pub global: ParamVector,
    pub accuracy: f64,
    /// Clients a detector flagged this round, if one ran.
    pub flagged: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionEvent {
    pub round: usize,
    pub report: DetectionReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub spec: NetworkSpec,
    pub initial: ParamVector,
    pub malicious: Vec<usize>,
    pub records: Vec<RoundRecord>,
    pub detections: Vec<DetectionEvent>,
}

impl ExperimentOutput {
    pub fn accuracy_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }

    pub fn final_global(&self) -> &ParamVector {
        self.records.last().map_or(&self.initial, |r| &r.global)
    }

    /// Every client update of rounds `from..=to` as a delta from the global
    /// model it started from.
    pub fn window_entries(&self, from: usize, to: usize) -> Vec<WindowEntry> {
        let malicious: BTreeSet<usize> = self.malicious.iter().copied().collect();
        let mut out = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            if rec.round < from || rec.round > to {
                continue;
            }
            let start = if i == 0 { &self.initial } else { &self.records[i - 1].global };
            for (c, u) in rec.selected.iter().zip(&rec.updates) {
                out.push(WindowEntry {
                    round: rec.round,
                    client_id: *c,
                    update: delta(u, start),
                    malicious: malicious.contains(c),
                });
            }
        }
        out
    }
}

fn delta(u: &ParamVector, base: &ParamVector) -> Vec<f64> {
    u.values().iter().zip(base.values()).map(|(a, b)| a - b).collect()
}

fn client_shards(cfg: &FlConfig, train: &LabeledDataset) -> Result<Vec<LabeledDataset>> {
    let seed = rng::derive_seed(cfg.seed, &[rng::PARTITION]);
    let plan: PartitionPlan = match cfg.partition {
        PartitionMode::Iid => partition_iid(train.len(), cfg.clients, seed)?,
        PartitionMode::Dirichlet { alpha } => partition_dirichlet(train, cfg.clients, alpha, seed)?,
    };
    Ok(plan.assignments.iter().map(|idx| train.subset(idx)).collect())
}

/// Runs the full experiment: partition, one-off poisoning of the malicious
/// shards, then `R` rounds of select / train / (detect) / aggregate /
/// evaluate. Deterministic in `cfg.seed` regardless of thread count.
pub fn run_experiment(cfg: &FlConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if train.class_count() != test.class_count() || train.dim() != test.dim() {
        return input("train and test sets disagree on shape or class count");
    }
    if test.is_empty() {
        return input("empty test set");
    }
    let spec = NetworkSpec::classifier(train.dim(), &cfg.hidden, train.class_count())?;
    let malicious = malicious_clients(cfg.clients, cfg.malicious_fraction, cfg.seed);
    let is_malicious: BTreeSet<usize> = malicious.iter().copied().collect();

    let mut shards = client_shards(cfg, train)?;
    let poisoned: Vec<(usize, LabeledDataset)> = malicious
        .par_iter()
        .map(|&c| Ok((c, cfg.attack.apply(&shards[c], rng::derive_seed(cfg.seed, &[rng::ATTACK, c as u64]))?)))
        .collect::<Result<_>>()?;
    for (c, ds) in poisoned {
        shards[c] = ds;
    }

    let initial = Network::init(&spec, &mut rng::stream(cfg.seed, &[rng::INIT])).flatten();
    let layout = initial.layout().clone();
    let replay = cfg.attack.kind == AttackKind::ConstantUpdate;
    let mut replayed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut global = initial.clone();
    let mut records: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds);
    let mut detections = Vec::new();

    for round in 1..=cfg.rounds {
        let selected = select_clients(cfg.clients, cfg.client_fraction, round, cfg.seed)?;
        let trained: Vec<ParamVector> = selected
            .par_iter()
            .map(|&c| {
                if replay && is_malicious.contains(&c) {
                    if let Some(d) = replayed.get(&c) {
                        let v = global.values().iter().zip(d).map(|(g, x)| g + x).collect();
                        return ParamVector::new(v, layout.clone());
                    }
                }
                let seed = rng::derive_seed(cfg.seed, &[rng::LOCAL, c as u64, round as u64]);
                local_train(&global, &spec, &shards[c], cfg.local_epochs, cfg.batch_size, cfg.lr, seed)
            })
            .collect::<Result<_>>()?;
        if replay {
            for (c, u) in selected.iter().zip(&trained) {
                if is_malicious.contains(c) && !replayed.contains_key(c) {
                    replayed.insert(*c, delta(u, &global));
                }
            }
        }
        let deltas: Vec<ParamVector> = trained
            .iter()
            .map(|u| u.delta_from(&global))
            .collect::<Result<_>>()?;

        let mut flagged: Option<Vec<usize>> = None;
        if let Some(def) = &cfg.defense {
            let report = if def.detector.is_interval() {
                if round % def.window == 0 {
                    let partial = ExperimentOutput {
                        spec: spec.clone(),
                        initial: initial.clone(),
                        malicious: malicious.clone(),
                        records: records.clone(),
                        detections: Vec::new(),
                    };
                    review_window(&partial, &selected, &deltas, &is_malicious, round, def)?
                } else {
                    None
                }
            } else {
                let m = UpdateMatrix::from_params(selected.clone(), &deltas)?;
                Some(def.detector.detect_round(&m, rng::derive_seed(cfg.seed, &[rng::DEFENSE, round as u64]))?)
            };
            if let Some(report) = report {
                flagged = Some(report.flagged_ids());
                detections.push(DetectionEvent { round, report });
            }
        }

        let excluded: BTreeSet<usize> = match (&flagged, &cfg.defense) {
            (Some(f), Some(d)) if d.drop_flagged => f.iter().copied().collect(),
            _ => BTreeSet::new(),
        };
        let keep: Vec<usize> = (0..selected.len()).filter(|&i| !excluded.contains(&selected[i])).collect();
        global = if keep.is_empty() {
            global
        } else if cfg.aggregator == AggregatorKind::Fedavg {
            let kept: Vec<ParamVector> = keep.iter().map(|&i| trained[i].clone()).collect();
            aggregate_fedavg(&kept)?
        } else {
            let kept: Vec<ParamVector> = keep.iter().map(|&i| deltas[i].clone()).collect();
            let ids = keep.iter().map(|&i| selected[i]).collect();
            let m = UpdateMatrix::from_params(ids, &kept)?;
            match cfg.aggregator.aggregate(&m, &layout, rng::derive_seed(cfg.seed, &[rng::DEFENSE, 0x6167, round as u64])) {
                Ok(step) => global.plus(&ParamVector::new(step, layout.clone())?)?,
                Err(Error::Defense(_)) => global,
                Err(e) => return Err(e),
            }
        };

        let acc = accuracy(&global, &spec, test)?;
        records.push(RoundRecord { round, selected, updates: trained, global: global.clone(), accuracy: acc, flagged });
    }
    Ok(ExperimentOutput { spec, initial, malicious, records, detections })
}

/// Interval review at the end of `round`: PCA over the window's deltas
/// (including this round's), then the history detector on clients with
/// enough points.
fn review_window(
    past: &ExperimentOutput,
    selected: &[usize],
    deltas: &[ParamVector],
    is_malicious: &BTreeSet<usize>,
    round: usize,
    def: &DefenseConfig,
) -> Result<Option<DetectionReport>> {
    let from = round + 1 - def.window.min(round);
    let mut entries = past.window_entries(from, round);
    for (c, d) in selected.iter().zip(deltas) {
        entries.push(WindowEntry { round, client_id: *c, update: d.values().to_vec(), malicious: is_malicious.contains(c) });
    }
    let rows = export_projection(&entries)?;
    let min_points = if def.detector == DetectorKind::Consistency { 3 } else { 1 };
    let hist: Vec<_> = histories(&rows).into_iter().filter(|h| h.points.len() >= min_points).collect();
    if hist.len() < 2 {
        return Ok(None);
    }
    def.detector.detect_history(&hist).map(Some)
}

/// Per-round `a_r − â_r`.
pub fn attack_effectiveness(clean: &[f64], attacked: &[f64]) -> Result<Vec<f64>> {
    if clean.len() != attacked.len() {
        return input(format!("trace lengths differ: {} vs {}", clean.len(), attacked.len()));
    }
    Ok(clean.iter().zip(attacked).map(|(a, b)| a - b).collect())
}
