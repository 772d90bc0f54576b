//! Command implementations behind the `poisonlab` binary: `run`, `sweep`
//! and `selftest`. Each returns a process exit code: 0 on success, 2 for
//! configuration errors, 1 for anything that fails at runtime.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::defenses::{
    aggregate_lasa, aggregate_multikrum, aggregate_signguard, LasaParams, SignGuardParams, UpdateMatrix,
};
use crate::diffusion::{forward_sample, steps_for_constant_beta, steps_to_decay, DiffusionSchedule, ExpansionSpec, JumpSchedule};
use crate::error::{Error, Result};
use crate::federation::{aggregate_fedavg, run_experiment, ExperimentOutput};
use crate::metrics::{
    composite_score, export_projection, write_detections, write_projections, write_results, CompositeParams,
    DetectionRow, ProjectionRow, ResultRow,
};
use crate::nn::{Layout, LayoutEntry, Network, NetworkSpec, ParamKind, ParamVector, Targets};
use crate::rng;

/// Overrides the output root for runs without `--out`.
pub const OUTPUT_ROOT_ENV: &str = "POISONLAB_OUTPUT_ROOT";
/// Set to `fedavg_sign` to make `selftest` run against a FedAvg whose sign is
/// flipped.
pub const SELFTEST_FAULT_ENV: &str = "POISONLAB_SELFTEST_FAULT";

const DEFAULT_ROOT: &str = "runs";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn report(result: Result<PathBuf>) -> i32 {
    match result {
        Ok(dir) => {
            println!("outputs written to {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> i32 {
    report(run(config, out, seed))
}

pub fn cmd_sweep(config: &Path, axis: &str, values: &str, out: Option<&Path>) -> i32 {
    report(sweep(config, axis, values, out))
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.fl.seed = s;
    }
    Ok(cfg)
}

/// `--out` if given, else a fresh timestamped directory under the root
/// named by the environment, the config, or `runs`.
fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
    fs::create_dir_all(&root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f").to_string();
    let mut n = 0;
    loop {
        let dir = if n == 0 { root.join(&stamp) } else { root.join(format!("{stamp}-{n}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

/// Loads, validates and runs `config`, writing results, detections,
/// projections and the resolved manifest.
pub fn run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let cfg = load(config, seed)?;
    let dir = output_dir(&cfg, out)?;
    let rows = execute(&cfg, &dir)?;
    let rows: Vec<_> = rows.into_iter().map(|r| (None, r)).collect();
    write_results(&dir.join("results.csv"), &rows, false)?;
    Ok(dir)
}

/// Runs one scenario and writes everything except `results.csv`, whose
/// rows are returned.
fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ResultRow>> {
    let (train, test) = cfg.datasets()?;
    let fl = cfg.fl_config();
    let out = run_experiment(&fl, &train, &test)?;
    write_detections(&dir.join("detections.csv"), &detection_rows(&out))?;
    write_projections(&dir.join("projections.csv"), &projection_rows(cfg, &out)?)?;
    fs::write(dir.join("manifest.toml"), cfg.to_manifest())?;

    let defense = cfg.defense.as_ref().map_or("none", |d| d.detector.name());
    let scenario = format!("{}-{}", fl.attack.kind.name(), fl.malicious_fraction);
    Ok(out
        .records
        .iter()
        .map(|r| ResultRow {
            round: r.round,
            scenario: scenario.clone(),
            malicious_fraction: fl.malicious_fraction,
            attack: fl.attack.kind.name().into(),
            aggregator: fl.aggregator.name().into(),
            defense: defense.into(),
            accuracy: r.accuracy,
        })
        .collect())
}

fn detection_rows(out: &ExperimentOutput) -> Vec<DetectionRow> {
    let malicious: BTreeSet<usize> = out.malicious.iter().copied().collect();
    let mut rows = Vec::new();
    for ev in &out.detections {
        let r = &ev.report;
        for (i, id) in r.ids.iter().enumerate() {
            rows.push(DetectionRow {
                round: ev.round,
                detector: r.detector.clone(),
                client_id: *id,
                score: r.scores[i],
                threshold: r.threshold,
                flagged: r.flags[i],
                truth_malicious: malicious.contains(id),
            });
        }
    }
    rows
}

/// 2-D projection of the last review window of the run (the defense window,
/// or 10 rounds without a defense).
fn projection_rows(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<Vec<ProjectionRow>> {
    let last = out.records.len();
    let window = cfg.defense.as_ref().map_or(10, |d| d.window).max(1);
    let entries = out.window_entries(last + 1 - window.min(last), last);
    if entries.iter().map(|e| e.client_id).collect::<BTreeSet<_>>().len() < 2 {
        return Ok(Vec::new());
    }
    export_projection(&entries)
}

fn parse_values(axis: SweepAxis, values: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::Config { key: axis.key().into(), message: m };
    let parts: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.is_empty() {
        return Err(bad("empty value list".into()));
    }
    parts
        .iter()
        .map(|p| p.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("`{p}` is not a number"))))
        .collect()
}

/// One scenario per value of `axis`, each in its own subdirectory; the
/// top-level `results.csv` concatenates them with `axis` columns.
pub fn sweep(config: &Path, axis: &str, values: &str, out: Option<&Path>) -> Result<PathBuf> {
    let base = load(config, None)?;
    let axis = SweepAxis::parse(axis)?;
    let values = parse_values(axis, values)?;
    let scenarios: Vec<ExperimentConfig> = values.iter().map(|&v| base.with_axis(axis, v)).collect::<Result<_>>()?;
    let dir = output_dir(&base, out)?;
    let mut manifest = format!("# sweep over {} = {:?}\n", axis.key(), values);
    manifest.push_str(&base.to_manifest());
    fs::write(dir.join("manifest.toml"), manifest)?;

    let blocks: Vec<Vec<ResultRow>> = scenarios
        .par_iter()
        .zip(&values)
        .map(|(cfg, v)| {
            let sub = dir.join(format!("{}={}", axis.key(), v));
            fs::create_dir_all(&sub)?;
            let rows = execute(cfg, &sub)?;
            let tagged: Vec<_> = rows.iter().cloned().map(|r| (None, r)).collect();
            write_results(&sub.join("results.csv"), &tagged, false)?;
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let rows: Vec<_> = blocks
        .into_iter()
        .zip(&values)
        .flat_map(|(rows, v)| rows.into_iter().map(move |r| (Some((axis.key().to_string(), *v)), r)))
        .collect();
    write_results(&dir.join("results.csv"), &rows, true)?;
    Ok(dir)
}

/// Deliberate defects `selftest` can be run against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    pub fedavg_sign: bool,
}

impl Faults {
    pub fn from_env() -> Self {
        let v = std::env::var(SELFTEST_FAULT_ENV).unwrap_or_default();
        Self { fedavg_sign: v.split(',').any(|f| f.trim() == "fedavg_sign") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, check: Result<std::result::Result<(), String>>) -> PropertyOutcome {
    let (passed, detail) = match check {
        Ok(Ok(())) => (true, String::new()),
        Ok(Err(why)) => (false, why),
        Err(e) => (false, e.to_string()),
    };
    PropertyOutcome { name, passed, detail }
}

type Check = std::result::Result<(), String>;

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn check_gradients() -> Result<Check> {
    for seed in 0..3u64 {
        let mut r = rng::stream(seed, &[rng::INIT]);
        let cls = NetworkSpec::classifier(4, &[6], 3)?;
        let reg = NetworkSpec::regressor(3, &[5], 2)?;
        let x = Array2::from_shape_fn((6, 4), |_| r.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let xr = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));
        let cases = [
            (Network::init(&cls, &mut r), x.view(), Targets::Classes(&labels)),
            (Network::init(&reg, &mut r), xr.view(), Targets::Values(t.view())),
        ];
        for (net, x, targets) in cases {
            let (_, grad) = net.loss_and_grad(x, targets)?;
            let pv = net.flatten();
            let h = 1e-5;
            for i in 0..pv.len() {
                let mut plus = pv.values().to_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = Network::unflatten(&ParamVector::new(plus, pv.layout().clone())?, net.spec())?.loss(x, targets)?;
                let lm = Network::unflatten(&ParamVector::new(minus, pv.layout().clone())?, net.spec())?.loss(x, targets)?;
                let fd = (lp - lm) / (2.0 * h);
                let g = grad.values()[i];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                if rel >= 1e-4 && (fd - g).abs() >= 1e-9 {
                    return Ok(Err(format!("seed {seed}, coordinate {i}: analytic {g} vs numeric {fd}")));
                }
            }
        }
    }
    Ok(Ok(()))
}

fn check_flatten() -> Result<Check> {
    let spec = NetworkSpec::classifier(5, &[7, 4], 3)?;
    for seed in 0..5u64 {
        let net = Network::init(&spec, &mut rng::stream(seed, &[rng::INIT]));
        let pv = net.flatten();
        let back = Network::unflatten(&pv, &spec)?;
        if back != net || back.flatten() != pv {
            return Ok(Err(format!("seed {seed}: round trip changed the parameters")));
        }
    }
    Ok(Ok(()))
}

fn check_forward_moments() -> Result<Check> {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02)?;
    let mut r = rng::stream(7, &[rng::DATA]);
    let n = 100_000;
    for (t, x0) in [(50usize, 1.0), (400, -0.5)] {
        let ab = schedule.alpha_bar(t);
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_sample(&schedule, &[x0], t, &[r.sample(StandardNormal)]).map(|v| v[0]))
            .collect::<Result<_>>()?;
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (want_m, want_v) = (ab.sqrt() * x0, 1.0 - ab);
        let se_m = (want_v / n as f64).sqrt();
        let se_v = want_v * (2.0 / (n - 1) as f64).sqrt();
        if (mean - want_m).abs() > 3.0 * se_m || (var - want_v).abs() > 3.0 * se_v {
            return Ok(Err(format!("t = {t}: mean {mean} var {var}, expected {want_m} and {want_v}")));
        }
    }
    Ok(Ok(()))
}

fn check_jump_schedules() -> Result<Check> {
    let base = DiffusionSchedule::linear(1000, 1e-4, 0.02)?;
    let specs = [
        ExpansionSpec::Horizon { t_hat: 20 },
        ExpansionSpec::Horizon { t_hat: 48 },
        ExpansionSpec::Constant { value: 50.0 },
        ExpansionSpec::Arithmetic { start: 90.0, end: 10.0 },
        ExpansionSpec::Geometric { start: 90.0, end: 10.0 },
    ];
    for spec in specs {
        let j = JumpSchedule::from_spec(base.clone(), &spec)?;
        let want = (1000.0 / j.mean_stride()).round() as usize;
        if j.horizon_hat() != want || j.consistency_gap() > 0.05 {
            return Ok(Err(format!(
                "{spec:?}: T_hat {} (want {want}), consistency gap {}",
                j.horizon_hat(),
                j.consistency_gap()
            )));
        }
    }
    let id = JumpSchedule::new(base.clone(), vec![1.0; 1000])?;
    Ok(ensure(id.betas_hat() == base.betas(), || "unit strides changed the schedule".into()))
}

fn check_paper_arithmetic() -> Result<Check> {
    let base = DiffusionSchedule::linear(1000, 1e-4, 0.02)?;
    let j = JumpSchedule::from_spec(base.clone(), &ExpansionSpec::Constant { value: 50.0 })?;
    let a = j.horizon_hat();
    let b = steps_to_decay(5.0, 0.105)?;
    let c = steps_for_constant_beta(0.1, 5.0)?;
    let ab = base.alpha_bar(1000);
    Ok(ensure(a == 20 && b == 48 && c == 48 && ab <= 1e-4, || {
        format!("T_hat {a} (want 20), steps {b} and {c} (want 48), alpha_bar_T {ab:e}")
    }))
}

fn check_composite() -> Result<Check> {
    let p = CompositeParams::default();
    let got = [composite_score(1.0, 0.0, &p)?, composite_score(0.0, 0.0, &p)?, composite_score(0.5, 0.1, &p)?];
    Ok(ensure(got == [100.0, 40.0, 66.0], || format!("got {got:?}, want [100, 40, 66]")))
}

fn fedavg(updates: &[ParamVector], faults: Faults) -> Result<Vec<f64>> {
    let avg = aggregate_fedavg(updates)?;
    Ok(if faults.fedavg_sign { avg.scaled(-1.0).into_values() } else { avg.into_values() })
}

fn sample_updates(n: usize, layout: &Layout, seed: u64) -> Result<Vec<ParamVector>> {
    let mut r = rng::stream(seed, &[rng::DATA]);
    (0..n)
        .map(|_| ParamVector::new((0..layout.total_len()).map(|_| r.random_range(-1.0..1.0)).collect(), layout.clone()))
        .collect()
}

fn two_layer_layout() -> Layout {
    Layout::new(vec![
        LayoutEntry { layer: 0, kind: ParamKind::Weight, shape: vec![3, 2] },
        LayoutEntry { layer: 0, kind: ParamKind::Bias, shape: vec![2] },
        LayoutEntry { layer: 1, kind: ParamKind::Weight, shape: vec![2, 2] },
        LayoutEntry { layer: 1, kind: ParamKind::Bias, shape: vec![2] },
    ])
}

fn check_fedavg(faults: Faults) -> Result<Check> {
    let layout = two_layer_layout();
    let ups = sample_updates(5, &layout, 3)?;
    let copies = vec![ups[0].clone(); 4];
    if fedavg(&copies, faults)? != ups[0].values() {
        return Ok(Err("mean of identical updates differs from the update".into()));
    }
    let mid: Vec<f64> = ups[0].values().iter().zip(ups[1].values()).map(|(a, b)| (a + b) / 2.0).collect();
    if !close(&fedavg(&ups[..2], faults)?, &mid, 1e-12) {
        return Ok(Err("mean of two updates is not their midpoint".into()));
    }
    let scaled: Vec<ParamVector> = ups.iter().map(|u| u.scaled(3.0)).collect();
    let lhs = fedavg(&scaled, faults)?;
    let rhs: Vec<f64> = fedavg(&ups, faults)?.iter().map(|v| 3.0 * v).collect();
    Ok(ensure(close(&lhs, &rhs, 1e-12), || "scaling the updates does not scale the mean".into()))
}

fn robust_case(faults: Faults) -> Result<(UpdateMatrix, Layout, Vec<f64>)> {
    let layout = two_layer_layout();
    let ups = sample_updates(7, &layout, 5)?;
    let reference = fedavg(&ups, faults)?;
    Ok((UpdateMatrix::from_params((0..7).collect(), &ups)?, layout, reference))
}

fn check_multikrum(faults: Faults) -> Result<Check> {
    let (m, _, reference) = robust_case(faults)?;
    let got = aggregate_multikrum(&m, 0, m.len())?;
    Ok(ensure(close(&got, &reference, 1e-12), || "f = 0, m = B differs from FedAvg".into()))
}

fn check_signguard(faults: Faults) -> Result<Check> {
    let (m, _, reference) = robust_case(faults)?;
    let open = SignGuardParams { norm_low: 0.0, norm_high: f64::INFINITY, subsample: 0, cluster: false };
    let got = aggregate_signguard(&m, &open, 1)?;
    Ok(ensure(close(&got, &reference, 1e-12), || "open bands without clustering differ from FedAvg".into()))
}

fn check_lasa(faults: Faults) -> Result<Check> {
    let (m, layout, reference) = robust_case(faults)?;
    let open = LasaParams { k_frac: 1.0, mag_low: 0.0, mag_high: f64::INFINITY, purity_min: 0.0 };
    let got = aggregate_lasa(&m, &layout, &open)?.aggregate;
    Ok(ensure(close(&got, &reference, 1e-12), || "full keep fraction and open bands differ from FedAvg".into()))
}

/// Evaluates the fast property suite.
pub fn selftest_report(faults: Faults) -> Vec<PropertyOutcome> {
    vec![
        outcome("gradient_finite_differences", check_gradients()),
        outcome("flatten_unflatten_bijection", check_flatten()),
        outcome("forward_moments", check_forward_moments()),
        outcome("jump_schedule_consistency", check_jump_schedules()),
        outcome("schedule_arithmetic", check_paper_arithmetic()),
        outcome("composite_score", check_composite()),
        outcome("fedavg_mean", check_fedavg(faults)),
        outcome("multikrum_reduces_to_fedavg", check_multikrum(faults)),
        outcome("signguard_reduces_to_fedavg", check_signguard(faults)),
        outcome("lasa_reduces_to_fedavg", check_lasa(faults)),
    ]
}

/// Prints one line per property; exit 0 iff all pass.
pub fn selftest(faults: Faults, w: &mut impl Write) -> i32 {
    let results = selftest_report(faults);
    let mut failed = Vec::new();
    for r in &results {
        let line = if r.passed {
            writeln!(w, "PASS {}", r.name)
        } else {
            failed.push(r.name);
            writeln!(w, "FAIL {}: {}", r.name, r.detail)
        };
        if line.is_err() {
            return 1;
        }
    }
    let summary = if failed.is_empty() {
        writeln!(w, "selftest: all {} properties passed", results.len())
    } else {
        writeln!(w, "selftest: failed {}", failed.join(", "))
    };
    if summary.is_err() || !failed.is_empty() {
        1
    } else {
        0
    }
}

pub fn cmd_selftest() -> i32 {
    selftest(Faults::from_env(), &mut std::io::stdout().lock())
}
