use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_poisonlab");

const MINIMAL: &str = r#"
[data.synth]
classes = 3
per_class = 20
test_per_class = 10
dim = 4

[fl]
clients = 8
rounds = 4
malicious_fraction = 0.25
seed = 3

[attack]
kind = "label_flip"

[defense]
detector = { kind = "pca" }
"#;

fn poisonlab(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove(poisonlab::cli::OUTPUT_ROOT_ENV).env_remove(poisonlab::cli::SELFTEST_FAULT_ENV);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("run");
    let o = poisonlab(&["run", "--config", &cfg, "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "detections.csv", "projections.csv", "manifest.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4);
    assert!(results.starts_with("round,scenario,malicious_fraction,attack,aggregator,defense,accuracy\n"));
    let detections = fs::read_to_string(out.join("detections.csv")).unwrap();
    assert_eq!(detections.lines().count(), 1 + 4 * 4);

    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let resolved = poisonlab::config::ExperimentConfig::parse(&manifest).unwrap();
    let original = poisonlab::config::ExperimentConfig::parse(MINIMAL).unwrap();
    assert_eq!(resolved, original);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(poisonlab(&["run", "--config", &cfg, "--out", s(&a)], &[]).status.code(), Some(0));
    assert_eq!(poisonlab(&["run", "--config", &cfg, "--out", s(&b)], &[]).status.code(), Some(0));
    for f in ["results.csv", "detections.csv", "projections.csv", "manifest.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("run");
    assert_eq!(poisonlab(&["run", "--config", &cfg, "--out", s(&out), "--seed", "99"], &[]).status.code(), Some(0));
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert_eq!(poisonlab::config::ExperimentConfig::parse(&manifest).unwrap().fl.seed, 99);
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[attack]\nkind = \"pcdm\"\nsigma = 1.0\n");
    let out = tmp.path().join("run");
    let o = poisonlab(&["run", "--config", &cfg, "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attack.sigma"));
    assert!(!out.exists(), "config errors must not create outputs");
}

#[test]
fn invalid_value_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[fl]\nclient_fraction = 0.0\n");
    let o = poisonlab(&["run", "--config", &cfg, "--out", s(&tmp.path().join("r"))], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fl.client_fraction"));
}

#[test]
fn runtime_failure_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let text = format!(
        "[data]\nsource = \"idx\"\n[data.idx]\ntrain_images = {m:?}\ntrain_labels = {m:?}\ntest_images = {m:?}\ntest_labels = {m:?}\n",
        m = missing.to_str().unwrap()
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let o = poisonlab(&["run", "--config", &cfg, "--out", s(&tmp.path().join("r"))], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn output_root_from_environment_gets_timestamped_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let root = tmp.path().join("root");
    let o = poisonlab(&["run", "--config", &cfg], &[(poisonlab::cli::OUTPUT_ROOT_ENV, &root)]);
    assert_eq!(o.status.code(), Some(0));
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].join("results.csv").is_file());
}

fn blocks(results: &str) -> BTreeMap<String, usize> {
    let mut rdr = csv::Reader::from_reader(results.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "axis_value").unwrap();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        *out.entry(rec.unwrap()[col].to_string()).or_insert(0) += 1;
    }
    out
}

#[test]
fn sweep_over_malicious_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("sweep");
    let o = poisonlab(
        &["sweep", "--config", &cfg, "--axis", "malicious_fraction", "--values", "0,0.1,0.2,0.3", "--out", s(&out)],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let b = blocks(&results);
    assert_eq!(b.len(), 4);
    assert!(b.values().all(|&rows| rows == 4));
    for v in ["0", "0.1", "0.2", "0.3"] {
        assert!(out.join(format!("malicious_fraction={v}")).join("detections.csv").is_file());
    }
}

#[test]
fn sweep_rejects_empty_values_and_unknown_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("sweep");
    let o = poisonlab(&["sweep", "--config", &cfg, "--axis", "mu_v", "--values", "", "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = poisonlab(&["sweep", "--config", &cfg, "--axis", "lr", "--values", "1", "--out", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn selftest_passes_repeatably() {
    let a = poisonlab(&["selftest"], &[]);
    let b = poisonlab(&["selftest"], &[]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn selftest_names_injected_fedavg_fault() {
    let mut cmd = Command::new(BIN);
    let o = cmd.arg("selftest").env(poisonlab::cli::SELFTEST_FAULT_ENV, "fedavg_sign").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("FAIL fedavg_mean"), "{text}");
}
