//! Experiment configuration documents (TOML).
//!
//! A document has the sections `data`, `fl`, `attack`, `defense`,
//! `aggregator` and `output`. Every section is optional and falls back to
//! defaults, but unknown keys anywhere are rejected with an error naming the
//! dotted key. [`ExperimentConfig::to_manifest`] writes the fully resolved
//! document, which parses back to an identical config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackPlan, NoiseParams, PcdmParams};
use crate::datasets::{load_idx, LabeledDataset, PartitionMode, SynthMixture};
use crate::defenses::AggregatorKind;
use crate::diffusion::ExpansionSpec;
use crate::error::{Error, Result};
use crate::federation::{DefenseConfig, FlConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            test_per_class: 50,
            dim: 20,
            separation: 1.8,
            spread: 0.5,
            train_seed: 11,
            test_seed: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub partition: PartitionMode,
    pub synth: SynthSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { source: DataSource::Synth, partition: PartitionMode::Iid, synth: SynthSection::default(), idx: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSection {
    /// Number of clients `N`.
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub malicious_fraction: f64,
    pub seed: u64,
}

impl Default for FlSection {
    fn default() -> Self {
        let d = FlConfig::default();
        Self {
            clients: d.clients,
            client_fraction: d.client_fraction,
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            hidden: d.hidden,
            malicious_fraction: d.malicious_fraction,
            seed: d.seed,
        }
    }
}

/// Flat view of an [`AttackPlan`]: the kind plus every parameter any attack
/// reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub light_sigma: f64,
    pub heavy_sigma: f64,
    pub sap_p: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub expansion: ExpansionSpec,
    pub sigma_v: f64,
    pub mu_v: f64,
    pub resample_vector: bool,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "K_p", skip_serializing_if = "Option::is_none")]
    pub k_p: Option<usize>,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub denoiser_hidden: Vec<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self::from_plan(&AttackPlan::of(AttackKind::None))
    }
}

impl AttackSection {
    pub fn from_plan(plan: &AttackPlan) -> Self {
        let (n, p) = (&plan.noise, &plan.pcdm);
        Self {
            kind: plan.kind,
            light_sigma: n.light_sigma,
            heavy_sigma: n.heavy_sigma,
            sap_p: n.sap_p,
            horizon: p.horizon,
            beta_start: p.beta_start,
            beta_end: p.beta_end,
            expansion: p.expansion,
            sigma_v: p.sigma_v,
            mu_v: p.mu_v,
            resample_vector: p.resample_vector,
            epochs: p.epochs,
            k_p: p.k_p,
            denoiser_lr: p.denoiser_lr,
            denoiser_batch: p.denoiser_batch,
            denoiser_hidden: p.denoiser_hidden.clone(),
        }
    }

    pub fn plan(&self) -> AttackPlan {
        AttackPlan {
            kind: self.kind,
            noise: NoiseParams { light_sigma: self.light_sigma, heavy_sigma: self.heavy_sigma, sap_p: self.sap_p },
            pcdm: PcdmParams {
                horizon: self.horizon,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                expansion: self.expansion,
                sigma_v: self.sigma_v,
                mu_v: self.mu_v,
                resample_vector: self.resample_vector,
                epochs: self.epochs,
                k_p: self.k_p,
                denoiser_lr: self.denoiser_lr,
                denoiser_batch: self.denoiser_batch,
                denoiser_hidden: self.denoiser_hidden.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output root; a timestamped run directory is created below it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub fl: FlSection,
    pub attack: AttackSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseConfig>,
    pub aggregator: AggregatorKind,
    pub output: OutputSection,
}

/// Keys `cmd_sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    MaliciousFraction,
    SigmaV,
    MuV,
    Epochs,
    THat,
}

impl SweepAxis {
    pub fn parse(key: &str) -> Result<Self> {
        Ok(match key {
            "malicious_fraction" => SweepAxis::MaliciousFraction,
            "sigma_v" => SweepAxis::SigmaV,
            "mu_v" => SweepAxis::MuV,
            "E" => SweepAxis::Epochs,
            "t_hat" | "T_hat" => SweepAxis::THat,
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    message: "not a sweepable key (malicious_fraction, sigma_v, mu_v, E, t_hat)".into(),
                })
            }
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::MaliciousFraction => "malicious_fraction",
            SweepAxis::SigmaV => "sigma_v",
            SweepAxis::MuV => "mu_v",
            SweepAxis::Epochs => "E",
            SweepAxis::THat => "t_hat",
        }
    }
}

fn whole(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Config { key: axis.key().into(), message: format!("{v} is not a non-negative integer") })
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config { key: "<document>".into(), message: e.message().to_string() })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { key: if path == "." { "<document>".into() } else { path }, message: e.inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { key: "<file>".into(), message: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        match self.data.source {
            DataSource::Idx if self.data.idx.is_none() => return bad("data.idx", "idx source needs a [data.idx] table"),
            DataSource::Synth => {
                let s = &self.data.synth;
                if s.classes < 2 || s.per_class == 0 || s.test_per_class == 0 || s.dim == 0 {
                    return bad("data.synth", "needs at least two classes and positive sizes");
                }
                if !(s.spread >= 0.0 && s.separation.is_finite()) {
                    return bad("data.synth.spread", "must be non-negative");
                }
            }
            _ => {}
        }
        if self.fl.rounds == 0 {
            return bad("fl.rounds", "need at least one round");
        }
        self.attack.plan().validate().map_err(|e| Error::Config { key: "attack".into(), message: e.to_string() })?;
        self.fl_config().validate()
    }

    pub fn fl_config(&self) -> FlConfig {
        let f = &self.fl;
        FlConfig {
            clients: f.clients,
            client_fraction: f.client_fraction,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            hidden: f.hidden.clone(),
            partition: self.data.partition,
            malicious_fraction: f.malicious_fraction,
            attack: self.attack.plan(),
            aggregator: self.aggregator.clone(),
            defense: self.defense.clone(),
            seed: f.seed,
        }
    }

    /// Training and test sets named by the `data` section.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.data.source {
            DataSource::Synth => {
                let s = &self.data.synth;
                let mix = SynthMixture {
                    classes: s.classes,
                    per_class: s.per_class,
                    dim: s.dim,
                    separation: s.separation,
                    spread: s.spread,
                };
                let test = SynthMixture { per_class: s.test_per_class, ..mix.clone() };
                Ok((mix.generate(s.train_seed)?, test.generate(s.test_seed)?))
            }
            DataSource::Idx => {
                let p = self.data.idx.as_ref().expect("validated");
                Ok((load_idx(&p.train_images, &p.train_labels)?, load_idx(&p.test_images, &p.test_labels)?))
            }
        }
    }

    /// Copy with `axis` set to `value`, validated.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        match axis {
            SweepAxis::MaliciousFraction => c.fl.malicious_fraction = value,
            SweepAxis::SigmaV => c.attack.sigma_v = value,
            SweepAxis::MuV => c.attack.mu_v = value,
            SweepAxis::Epochs => c.attack.epochs = whole(axis, value)?,
            SweepAxis::THat => c.attack.expansion = ExpansionSpec::Horizon { t_hat: whole(axis, value)? },
        }
        c.validate()?;
        Ok(c)
    }

    /// The fully resolved document, defaults included.
    pub fn to_manifest(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::DetectorKind;

    const FULL: &str = r#"
[data]
source = "synth"
partition = { kind = "dirichlet", alpha = 0.5 }
[data.synth]
classes = 4
per_class = 30
dim = 6

[fl]
clients = 10
rounds = 3
seed = 7
malicious_fraction = 0.2

[attack]
kind = "pcdm"
sigma_v = 1.5
E = 2
expansion = { kind = "horizon", t_hat = 25 }

[defense]
detector = { kind = "pca", kappa = 2.5 }

[aggregator]
kind = "multikrum"
f = 1
"#;

    fn key_of(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.attack.kind, AttackKind::None);
    }

    #[test]
    fn sections_reach_the_federation_config() {
        let c = ExperimentConfig::parse(FULL).unwrap();
        let fl = c.fl_config();
        assert_eq!(fl.clients, 10);
        assert_eq!(fl.partition, PartitionMode::Dirichlet { alpha: 0.5 });
        assert_eq!(fl.attack.pcdm.sigma_v, 1.5);
        assert_eq!(fl.attack.pcdm.mu_v, 5.0);
        assert_eq!(fl.attack.pcdm.epochs, 2);
        assert_eq!(fl.aggregator, AggregatorKind::Multikrum { f: 1, m: None });
        assert_eq!(fl.defense.unwrap().detector, DetectorKind::Pca { components: 2, kappa: 2.5 });
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(ExperimentConfig::parse("[attack]\nsigma = 1.0\n")), "attack.sigma");
        assert_eq!(key_of(ExperimentConfig::parse("[fl]\nrounds = 3\nroundz = 4\n")), "fl.roundz");
        assert_eq!(key_of(ExperimentConfig::parse("[extra]\n")), "extra");
    }

    #[test]
    fn type_and_value_errors_are_named() {
        assert_eq!(key_of(ExperimentConfig::parse("[fl]\nclients = \"many\"\n")), "fl.clients");
        assert_eq!(key_of(ExperimentConfig::parse("[fl]\nclient_fraction = 1.5\n")), "fl.client_fraction");
        assert_eq!(key_of(ExperimentConfig::parse("[data]\nsource = \"idx\"\n")), "data.idx");
        assert_eq!(key_of(ExperimentConfig::parse("[fl\n")), "<document>");
    }

    #[test]
    fn manifest_round_trips() {
        for text in ["", FULL] {
            let c = ExperimentConfig::parse(text).unwrap();
            let again = ExperimentConfig::parse(&c.to_manifest()).unwrap();
            assert_eq!(c, again);
            assert_eq!(c.to_manifest(), again.to_manifest());
        }
    }

    #[test]
    fn sweep_axes() {
        let c = ExperimentConfig::parse(FULL).unwrap();
        assert_eq!(c.with_axis(SweepAxis::MuV, 2.5).unwrap().attack.mu_v, 2.5);
        let t = c.with_axis(SweepAxis::THat, 40.0).unwrap();
        assert_eq!(t.attack.expansion, ExpansionSpec::Horizon { t_hat: 40 });
        assert!(c.with_axis(SweepAxis::Epochs, 2.5).is_err());
        assert!(c.with_axis(SweepAxis::MaliciousFraction, 1.5).is_err());
        assert!(SweepAxis::parse("lr").is_err());
        assert_eq!(SweepAxis::parse("E").unwrap(), SweepAxis::Epochs);
    }
}
