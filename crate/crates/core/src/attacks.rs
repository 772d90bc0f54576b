//! Data poisoning attacks run by malicious clients on their local shard.
//!
//! Every attack is pure: the benign dataset is borrowed and a new one is
//! returned, deterministic in the seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::diffusion::{
    generate_poisoned_dataset, train_denoiser, DenoiserTraining, DiffusionSchedule, ExpansionSpec,
    JumpSchedule, PoisonVectorSpec,
};
use crate::error::{input, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    LightNoise,
    HeavyNoise,
    Sap,
    Pcdm,
    /// Model-level baseline: the client replays the first update it computed
    /// in every later round instead of training.
    ConstantUpdate,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::LightNoise => "light_noise",
            AttackKind::HeavyNoise => "heavy_noise",
            AttackKind::Sap => "sap",
            AttackKind::Pcdm => "pcdm",
            AttackKind::ConstantUpdate => "constant_update",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    SaltAndPepper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub light_sigma: f64,
    pub heavy_sigma: f64,
    pub sap_p: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { light_sigma: 0.1, heavy_sigma: 0.5, sap_p: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcdmParams {
    /// Base diffusion horizon `T`.
    #[serde(rename = "T")]
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub expansion: ExpansionSpec,
    pub sigma_v: f64,
    pub mu_v: f64,
    pub resample_vector: bool,
    /// Denoiser training epochs `E`.
    #[serde(rename = "E")]
    pub epochs: usize,
    /// Poisoned samples to generate; `None` means the shard size.
    #[serde(rename = "K_p")]
    pub k_p: Option<usize>,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub denoiser_hidden: Vec<usize>,
}

impl Default for PcdmParams {
    fn default() -> Self {
        let training = DenoiserTraining::default();
        Self {
            horizon: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            expansion: ExpansionSpec::default(),
            sigma_v: 1.0,
            mu_v: 5.0,
            resample_vector: false,
            epochs: training.epochs,
            k_p: None,
            denoiser_lr: training.lr,
            denoiser_batch: training.batch,
            denoiser_hidden: training.hidden,
        }
    }
}

impl PcdmParams {
    pub fn jump_schedule(&self) -> Result<JumpSchedule> {
        let base = DiffusionSchedule::linear(self.horizon, self.beta_start, self.beta_end)?;
        JumpSchedule::from_spec(base, &self.expansion)
    }

    pub fn training(&self) -> DenoiserTraining {
        DenoiserTraining {
            epochs: self.epochs,
            lr: self.denoiser_lr,
            batch: self.denoiser_batch,
            hidden: self.denoiser_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.jump_schedule()?;
        if !(self.sigma_v >= 0.0) || !self.mu_v.is_finite() {
            return input("sigma_v must be >= 0 and mu_v finite");
        }
        if self.k_p == Some(0) {
            return input("K_p must be at least 1");
        }
        if self.denoiser_batch == 0 || !(self.denoiser_lr > 0.0) {
            return input("denoiser batch and learning rate must be positive");
        }
        Ok(())
    }
}

/// What a malicious client does to its shard. The fraction of malicious
/// clients is a federation setting, not part of the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub kind: AttackKind,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub pcdm: PcdmParams,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self { kind: AttackKind::Pcdm, noise: NoiseParams::default(), pcdm: PcdmParams::default() }
    }
}

impl AttackPlan {
    pub fn of(kind: AttackKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::LightNoise => check_noise(NoiseKind::Gaussian, self.noise.light_sigma),
            AttackKind::HeavyNoise => check_noise(NoiseKind::Gaussian, self.noise.heavy_sigma),
            AttackKind::Sap => check_noise(NoiseKind::SaltAndPepper, self.noise.sap_p),
            AttackKind::Pcdm => self.pcdm.validate(),
            _ => Ok(()),
        }
    }

    /// Poisoned replacement for `ds`. [`AttackKind::None`] and
    /// [`AttackKind::ConstantUpdate`] leave the data alone.
    pub fn apply(&self, ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
        match self.kind {
            AttackKind::None | AttackKind::ConstantUpdate => Ok(ds.clone()),
            AttackKind::LabelFlip => poison_label_flip(ds, seed),
            AttackKind::LightNoise => poison_noise(ds, NoiseKind::Gaussian, self.noise.light_sigma, seed),
            AttackKind::HeavyNoise => poison_noise(ds, NoiseKind::Gaussian, self.noise.heavy_sigma, seed),
            AttackKind::Sap => poison_noise(ds, NoiseKind::SaltAndPepper, self.noise.sap_p, seed),
            AttackKind::Pcdm => poison_pcdm(ds, &self.pcdm, seed),
        }
    }
}

/// Relabels `y` as `(y + 1) mod C`.
pub fn poison_label_flip(ds: &LabeledDataset, _seed: u64) -> Result<LabeledDataset> {
    let c = ds.class_count();
    if c < 2 {
        return input("label flipping needs at least two classes");
    }
    let labels = ds.labels().iter().map(|y| (y + 1) % c).collect();
    LabeledDataset::new(ds.features().clone(), labels, c)
}

fn check_noise(kind: NoiseKind, param: f64) -> Result<()> {
    match kind {
        NoiseKind::Gaussian if !(param > 0.0 && param.is_finite()) => {
            input(format!("gaussian noise sigma must be positive, got {param}"))
        }
        NoiseKind::SaltAndPepper if !(param > 0.0 && param <= 1.0) => {
            input(format!("salt-and-pepper probability must be in (0, 1], got {param}"))
        }
        _ => Ok(()),
    }
}

/// Gaussian: `clip(x + σ z, -1, 1)`. Salt-and-pepper: each coordinate is
/// replaced by ±1 (equal odds) with probability `param`.
pub fn poison_noise(ds: &LabeledDataset, kind: NoiseKind, param: f64, seed: u64) -> Result<LabeledDataset> {
    check_noise(kind, param)?;
    let mut r = rng::stream(seed, &[rng::ATTACK, 0x6e7a]);
    let mut x = ds.features().clone();
    match kind {
        NoiseKind::Gaussian => x.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut r);
            (v + param * z).clamp(-1.0, 1.0)
        }),
        NoiseKind::SaltAndPepper => x.mapv_inplace(|v| {
            if r.random::<f64>() < param {
                if r.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            } else {
                v
            }
        }),
    }
    ds.with_features(x)
}

/// Trains a poisoned-context denoiser on `ds` and replaces the shard with
/// `K_p` generated samples.
pub fn poison_pcdm(ds: &LabeledDataset, params: &PcdmParams, seed: u64) -> Result<LabeledDataset> {
    params.validate()?;
    let jump = params.jump_schedule()?;
    let vector = PoisonVectorSpec {
        sigma_v: params.sigma_v,
        mu_v: params.mu_v,
        dim: ds.dim(),
        seed: rng::derive_seed(seed, &[0x7665]),
        resample: params.resample_vector,
    };
    let context = vector.realize()?;
    let (denoiser, _) = train_denoiser(ds, &jump, Some(&context), &params.training(), seed)?;
    let k_p = params.k_p.unwrap_or(ds.len());
    generate_poisoned_dataset(
        &denoiser,
        &jump,
        Some(&context),
        ds.labels(),
        ds.class_count(),
        k_p,
        rng::derive_seed(seed, &[0x6765]),
    )
}
