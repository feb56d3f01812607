//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, MixupScheme};
use crate::backbone::NetworkConfig;
use crate::data::{BatchSpec, Difficulty, SyntheticSpec};
use crate::error::{MidError, Result};
use crate::losses::LossWeights;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image folder, for `source = "directory"`.
    pub root: Option<PathBuf>,
    pub ids: usize,
    pub imgs_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub difficulty: Difficulty,
    /// Generator seed; independent of the training seed.
    pub seed: u64,
    /// Fraction of identities held out for evaluation.
    pub holdout: f64,
    pub pad: usize,
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            source: DataSource::Synthetic,
            root: None,
            ids: s.n_ids,
            imgs_per_id: s.imgs_per_id,
            height: s.height,
            width: s.width,
            difficulty: s.difficulty,
            seed: s.seed,
            holdout: 0.25,
            pad: 10,
            flip: true,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_ids: self.ids,
            imgs_per_id: self.imgs_per_id,
            height: self.height,
            width: self.width,
            seed: self.seed,
            difficulty: self.difficulty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub scheme: MixupScheme,
    /// Horizontal regions with independent mixup ratios.
    pub regions: usize,
    /// Parameter of the symmetric Beta distribution for `scheme = "beta"`.
    pub beta_alpha: f32,
    /// Agent update every this many iterations.
    pub agent_every: usize,
    pub agent: AgentConfig,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { scheme: MixupScheme::Mam, regions: 6, beta_alpha: 1.0, agent_every: 1, agent: AgentConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f32,
    /// Epochs of linear ramp-up to `lr`; zero disables the ramp.
    pub warmup_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 5e-4, milestones: vec![10, 22], gamma: 0.1, warmup_epochs: 5 }
    }
}

impl OptimConfig {
    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let ramp = if epoch < self.warmup_epochs { (epoch + 1) as f32 / (self.warmup_epochs + 1) as f32 } else { 1.0 };
        self.lr * ramp * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: PathBuf,
    /// Images per forward pass during evaluation.
    pub eval_chunk: usize,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub mixup: MixupConfig,
    pub optim: OptimConfig,
    pub batch: BatchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            output_dir: PathBuf::from("runs/mid"),
            eval_chunk: 64,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            mixup: MixupConfig::default(),
            optim: OptimConfig::default(),
            batch: BatchSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MidError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MidError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MidError::Config(e.to_string()))
    }

    /// Loss weights after applying the mixup scheme: without mixing every
    /// mixed-modality term is off.
    pub fn effective_loss(&self) -> LossWeights {
        match self.mixup.scheme {
            MixupScheme::None => self.loss.without_mix(),
            _ => self.loss.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MidError::Config(m));
        self.network.validate((self.data.height, self.data.width))?;
        self.loss.validate()?;
        if self.data.source == DataSource::Directory && self.data.root.is_none() {
            return err("directory data needs `data.root`".into());
        }
        if self.batch.p_ids < 2 || self.batch.k_imgs == 0 {
            return err(format!(
                "batches need at least two identities and one image each (got {} × {})",
                self.batch.p_ids, self.batch.k_imgs
            ));
        }
        if self.mixup.regions == 0 || self.mixup.regions > self.data.height {
            return err(format!("{} mixup regions for {} image rows", self.mixup.regions, self.data.height));
        }
        if self.mixup.scheme == MixupScheme::Beta && !(self.mixup.beta_alpha > 0.0) {
            return err(format!("beta parameter {} must be positive", self.mixup.beta_alpha));
        }
        if self.mixup.agent_every == 0 {
            return err("agent_every must be at least 1".into());
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.momentum) || self.optim.weight_decay < 0.0 {
            return err("optimizer needs lr > 0, momentum in [0, 1) and weight decay ≥ 0".into());
        }
        if !(0.0 < self.data.holdout && self.data.holdout < 1.0) {
            return err(format!("holdout fraction {} outside (0, 1)", self.data.holdout));
        }
        if self.eval_chunk == 0 {
            return err("eval_chunk must be positive".into());
        }
        Ok(())
    }
}
