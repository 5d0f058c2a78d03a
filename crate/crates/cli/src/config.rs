//! Run configuration: a TOML file whose keys can be overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fsdet::dataset::{AnnotationFormat, MaskingPolicy, Phase, Proportion, ShotBudget};
use fsdet::detector::{DetectorConfig, DetectorSize};
use fsdet::evaluation::{ApMethod, EvalOptions};
use fsdet::geometry::DEFAULT_SUPPORT_SIDE;
use fsdet::saan::Fusion;
use fsdet::training::{hash_json, TrainConfig};
use fsdet::Error;

pub const OUT_ENV: &str = "FSDET_OUT";
const DEFAULT_OUT: &str = "fsdet-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub budget: BudgetConfig,
    pub model: ModelConfig,
    pub base: PhaseConfig,
    pub finetune: PhaseConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub format: AnnotationFormat,
    /// Accepted class names for VOC trees.
    pub classes: Option<Vec<String>>,
    /// Novel classes by name or id.
    pub novel: Vec<String>,
    pub train_fraction: f64,
    pub masking: MaskingPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            format: AnnotationFormat::Canonical,
            classes: None,
            novel: Vec::new(),
            train_fraction: 0.8,
            masking: MaskingPolicy::Allow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub k: usize,
    /// Base annotations per novel shot: an integer or `inf`.
    pub rho: String,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { k: 10, rho: "1".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub detector: DetectorSize,
    pub fusion: Fusion,
}

/// Optional overrides of the per-phase training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lr_milestones: Option<Vec<usize>>,
    pub warmup_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub hflip: Option<bool>,
    pub support_side: Option<usize>,
    pub max_image_side: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_method: ApMethod,
    pub support_side: usize,
    pub max_image_side: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            ap_method: ApMethod::AllPoint,
            support_side: DEFAULT_SUPPORT_SIDE,
            max_image_side: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction {} not in (0, 1)",
                self.data.train_fraction
            )));
        }
        self.shot_budget()?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval.iou_threshold {} not in (0, 1]",
                self.eval.iou_threshold
            )));
        }
        if self.eval.support_side == 0 {
            return Err(Error::Config("eval.support_side must be positive".into()));
        }
        self.train_config(Phase::Base)?.validate()?;
        self.train_config(Phase::Finetune)?.validate()?;
        Ok(())
    }

    pub fn rho(&self) -> Result<Proportion, Error> {
        self.budget.rho.parse()
    }

    pub fn shot_budget(&self) -> Result<ShotBudget, Error> {
        ShotBudget::new(self.budget.k, self.rho()?)
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig::for_size(self.model.detector)
    }

    /// Phase defaults for the configured detector with this file's overrides.
    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::for_phase(phase, &self.detector());
        let o = if phase == Phase::Finetune {
            &self.finetune
        } else {
            &self.base
        };
        if let Some(v) = o.steps {
            cfg.steps = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = &o.lr_milestones {
            cfg.lr_milestones = v.clone();
        }
        if let Some(v) = o.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = o.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = o.hflip {
            cfg.hflip = v;
        }
        if let Some(v) = o.support_side {
            cfg.support_side = v;
        }
        cfg.max_image_side = o.max_image_side;
        cfg.fusion = self.model.fusion;
        cfg.seed = self.seed;
        if phase == Phase::Finetune {
            cfg.budget = Some(self.shot_budget()?);
        }
        Ok(cfg)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            iou_threshold: self.eval.iou_threshold,
            ap_method: self.eval.ap_method,
            support_side: self.eval.support_side,
            max_image_side: self.eval.max_image_side,
            ..EvalOptions::default()
        }
    }

    /// Hash of everything that affects results; the output location is
    /// excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hash_json(&c)
    }

    /// Flag, then file, then the environment, then `fsdet-out`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(format!(
            "# config_hash = {}\n{}",
            self.hash(),
            toml::to_string_pretty(self).context("serialising config")?
        ))
    }
}
