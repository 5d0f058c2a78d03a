//! Experiment grids over novel-class choices, shots, proportions and
//! methods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_supports, evaluate, EvalContext, EvalOptions, EvalReport};
use crate::dataset::{
    make_split, sample_finetune_set_with, ClassId, DatasetIndex, MaskingPolicy, Phase, Proportion, ShotBudget,
    SplitSpec, SupportPool,
};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::FewShotModel;
use crate::rng::derive_seed;
use crate::saan::Fusion;
use crate::training::{finetune_novel, train_base, train_baseline, BaselineMode, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Two-phase training with relation-GRU fusion.
    Saan,
    /// Two-phase training with depthwise cross-correlation fusion.
    Xcorr,
    /// Two-phase training of the plain detector.
    FrcnFt,
    /// Single-phase training of the plain detector on base and k-shot data.
    FrcnJoint,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Saan, Method::Xcorr, Method::FrcnFt, Method::FrcnJoint];

    pub fn fusion(self) -> Fusion {
        match self {
            Method::Saan => Fusion::Gru,
            Method::Xcorr => Fusion::Xcorr,
            Method::FrcnFt | Method::FrcnJoint => Fusion::None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Saan => "saan",
            Method::Xcorr => "xcorr",
            Method::FrcnFt => "frcn-ft",
            Method::FrcnJoint => "frcn-joint",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "saan" | "gru" => Ok(Method::Saan),
            "xcorr" => Ok(Method::Xcorr),
            "frcn-ft" | "ft" => Ok(Method::FrcnFt),
            "frcn-joint" | "joint" => Ok(Method::FrcnJoint),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub novel: Vec<ClassId>,
    pub k: usize,
    pub rho: Proportion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub novel_choices: Vec<Vec<ClassId>>,
    pub shots: Vec<usize>,
    pub proportions: Vec<Proportion>,
    pub methods: Vec<Method>,
}

pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 3, 5, 10];

impl GridSpec {
    /// Every class in turn as the single novel class, each shot value, the
    /// selected 1:1 proportion.
    pub fn one_novel_each(classes: &[ClassId], methods: Vec<Method>) -> Self {
        GridSpec {
            novel_choices: classes.iter().map(|c| vec![*c]).collect(),
            shots: DEFAULT_SHOTS.to_vec(),
            proportions: vec![Proportion::Ratio(1)],
            methods,
        }
    }

    /// Proportion sweep for one novel split.
    pub fn proportion_sweep(novel: Vec<ClassId>) -> Self {
        GridSpec {
            novel_choices: vec![novel],
            shots: DEFAULT_SHOTS.to_vec(),
            proportions: Proportion::SWEEP.to_vec(),
            methods: vec![Method::Saan],
        }
    }

    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for novel in &self.novel_choices {
            for &method in &self.methods {
                for &rho in &self.proportions {
                    for &k in &self.shots {
                        out.push(CellSpec {
                            method,
                            novel: novel.clone(),
                            k,
                            rho,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Runs every cell through `runner`; a failing cell is recorded and the
/// grid continues.
pub fn run_experiment_grid(
    spec: &GridSpec,
    mut runner: impl FnMut(&CellSpec) -> Result<EvalReport>,
) -> Vec<CellResult> {
    spec.cells()
        .into_iter()
        .map(|cell| match runner(&cell) {
            Ok(report) => CellResult {
                cell,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                log::warn!("grid cell {} k={} rho={} failed: {e}", cell.method, cell.k, cell.rho);
                CellResult {
                    cell,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalOptions,
    pub train_fraction: f64,
    pub masking: MaskingPolicy,
    pub seed: u64,
    pub config_hash: String,
}

/// Trains and evaluates grid cells, reusing base-training runs across
/// cells that share a split and a fusion mode.
pub struct Pipeline<'a> {
    pub index: &'a DatasetIndex,
    pub config: PipelineConfig,
    base_models: BTreeMap<(Vec<ClassId>, Fusion), (FewShotModel, TrainLog)>,
    /// Training logs of the last cell run: base, then fine-tuning.
    pub last_logs: Vec<TrainLog>,
}

impl<'a> Pipeline<'a> {
    pub fn new(index: &'a DatasetIndex, config: PipelineConfig) -> Self {
        Pipeline {
            index,
            config,
            base_models: BTreeMap::new(),
            last_logs: Vec::new(),
        }
    }

    pub fn split(&self, novel: &[ClassId]) -> Result<SplitSpec> {
        let novel: BTreeSet<ClassId> = novel.iter().copied().collect();
        make_split(
            self.index,
            &novel,
            self.config.train_fraction,
            derive_seed(self.config.seed, "split"),
        )
    }

    fn base_model(&mut self, split: &SplitSpec, fusion: Fusion) -> Result<(FewShotModel, TrainLog)> {
        let key = (split.classes.novel().iter().copied().collect::<Vec<_>>(), fusion);
        if let Some(hit) = self.base_models.get(&key) {
            return Ok(hit.clone());
        }
        let cfg = TrainConfig {
            phase: Phase::Base,
            fusion,
            ..self.config.base.clone()
        };
        let trained = train_base(self.index, split, self.config.detector.clone(), &cfg)?;
        self.base_models.insert(key, trained.clone());
        Ok(trained)
    }

    /// Trains the cell's method and evaluates it on the split's test images.
    pub fn run_cell(&mut self, cell: &CellSpec) -> Result<EvalReport> {
        let split = self.split(&cell.novel)?;
        let seed = self.config.seed;
        let rho = if cell.method == Method::FrcnJoint {
            Proportion::All
        } else {
            cell.rho
        };
        let budget = ShotBudget::new(cell.k, rho)?;
        let set = sample_finetune_set_with(
            self.index,
            &split,
            budget,
            self.config.masking,
            derive_seed(seed, &format!("finetune/k{}/rho{}", cell.k, rho)),
        )?;
        let ft_cfg = TrainConfig {
            phase: Phase::Finetune,
            fusion: cell.method.fusion(),
            budget: Some(budget),
            ..self.config.finetune.clone()
        };
        let (model, logs) = match cell.method {
            Method::Saan | Method::Xcorr | Method::FrcnFt => {
                let (base, base_log) = self.base_model(&split, cell.method.fusion())?;
                let (model, ft_log) = finetune_novel(base, self.index, &split, &set, &ft_cfg)?;
                (model, vec![base_log, ft_log])
            }
            Method::FrcnJoint => {
                let (model, log) = train_baseline(
                    self.index,
                    &split,
                    &set,
                    BaselineMode::Joint,
                    self.config.detector.clone(),
                    &self.config.base,
                    &ft_cfg,
                )?;
                (model, vec![log])
            }
        };
        self.last_logs = logs;
        let pool = SupportPool::finetune(self.index, &split, &set);
        let supports = if model.fusion.uses_supports() {
            eval_supports(
                self.index,
                &pool,
                &model.class_ids(),
                cell.k,
                self.config.eval.support_side,
                self.config.eval.interpolation,
            )?
        } else {
            Vec::new()
        };
        let names: Vec<String> = cell.novel.iter().map(|c| self.index.class_name(*c)).collect();
        let ctx = EvalContext {
            method: cell.method.to_string(),
            novel: split.classes.novel().clone(),
            k: Some(cell.k),
            rho: Some(rho),
            split_id: format!("novel={};seed={}", names.join("+"), split.seed),
            seed,
            config_hash: self.config.config_hash.clone(),
            checkpoint: Some(model.meta(
                if cell.method == Method::FrcnJoint {
                    Phase::Joint
                } else {
                    Phase::Finetune
                },
                &cell.novel,
                &self.config.config_hash,
                seed,
                self.last_logs.iter().map(|l| l.losses.len()).sum(),
            )),
            masked: BTreeSet::new(),
        };
        let (report, _) = evaluate(
            &model,
            self.index,
            &split.test_images(),
            &supports,
            &ctx,
            &self.config.eval,
        )?;
        Ok(report)
    }
}

/// One JSON report object per grid cell.
pub fn write_reports(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(cells)?;
    out.push(b'\n');
    write_atomic(path, &out)
}

pub fn read_reports(path: &Path) -> Result<Vec<CellResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x * 100.0)).unwrap_or_default()
}

/// Flat table: `method,novel_class,k,rho,class,AP,seed,AP11`, AP in
/// percent, one row per class of each successful cell.
pub fn write_csv(path: &Path, cells: &[CellResult], index: &DatasetIndex) -> Result<()> {
    let mut out = String::from("method,novel_class,k,rho,class,AP,seed,AP11\n");
    for c in cells {
        let Some(report) = &c.report else { continue };
        let novel: Vec<String> = c.cell.novel.iter().map(|id| index.class_name(*id)).collect();
        for class in &report.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.cell.method,
                novel.join("+"),
                c.cell.k,
                report.rho.unwrap_or(c.cell.rho),
                class.name,
                fmt_opt(class.ap),
                report.seed,
                fmt_opt(class.ap11),
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}
