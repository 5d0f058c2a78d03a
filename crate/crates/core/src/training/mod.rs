//! Base training, novel fine-tuning and the baseline regimes.

mod targets;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use targets::{assign_anchors, sample_rois, AnchorSample, RoiSample, Targets};

use crate::autograd::{Graph, Sgd, Var};
use crate::dataset::{
    build_episode, crop_support, AnnotationId, ClassId, DatasetIndex, FinetuneSet, ImageId, Phase, ShotBudget,
    SplitSpec, SupportImage, SupportPool,
};
use crate::detector::boxes::{corners, Corners};
use crate::detector::{rpn_delta_indices, rpn_index, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_SUPPORT_SIDE;
use crate::model::FewShotModel;
use crate::raster::{Interpolation, Raster};
use crate::rng::{derive_seed, rng_for, rng_from_seed};
use crate::saan::{apply_fusion, class_vectors, encode_supports_graph, Fusion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Linear warm-up from `lr / 10` over this many steps.
    pub warmup_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub budget: Option<ShotBudget>,
    pub fusion: Fusion,
    pub seed: u64,
    pub hflip: bool,
    pub support_side: usize,
    pub interpolation: Interpolation,
    /// Longest image side fed to the detector; larger images are shrunk.
    pub max_image_side: Option<usize>,
}

impl TrainConfig {
    /// Defaults for `phase`: learning rate `1e-3` for the tiny and `1e-2`
    /// for the full detector in base and joint training, ten times lower
    /// when fine-tuning.
    pub fn for_phase(phase: Phase, detector: &DetectorConfig) -> Self {
        let base_lr = match detector.size {
            crate::detector::DetectorSize::Tiny => 1e-3,
            crate::detector::DetectorSize::Full => 1e-2,
        };
        TrainConfig {
            phase,
            steps: 1000,
            lr: if phase == Phase::Finetune {
                base_lr / 10.0
            } else {
                base_lr
            },
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            warmup_steps: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(10.0),
            batch_size: 1,
            budget: None,
            fusion: Fusion::Gru,
            seed: 0,
            hflip: false,
            support_side: DEFAULT_SUPPORT_SIDE,
            interpolation: Interpolation::Bilinear,
            max_image_side: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.support_side == 0 {
            return Err(Error::Config(
                "steps, batch_size and support_side must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.phase == Phase::Finetune && self.budget.is_none() {
            return Err(Error::Config("fine-tuning requires a shot budget".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| step >= m).count();
        let mut lr = self.lr * self.lr_gamma.powi(decays as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= 0.1 + 0.9 * t;
        }
        lr
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serialisable config");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// What one training step read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub step: usize,
    pub query: ImageId,
    pub supports: Vec<AnnotationId>,
    /// Annotations supervising the query.
    pub targets: Vec<AnnotationId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<LossRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_losses(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.losses {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        crate::io::write_atomic(path, &out)
    }

    pub fn write_episodes(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.episodes {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out).expect("vec write");
        }
        crate::io::write_atomic(path, &out)
    }

    /// Distinct annotations read either as support or as supervision.
    pub fn seen_annotations(&self) -> BTreeSet<AnnotationId> {
        self.episodes
            .iter()
            .flat_map(|e| e.supports.iter().chain(&e.targets).copied())
            .collect()
    }
}

/// Loss terms of one forward pass, still in the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Var,
    pub roi_reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn record(&self, g: &Graph<f32>, step: usize) -> LossRecord {
        let v = |x: Var| g.scalar(x) as f64;
        LossRecord {
            step,
            rpn_cls: v(self.rpn_cls),
            rpn_reg: v(self.rpn_reg),
            roi_cls: v(self.roi_cls),
            roi_reg: v(self.roi_reg),
            total: v(self.total),
        }
    }
}

/// Detection losses from raw head outputs: binary cross-entropy on sampled
/// anchors, softmax cross-entropy on sampled RoIs, and smooth-L1 (beta 1)
/// on positive matches only. Each term is averaged over its sampled set.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    g: &mut Graph<f32>,
    rpn_logits: Var,
    rpn_deltas: Var,
    anchors: &AnchorSample,
    roi_logits: Var,
    roi_deltas: Var,
    rois: &RoiSample,
    num_classes: usize,
) -> Result<LossVars> {
    let (a, h, w) = match g.shape(rpn_logits) {
        &[1, a, h, w] => (a, h, w),
        s => return Err(Error::shape(format!("rpn logits {s:?}"))),
    };
    let n_anchor = anchors.labels.len().max(1) as f32;
    let obj: Vec<(usize, f32)> = anchors
        .labels
        .iter()
        .map(|&(i, t)| (rpn_index(i, a, h, w)[0], t as f32))
        .collect();
    let rpn_cls = g.bce_with_logits(rpn_logits, &obj, n_anchor)?;
    let reg: Vec<([usize; 4], [f32; 4])> = anchors
        .regression
        .iter()
        .map(|(i, d)| (rpn_delta_indices(*i, a, h, w), d.map(|v| v as f32)))
        .collect();
    let rpn_reg = g.smooth_l1(rpn_deltas, &reg, 1.0, n_anchor)?;

    let n_roi = rois.labels.len().max(1) as f32;
    let cls: Vec<(usize, usize)> = rois.labels.iter().copied().enumerate().collect();
    let roi_cls = g.softmax_cross_entropy(roi_logits, &cls, n_roi)?;
    let width = 4 * num_classes;
    let reg: Vec<([usize; 4], [f32; 4])> = rois
        .regression
        .iter()
        .map(|&(row, label, d)| {
            let base = row * width + 4 * (label - 1);
            ([base, base + 1, base + 2, base + 3], d.map(|v| v as f32))
        })
        .collect();
    let roi_reg = g.smooth_l1(roi_deltas, &reg, 1.0, n_roi)?;
    let s1 = g.add(rpn_cls, rpn_reg)?;
    let s2 = g.add(roi_cls, roi_reg)?;
    let total = g.add(s1, s2)?;
    Ok(LossVars {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
        total,
    })
}

/// A query image with its supervision and support crops.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub query: Raster,
    pub targets: Targets,
    pub supports: Vec<SupportImage>,
}

/// Full forward pass and losses for one sample.
pub fn sample_losses(g: &mut Graph<f32>, model: &FewShotModel, sample: &TrainingSample, seed: u64) -> Result<LossVars> {
    let det = &model.detector;
    let cfg = &det.config;
    let store = &model.store;
    let x = g.constant(det.preprocess(&sample.query)?);
    let feat = det.backbone_forward(g, store, x)?;
    let (logits, deltas) = det.rpn_head(g, store, feat)?;
    let (fh, fw) = match g.shape(feat) {
        &[_, _, h, w] => (h, w),
        _ => unreachable!("backbone output is rank 4"),
    };
    let anchors = det.anchors(fh, fw);
    let mut rng = rng_from_seed(seed);
    let anchor_sample = assign_anchors(
        &anchors,
        &sample.targets,
        cfg.rpn_fg_iou,
        cfg.rpn_bg_iou,
        cfg.rpn_batch,
        cfg.rpn_positive_fraction,
        &cfg.rpn_coder(),
        &mut rng,
    );
    let (qw, qh) = (sample.query.width(), sample.query.height());
    let proposals: Vec<Corners> = det
        .propose(g.value(logits), g.value(deltas), qw, qh, true)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let roi_sample = sample_rois(
        &proposals,
        &sample.targets,
        cfg.roi_fg_iou,
        cfg.roi_batch,
        cfg.roi_positive_fraction,
        &cfg.roi_coder(),
        &mut rng,
    );
    let pooled = det.roi_align(g, feat, &roi_sample.rois)?;
    let z = det.roi_head_forward(g, store, pooled)?;
    let supports: Vec<Var> = if model.fusion.uses_supports() {
        let refs: Vec<&SupportImage> = sample.supports.iter().collect();
        let encoded = encode_supports_graph(g, store, det, &refs)?;
        let labels: Vec<ClassId> = sample.supports.iter().map(|s| s.class).collect();
        class_vectors(g, encoded, &labels)?.into_values().collect()
    } else {
        Vec::new()
    };
    let fused = apply_fusion(g, store, model.fusion, model.gru.as_ref(), z, &supports)?;
    let (cls, del) = det.predict_head(g, store, fused)?;
    compute_losses(
        g,
        logits,
        deltas,
        &anchor_sample,
        cls,
        del,
        &roi_sample,
        det.num_classes(),
    )
}

/// Where a training run draws its episodes from.
pub struct EpisodeSource<'a> {
    pub index: &'a DatasetIndex,
    pub split: &'a SplitSpec,
    pub phase: Phase,
    pub queries: Vec<ImageId>,
    pub pool: SupportPool,
    /// Annotations that supervise; everything else in a query is masked.
    pub active: Option<BTreeSet<AnnotationId>>,
}

struct ImageCache<'a> {
    index: &'a DatasetIndex,
    images: BTreeMap<ImageId, Raster>,
}

impl ImageCache<'_> {
    fn get(&mut self, id: ImageId) -> Result<&Raster> {
        if !self.images.contains_key(&id) {
            let img = self.index.load_image(id)?;
            self.images.insert(id, img);
        }
        Ok(&self.images[&id])
    }
}

/// Scale applied to an image so that its longer side is at most `max_side`.
pub fn image_scale(width: usize, height: usize, max_side: Option<usize>) -> f64 {
    match max_side {
        Some(m) if width.max(height) > m => m as f64 / width.max(height) as f64,
        _ => 1.0,
    }
}

pub fn rescale(image: &Raster, scale: f64, interp: Interpolation) -> Raster {
    if scale == 1.0 {
        return image.clone();
    }
    let w = ((image.width() as f64 * scale).round() as usize).max(1);
    let h = ((image.height() as f64 * scale).round() as usize).max(1);
    image.resize(w, h, interp)
}

impl EpisodeSource<'_> {
    fn sample(
        &self,
        model: &FewShotModel,
        cache: &mut ImageCache<'_>,
        cfg: &TrainConfig,
        step: usize,
        query: ImageId,
    ) -> Result<(TrainingSample, EpisodeRecord)> {
        let episode = build_episode(
            self.split,
            self.phase,
            query,
            &self.pool,
            derive_seed(cfg.seed, &format!("episode/{step}/{query}")),
        )?;
        let mut supports = Vec::new();
        if model.fusion.uses_supports() {
            for s in &episode.supports {
                let image = self
                    .index
                    .annotation(s.annotation)
                    .map(|a| a.image)
                    .ok_or_else(|| Error::Dataset(format!("unknown annotation {}", s.annotation)))?;
                let raster = cache.get(image)?;
                supports.push(crop_support(
                    self.index,
                    raster,
                    s.annotation,
                    cfg.support_side,
                    cfg.interpolation,
                )?);
            }
        }
        let raw = cache.get(query)?.clone();
        let scale = image_scale(raw.width(), raw.height(), cfg.max_image_side);
        let mut image = rescale(&raw, scale, cfg.interpolation);
        let flip = cfg.hflip && rng_for(cfg.seed, &format!("flip/{step}")).gen_bool(0.5);
        let mut targets = Targets::default();
        let mut used = Vec::new();
        for a in self.index.annotations_of(query) {
            let mut b = a.bbox;
            if flip {
                b = b.flip_horizontal(raw.width());
            }
            let c = corners(&b).map(|v| v * scale);
            let active = self.active.as_ref().is_none_or(|s| s.contains(&a.id));
            match model.label_of(a.class) {
                Some(label) if active && episode.active_classes.contains(&a.class) => {
                    targets.boxes.push((label, c));
                    used.push(a.id);
                }
                _ => targets.ignore.push(c),
            }
        }
        if flip {
            image = image.flip_horizontal();
        }
        let record = EpisodeRecord {
            step,
            query,
            supports: episode.supports.iter().map(|s| s.annotation).collect(),
            targets: used,
        };
        Ok((
            TrainingSample {
                query: image,
                targets,
                supports,
            },
            record,
        ))
    }
}

/// Runs `cfg.steps` SGD steps of `model` on episodes from `source`. Query
/// images are visited in a fresh seeded order every epoch.
pub fn train(model: &mut FewShotModel, source: &EpisodeSource<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if source.queries.is_empty() {
        return Err(Error::Dataset("no training images for this phase".into()));
    }
    if model.fusion != cfg.fusion {
        return Err(Error::Config(format!(
            "model fusion {} differs from the configured {}",
            model.fusion, cfg.fusion
        )));
    }
    let mut cache = ImageCache {
        index: source.index,
        images: BTreeMap::new(),
    };
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32)
        .with_clip_norm(cfg.clip_norm.map(|c| c as f32));
    let mut log = TrainLog::default();
    let mut order: Vec<ImageId> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let mut totals = Vec::with_capacity(cfg.batch_size);
        let mut parts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = source.queries.clone();
                order.shuffle(&mut rng_for(cfg.seed, &format!("epoch/{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            let query = order[cursor];
            cursor += 1;
            let (sample, record) = source.sample(model, &mut cache, cfg, step, query)?;
            let losses = sample_losses(
                &mut g,
                model,
                &sample,
                derive_seed(cfg.seed, &format!("sample/{step}/{query}")),
            )?;
            totals.push(losses.total);
            parts.push(losses);
            log.episodes.push(record);
        }
        let (root, record) = if parts.len() == 1 {
            (parts[0].total, parts[0].record(&g, step))
        } else {
            let b = parts.len() as f64;
            let mut rec = LossRecord {
                step,
                rpn_cls: 0.0,
                rpn_reg: 0.0,
                roi_cls: 0.0,
                roi_reg: 0.0,
                total: 0.0,
            };
            for p in &parts {
                let r = p.record(&g, step);
                rec.rpn_cls += r.rpn_cls / b;
                rec.rpn_reg += r.rpn_reg / b;
                rec.roi_cls += r.roi_cls / b;
                rec.roi_reg += r.roi_reg / b;
                rec.total += r.total / b;
            }
            let mut sum = totals[0];
            for &t in &totals[1..] {
                sum = g.add(sum, t)?;
            }
            (g.affine(sum, 1.0 / b as f32, 0.0), rec)
        };
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{record:?}; last query {:?}", log.episodes.last().map(|e| e.query)),
            });
        }
        let grads = g.backward(root);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient; losses {record:?}"),
            });
        }
        opt.lr = cfg.lr_at(step) as f32;
        opt.step(&mut model.store, &grads);
        log::debug!("step {step}: total {:.4}", record.total);
        log.losses.push(record);
    }
    Ok(log)
}

/// Phase 1: a fresh model on base classes only, trained on images holding
/// no novel object.
pub fn train_base(
    index: &DatasetIndex,
    split: &SplitSpec,
    detector: DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(FewShotModel, TrainLog)> {
    let classes = split
        .classes
        .base()
        .iter()
        .filter_map(|c| index.class(*c).cloned())
        .collect();
    let mut model = FewShotModel::new(detector, cfg.fusion, classes, derive_seed(cfg.seed, "model"))?;
    let source = EpisodeSource {
        index,
        split,
        phase: Phase::Base,
        queries: split.phase1_images(index),
        pool: SupportPool::phase1(index, split),
        active: None,
    };
    let log = train(&mut model, &source, cfg)?;
    Ok((model, log))
}

/// Phase 2: expands the head with the novel classes and trains on the
/// fine-tuning set with the same losses and episodes.
pub fn finetune_novel(
    mut model: FewShotModel,
    index: &DatasetIndex,
    split: &SplitSpec,
    set: &FinetuneSet,
    cfg: &TrainConfig,
) -> Result<(FewShotModel, TrainLog)> {
    let novel: Vec<_> = split
        .classes
        .novel()
        .iter()
        .filter(|c| model.label_of(**c).is_none())
        .filter_map(|c| index.class(*c).cloned())
        .collect();
    if novel.is_empty() {
        return Err(Error::Config("model already covers every novel class".into()));
    }
    model.expand(&novel, derive_seed(cfg.seed, "expand"))?;
    let source = EpisodeSource {
        index,
        split,
        phase: Phase::Finetune,
        queries: set.images.clone(),
        pool: SupportPool::finetune(index, split, set),
        active: Some(set.active.clone()),
    };
    let log = train(&mut model, &source, cfg)?;
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Joint,
    Ft,
}

/// Plain-detector baselines. `Joint` trains once on every base annotation
/// plus `k` novel annotations per class (the set must use proportion
/// `inf`); `Ft` is base training followed by fine-tuning, without fusion.
pub fn train_baseline(
    index: &DatasetIndex,
    split: &SplitSpec,
    set: &FinetuneSet,
    mode: BaselineMode,
    detector: DetectorConfig,
    base_cfg: &TrainConfig,
    ft_cfg: &TrainConfig,
) -> Result<(FewShotModel, TrainLog)> {
    let force = |c: &TrainConfig| TrainConfig {
        fusion: Fusion::None,
        ..c.clone()
    };
    match mode {
        BaselineMode::Ft => {
            let (model, mut log) = train_base(index, split, detector, &force(base_cfg))?;
            let (model, ft) = finetune_novel(model, index, split, set, &force(ft_cfg))?;
            log.losses.extend(ft.losses);
            log.episodes.extend(ft.episodes);
            Ok((model, log))
        }
        BaselineMode::Joint => {
            let classes = split
                .classes
                .all()
                .iter()
                .filter_map(|c| index.class(*c).cloned())
                .collect();
            let cfg = TrainConfig {
                phase: Phase::Joint,
                ..force(base_cfg)
            };
            let mut model = FewShotModel::new(detector, Fusion::None, classes, derive_seed(cfg.seed, "model"))?;
            let source = EpisodeSource {
                index,
                split,
                phase: Phase::Joint,
                queries: set.images.clone(),
                pool: SupportPool::finetune(index, split, set),
                active: Some(set.active.clone()),
            };
            let log = train(&mut model, &source, &cfg)?;
            Ok((model, log))
        }
    }
}
