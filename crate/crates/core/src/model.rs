//! A detector, its optional fusion weights and the class list of its head.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Ix2;

use crate::autograd::{softmax_rows, Graph, ParamId, ParamStore};
use crate::dataset::{ClassId, ClassInfo, Phase, SupportImage};
use crate::detector::boxes::{clip, nms, Corners};
use crate::detector::{load_checkpoint, save_checkpoint, CheckpointMeta, Detection, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;
use crate::rng::rng_for;
use crate::saan::{apply_fusion, encode_supports_graph, support_encode, Fusion, GruWeights, SupportFeatureBank};

#[derive(Clone, Debug)]
pub struct FewShotModel {
    pub detector: Detector,
    pub gru: Option<GruWeights>,
    pub fusion: Fusion,
    /// Foreground classes in predict-head order; label `i + 1` is
    /// `classes[i]`.
    pub classes: Vec<ClassInfo>,
    pub store: ParamStore<f32>,
}

/// Which parameters each component owns or reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub total: usize,
    pub detector: BTreeSet<ParamId>,
    pub gru: BTreeSet<ParamId>,
    /// Parameters read while encoding a support image.
    pub support_encoder: BTreeSet<ParamId>,
}

impl ParamCensus {
    /// Support-encoder parameters that are neither detector nor GRU
    /// parameters.
    pub fn support_only(&self) -> BTreeSet<ParamId> {
        self.support_encoder
            .iter()
            .filter(|p| !self.detector.contains(p) && !self.gru.contains(p))
            .copied()
            .collect()
    }

    /// Parameters that belong to nothing known.
    pub fn unaccounted(&self) -> usize {
        self.total - self.detector.len() - self.gru.len()
    }
}

impl FewShotModel {
    /// Fresh weights; initialisation randomness is derived from `seed`.
    pub fn new(config: DetectorConfig, fusion: Fusion, classes: Vec<ClassInfo>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init/detector");
        let detector = Detector::init(config, classes.len(), &mut store, &mut rng)?;
        let gru = match fusion {
            Fusion::Gru => Some(GruWeights::init(
                &mut store,
                detector.config.d(),
                &mut rng_for(seed, "init/gru"),
            )?),
            _ => None,
        };
        Ok(FewShotModel {
            detector,
            gru,
            fusion,
            classes,
            store,
        })
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (store, meta) = load_checkpoint(path)?;
        let detector = Detector::bind(meta.detector.clone(), &store)?;
        let gru = GruWeights::bind(&store)?;
        if (meta.fusion == Fusion::Gru) != gru.is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: fusion {} does not match the stored weights",
                path.display(),
                meta.fusion
            )));
        }
        let model = FewShotModel {
            detector,
            gru,
            fusion: meta.fusion,
            classes: meta.classes.clone(),
            store,
        };
        Ok((model, meta))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, &self.store, meta)
    }

    pub fn meta(&self, phase: Phase, novel: &[ClassId], config_hash: &str, seed: u64, steps: usize) -> CheckpointMeta {
        CheckpointMeta {
            phase,
            classes: self.classes.clone(),
            novel: novel.iter().map(|c| c.0).collect(),
            d: self.detector.config.d(),
            fusion: self.fusion,
            detector: self.detector.config.clone(),
            config_hash: config_hash.to_string(),
            seed,
            steps,
            from_scratch: true,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// 1-based label of `class` in the predict head.
    pub fn label_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| c.id == class).map(|i| i + 1)
    }

    /// Appends `extra` classes to the predict head.
    pub fn expand(&mut self, extra: &[ClassInfo], seed: u64) -> Result<()> {
        if let Some(c) = extra.iter().find(|c| self.label_of(c.id).is_some()) {
            return Err(Error::Config(format!("class {} is already in the head", c.id)));
        }
        let new_count = self.classes.len() + extra.len();
        self.detector
            .expand_predict_head(&mut self.store, new_count, &mut rng_for(seed, "init/expand"))?;
        self.classes.extend(extra.iter().cloned());
        Ok(())
    }

    pub fn census(&self) -> Result<ParamCensus> {
        let side = self.detector.config.stride() * self.detector.config.pooled;
        let probe = SupportImage {
            raster: Raster::filled(side, side, 3, 128.0),
            class: ClassId(0),
            annotation: crate::dataset::AnnotationId(0),
        };
        let mut g = Graph::new();
        encode_supports_graph(&mut g, &self.store, &self.detector, &[&probe])?;
        Ok(ParamCensus {
            total: self.store.len(),
            detector: self.detector.param_ids().into_iter().collect(),
            gru: self.gru.map(|w| w.ids().into_iter().collect()).unwrap_or_default(),
            support_encoder: g.used_params().into_iter().collect(),
        })
    }

    /// Encodes supports for every head class, averaging several images of a
    /// class.
    pub fn encode_bank(&self, supports: &[SupportImage]) -> Result<SupportFeatureBank<f32>> {
        support_encode(&self.detector, &self.store, supports, &self.class_ids())
    }

    /// Inference on one image. `bank` is required unless fusion is `none`.
    pub fn detect(&self, image: &Raster, bank: Option<&SupportFeatureBank<f32>>) -> Result<Vec<Detection>> {
        let det = &self.detector;
        let cfg = &det.config;
        let mut g = Graph::<f32>::new();
        let x = g.constant(det.preprocess(image)?);
        let feat = det.backbone_forward(&mut g, &self.store, x)?;
        let (obj, del) = det.rpn_head(&mut g, &self.store, feat)?;
        let proposals = det.propose(g.value(obj), g.value(del), image.width(), image.height(), false);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<Corners> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = det.roi_align(&mut g, feat, &rois)?;
        let z = det.roi_head_forward(&mut g, &self.store, pooled)?;
        let supports = match (self.fusion.uses_supports(), bank) {
            (false, _) => Vec::new(),
            (true, Some(b)) => {
                if let Some(c) = self.class_ids().into_iter().find(|c| b.get(*c).is_none()) {
                    return Err(Error::MissingSupport(c));
                }
                b.bind(&mut g)
            }
            (true, None) => return Err(Error::Config(format!("fusion {} needs a support bank", self.fusion))),
        };
        let fused = apply_fusion(&mut g, &self.store, self.fusion, self.gru.as_ref(), z, &supports)?;
        let (logits, deltas) = det.predict_head(&mut g, &self.store, fused)?;
        let probs = softmax_rows(g.value(logits).view().into_dimensionality::<Ix2>().expect("logits"));
        let deltas = g
            .value(deltas)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("deltas")
            .to_owned();
        let coder = cfg.roi_coder();
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut out = Vec::new();
        for (k, info) in self.classes.iter().enumerate() {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (r, roi) in rois.iter().enumerate() {
                let p = probs[[r, k + 1]] as f64;
                if p <= cfg.score_threshold {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|j| deltas[[r, 4 * k + j]] as f64);
                let b = clip(&coder.decode(roi, d), w, h);
                if b[2] - b[0] > 1e-3 && b[3] - b[1] > 1e-3 {
                    boxes.push(b);
                    scores.push(p);
                }
            }
            for i in nms(&boxes, &scores, cfg.detection_nms) {
                let b = boxes[i];
                out.push(Detection {
                    class: info.id,
                    score: scores[i],
                    bbox: BBox::new(b[0], b[1], b[2], b[3])?,
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(cfg.max_detections);
        Ok(out)
    }
}
