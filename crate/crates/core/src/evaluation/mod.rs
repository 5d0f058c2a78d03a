//! Per-class AP reports, experiment grids and figure rendering.

mod ap;
mod grid;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ap::{
    compute_ap, compute_iou, interpolated, match_detections, ApMethod, ApResult, GtBox, Match, Outcome, ScoredBox,
};
pub use grid::{
    read_reports, run_experiment_grid, write_csv, write_reports, CellResult, CellSpec, GridSpec, Method, Pipeline,
    PipelineConfig,
};
pub use render::{draw_overlay, render_histograms, render_report, Bar, FigureData, Panel};

use crate::dataset::{
    crop_support, AnnotationId, ClassId, DatasetIndex, ImageId, Proportion, SupportImage, SupportPool,
};
use crate::detector::{CheckpointMeta, Detection};
use crate::error::{Error, Result};
use crate::geometry::{BBox, DEFAULT_SUPPORT_SIDE};
use crate::model::FewShotModel;
use crate::raster::Interpolation;
use crate::training::{image_scale, rescale};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Variant reported as `ap`; both are always computed.
    pub ap_method: ApMethod,
    pub support_side: usize,
    pub interpolation: Interpolation,
    pub max_image_side: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_threshold: 0.5,
            ap_method: ApMethod::AllPoint,
            support_side: DEFAULT_SUPPORT_SIDE,
            interpolation: Interpolation::Bilinear,
            max_image_side: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ClassId,
    pub name: String,
    pub novel: bool,
    /// `None` when the test set holds no object of the class.
    pub ap: Option<f64>,
    pub ap11: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    /// Interpolated `(recall, precision)` points.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub classes: Vec<ClassReport>,
    pub iou_threshold: f64,
    pub ap_method: ApMethod,
    pub k: Option<usize>,
    pub rho: Option<Proportion>,
    pub split_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub images: usize,
    pub checkpoint: Option<CheckpointMeta>,
}

impl EvalReport {
    pub fn class(&self, class: ClassId) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// Mean AP over novel classes that have ground truth.
    pub fn novel_ap(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|c| c.novel).filter_map(|c| c.ap))
    }

    pub fn base_ap(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|c| !c.novel).filter_map(|c| c.ap))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: ImageId,
    pub detections: Vec<Detection>,
}

/// Up to `shots` support crops per class, taken from `pool` in ascending
/// annotation order.
pub fn eval_supports(
    index: &DatasetIndex,
    pool: &SupportPool,
    classes: &[ClassId],
    shots: usize,
    side: usize,
    interp: Interpolation,
) -> Result<Vec<SupportImage>> {
    let mut cache = BTreeMap::new();
    let mut out = Vec::new();
    for &c in classes {
        let ids = pool.of_class(c);
        if ids.is_empty() {
            return Err(Error::MissingSupport(c));
        }
        for &a in ids.iter().take(shots.max(1)) {
            let image = index
                .annotation(a)
                .map(|x| x.image)
                .ok_or_else(|| Error::Dataset(format!("unknown annotation {a}")))?;
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(image) {
                slot.insert(index.load_image(image)?);
            }
            out.push(crop_support(index, &cache[&image], a, side, interp)?);
        }
    }
    Ok(out)
}

/// What is being evaluated, for the report header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalContext {
    pub method: String,
    pub novel: BTreeSet<ClassId>,
    pub k: Option<usize>,
    pub rho: Option<Proportion>,
    pub split_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: Option<CheckpointMeta>,
    /// Ignore regions inside the test images.
    pub masked: BTreeSet<AnnotationId>,
}

/// Runs `model` on every test image and scores each head class.
pub fn evaluate(
    model: &FewShotModel,
    index: &DatasetIndex,
    test_images: &[ImageId],
    supports: &[SupportImage],
    ctx: &EvalContext,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<ImageDetections>)> {
    if test_images.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let bank = if model.fusion.uses_supports() {
        Some(model.encode_bank(supports)?)
    } else {
        None
    };
    let mut all = Vec::with_capacity(test_images.len());
    for &id in test_images {
        let raw = index.load_image(id)?;
        let scale = image_scale(raw.width(), raw.height(), opts.max_image_side);
        let image = rescale(&raw, scale, opts.interpolation);
        let mut dets = model.detect(&image, bank.as_ref())?;
        if scale != 1.0 {
            for d in &mut dets {
                let b = d.bbox;
                d.bbox = BBox::new(b.x1 / scale, b.y1 / scale, b.x2 / scale, b.y2 / scale)?
                    .clip(index.image(id).expect("known image").dims);
            }
        }
        all.push(ImageDetections {
            image: id,
            detections: dets,
        });
    }
    let report = score(model, index, &all, ctx, opts);
    Ok((report, all))
}

/// Scores precomputed detections against the test annotations.
pub fn score(
    model: &FewShotModel,
    index: &DatasetIndex,
    detections: &[ImageDetections],
    ctx: &EvalContext,
    opts: &EvalOptions,
) -> EvalReport {
    let mut classes = Vec::new();
    for info in &model.classes {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for img in detections {
            for d in img.detections.iter().filter(|d| d.class == info.id) {
                dets.push(ScoredBox {
                    image: img.image,
                    score: d.score,
                    bbox: d.bbox,
                });
            }
            for a in index.annotations_of(img.image).filter(|a| a.class == info.id) {
                gts.push(GtBox {
                    image: img.image,
                    bbox: a.bbox,
                    masked: ctx.masked.contains(&a.id),
                });
            }
        }
        let result = compute_ap(&dets, &gts, opts.iou_threshold);
        classes.push(ClassReport {
            class: info.id,
            name: info.name.clone(),
            novel: ctx.novel.contains(&info.id),
            ap: result.as_ref().map(|r| r.get(opts.ap_method)),
            ap11: result.as_ref().map(|r| r.ap11),
            num_gt: gts.iter().filter(|g| !g.masked).count(),
            num_detections: dets.len(),
            pr: result.map(|r| interpolated(&r.pr)).unwrap_or_default(),
        });
    }
    EvalReport {
        method: ctx.method.clone(),
        classes,
        iou_threshold: opts.iou_threshold,
        ap_method: opts.ap_method,
        k: ctx.k,
        rho: ctx.rho,
        split_id: ctx.split_id.clone(),
        seed: ctx.seed,
        config_hash: ctx.config_hash.clone(),
        images: detections.len(),
        checkpoint: ctx.checkpoint.clone(),
    }
}

#[cfg(test)]
mod tests;
