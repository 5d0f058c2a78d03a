use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AnnotationId, ClassId, DatasetIndex, FinetuneSet, ImageId, SplitSpec};
use crate::error::{Error, Result};
use crate::geometry::{extract_support_crop, square_pad_bbox};
use crate::raster::{Interpolation, Raster};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Finetune,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Finetune => "finetune",
            Phase::Joint => "joint",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(Phase::Base),
            "finetune" | "ft" => Ok(Phase::Finetune),
            "joint" => Ok(Phase::Joint),
            _ => Err(Error::Config(format!(
                "unknown phase {s:?} (expected base|finetune|joint)"
            ))),
        }
    }
}

/// Annotations eligible as support crops, grouped by class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportPool {
    by_class: BTreeMap<ClassId, Vec<AnnotationId>>,
}

impl SupportPool {
    pub fn from_annotations(index: &DatasetIndex, ids: impl IntoIterator<Item = AnnotationId>) -> Self {
        let mut by_class: BTreeMap<ClassId, Vec<AnnotationId>> = BTreeMap::new();
        for id in ids {
            if let Some(a) = index.annotation(id) {
                by_class.entry(a.class).or_default().push(id);
            }
        }
        for v in by_class.values_mut() {
            v.sort();
            v.dedup();
        }
        SupportPool { by_class }
    }

    /// Every annotation of the base-training images.
    pub fn phase1(index: &DatasetIndex, split: &SplitSpec) -> Self {
        let ids = split
            .phase1_images(index)
            .into_iter()
            .flat_map(|id| index.annotations_of(id).map(|a| a.id).collect::<Vec<_>>());
        Self::from_annotations(index, ids)
    }

    /// Active annotations of the fine-tuning set. A base class without any
    /// active annotation (proportion 0) falls back to its base-training pool
    /// so that every class still receives a support vector.
    pub fn finetune(index: &DatasetIndex, split: &SplitSpec, set: &FinetuneSet) -> Self {
        let mut pool = Self::from_annotations(index, set.active.iter().copied());
        let missing: BTreeSet<ClassId> = split
            .classes
            .base()
            .iter()
            .copied()
            .filter(|c| pool.len_of(*c) == 0)
            .collect();
        if !missing.is_empty() {
            let fallback = Self::phase1(index, split);
            for c in missing {
                if let Some(ids) = fallback.by_class.get(&c) {
                    pool.by_class.insert(c, ids.clone());
                }
            }
        }
        pool
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    pub fn of_class(&self, class: ClassId) -> &[AnnotationId] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len_of(&self, class: ClassId) -> usize {
        self.of_class(class).len()
    }

    pub fn annotations(&self) -> impl Iterator<Item = AnnotationId> + '_ {
        self.by_class.values().flatten().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub class: ClassId,
    pub annotation: AnnotationId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub query: ImageId,
    /// One entry per active class, in ascending class order.
    pub supports: Vec<SupportRef>,
    pub active_classes: Vec<ClassId>,
}

/// Classes a phase trains on.
pub fn active_classes(split: &SplitSpec, phase: Phase) -> Vec<ClassId> {
    match phase {
        Phase::Base => split.classes.base().iter().copied().collect(),
        Phase::Finetune | Phase::Joint => split.classes.all().into_iter().collect(),
    }
}

/// Pairs `query` with one support annotation per active class, drawn
/// uniformly from `pool`.
pub fn build_episode(
    split: &SplitSpec,
    phase: Phase,
    query: ImageId,
    pool: &SupportPool,
    seed: u64,
) -> Result<Episode> {
    let classes = active_classes(split, phase);
    let mut rng = rng_from_seed(seed);
    let mut supports = Vec::with_capacity(classes.len());
    for &class in &classes {
        let candidates = pool.of_class(class);
        if candidates.is_empty() {
            return Err(Error::EmptySupportPool(class));
        }
        let annotation = candidates[rng.gen_range(0..candidates.len())];
        supports.push(SupportRef { class, annotation });
    }
    Ok(Episode {
        query,
        supports,
        active_classes: classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportImage {
    pub raster: Raster,
    pub class: ClassId,
    pub annotation: AnnotationId,
}

/// Square-pads the annotation box, crops it from `image` and resizes to
/// `side x side`.
pub fn crop_support(
    index: &DatasetIndex,
    image: &Raster,
    annotation: AnnotationId,
    side: usize,
    interp: Interpolation,
) -> Result<SupportImage> {
    let ann = index
        .annotation(annotation)
        .ok_or_else(|| Error::Dataset(format!("unknown annotation {annotation}")))?;
    let dims = index
        .image(ann.image)
        .map(|r| r.dims)
        .ok_or_else(|| Error::Dataset(format!("unknown image {}", ann.image)))?;
    let window = square_pad_bbox(&ann.bbox, dims)?;
    Ok(SupportImage {
        raster: extract_support_crop(image, &window, side, interp)?,
        class: ann.class,
        annotation,
    })
}
