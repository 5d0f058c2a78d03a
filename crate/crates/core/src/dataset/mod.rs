//! Dataset catalog, base/novel splits, k-shot sampling, episodes and the
//! synthetic shapes generator.

mod episode;
mod formats;
mod sampler;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use episode::{active_classes, build_episode, crop_support, Episode, Phase, SupportImage, SupportPool, SupportRef};
pub use formats::{
    parse_annotations, read_index, read_manifest, write_index, write_manifest, AnnotationFormat, Manifest,
    ManifestHeader, ParseOutcome, NWPU_CLASSES,
};
pub use sampler::{sample_finetune_set, sample_finetune_set_with, FinetuneSet, MaskingPolicy, Proportion, ShotBudget};
pub use split::{make_split, ClassSplit, SplitSpec};
pub use synthetic::{generate_synthetic_dataset, render_synthetic_image, ShapeKind, SyntheticConfig, SyntheticImage};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageDims};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationId(pub u32);

macro_rules! display_id {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    )*};
}
display_id!(ClassId, ImageId, AnnotationId);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    /// Relative to the index root.
    pub path: PathBuf,
    pub dims: ImageDims,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: AnnotationId,
    pub image: ImageId,
    pub class: ClassId,
    pub bbox: BBox,
}

/// Immutable catalog of images and their annotations.
///
/// Annotation ids are assigned densely in image-id order, then in the order
/// the objects were listed for the image.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    classes: Vec<ClassInfo>,
    images: Vec<ImageRecord>,
    annotations: Vec<Annotation>,
    by_image: BTreeMap<ImageId, Vec<AnnotationId>>,
    class_counts: BTreeMap<ClassId, usize>,
}

impl DatasetIndex {
    pub fn new(
        root: impl Into<PathBuf>,
        mut classes: Vec<ClassInfo>,
        mut images: Vec<(ImageRecord, Vec<(ClassId, BBox)>)>,
    ) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Dataset(format!("duplicate class id {}", pair[0].id)));
            }
        }
        if classes.is_empty() {
            return Err(Error::Dataset("empty class list".into()));
        }
        images.sort_by_key(|(r, _)| r.id);
        for pair in images.windows(2) {
            if pair[0].0.id == pair[1].0.id {
                return Err(Error::Dataset(format!("duplicate image id {}", pair[0].0.id)));
            }
        }
        let mut annotations = Vec::new();
        let mut by_image = BTreeMap::new();
        let mut class_counts: BTreeMap<ClassId, usize> = classes.iter().map(|c| (c.id, 0)).collect();
        let mut records = Vec::with_capacity(images.len());
        for (record, objects) in images {
            let mut ids = Vec::with_capacity(objects.len());
            for (class, bbox) in objects {
                bbox.validate()?;
                if !bbox.within(record.dims) {
                    return Err(Error::Dataset(format!(
                        "image {}: box {bbox} outside {}x{}",
                        record.id, record.dims.width, record.dims.height
                    )));
                }
                let count = class_counts
                    .get_mut(&class)
                    .ok_or_else(|| Error::Dataset(format!("image {}: unknown class {class}", record.id)))?;
                *count += 1;
                let id = AnnotationId(annotations.len() as u32);
                annotations.push(Annotation {
                    id,
                    image: record.id,
                    class,
                    bbox,
                });
                ids.push(id);
            }
            by_image.insert(record.id, ids);
            records.push(record);
        }
        Ok(DatasetIndex {
            root: root.into(),
            classes,
            images: records,
            annotations,
            by_image,
            class_counts,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn class_name(&self, id: ClassId) -> String {
        self.class(id).map(|c| c.name.clone()).unwrap_or_else(|| id.to_string())
    }

    /// Looks a class up by name, or by numeric id when `token` is a number.
    pub fn resolve_class(&self, token: &str) -> Option<ClassId> {
        let token = token.trim();
        self.classes
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(token))
            .map(|c| c.id)
            .or_else(|| {
                token
                    .parse::<u32>()
                    .ok()
                    .map(ClassId)
                    .filter(|id| self.class(*id).is_some())
            })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn annotation(&self, id: AnnotationId) -> Option<&Annotation> {
        self.annotations.get(id.0 as usize)
    }

    pub fn annotations_of(&self, image: ImageId) -> impl Iterator<Item = &Annotation> + '_ {
        self.by_image
            .get(&image)
            .into_iter()
            .flatten()
            .map(move |id| &self.annotations[id.0 as usize])
    }

    pub fn class_count(&self, class: ClassId) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn image_path(&self, id: ImageId) -> Option<PathBuf> {
        self.image(id).map(|r| self.root.join(&r.path))
    }

    pub fn load_image(&self, id: ImageId) -> Result<Raster> {
        let path = self
            .image_path(id)
            .ok_or_else(|| Error::Dataset(format!("unknown image {id}")))?;
        Raster::load(&path)
    }
}
