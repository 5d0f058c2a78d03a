use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClassId, DatasetIndex, ImageId};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    base: BTreeSet<ClassId>,
    novel: BTreeSet<ClassId>,
}

impl ClassSplit {
    /// Every class of `index` not listed as novel becomes a base class.
    pub fn from_novel(index: &DatasetIndex, novel: &BTreeSet<ClassId>) -> Result<Self> {
        let all: BTreeSet<ClassId> = index.class_ids().into_iter().collect();
        if novel.is_empty() {
            return Err(Error::Split("novel class set is empty".into()));
        }
        if let Some(c) = novel.iter().find(|c| !all.contains(c)) {
            return Err(Error::Split(format!("novel class {c} is not in the dataset")));
        }
        let base: BTreeSet<ClassId> = all.difference(novel).copied().collect();
        if base.is_empty() {
            return Err(Error::Split(
                "novel set covers every class; no base classes left".into(),
            ));
        }
        Ok(ClassSplit {
            base,
            novel: novel.clone(),
        })
    }

    pub fn base(&self) -> &BTreeSet<ClassId> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeSet<ClassId> {
        &self.novel
    }

    pub fn all(&self) -> BTreeSet<ClassId> {
        self.base.union(&self.novel).copied().collect()
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel.contains(&c)
    }
}

/// Base/novel class split plus a per-image train/test assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub classes: ClassSplit,
    pub train: BTreeSet<ImageId>,
    pub test: BTreeSet<ImageId>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Training images used by base training: at least one base object and
    /// no novel object.
    pub fn phase1_images(&self, index: &DatasetIndex) -> Vec<ImageId> {
        self.train
            .iter()
            .copied()
            .filter(|&id| {
                let mut anns = index.annotations_of(id).peekable();
                anns.peek().is_some() && index.annotations_of(id).all(|a| self.classes.base.contains(&a.class))
            })
            .collect()
    }

    pub fn test_images(&self) -> Vec<ImageId> {
        self.test.iter().copied().collect()
    }
}

/// Shuffles all images under `seed` and assigns the first
/// `round(train_fraction * n)` to training.
pub fn make_split(
    index: &DatasetIndex,
    novel: &BTreeSet<ClassId>,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    let classes = ClassSplit::from_novel(index, novel)?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut ids: Vec<ImageId> = index.images().iter().map(|r| r.id).collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    Ok(SplitSpec {
        classes,
        train: ids[..n_train].iter().copied().collect(),
        test: ids[n_train..].iter().copied().collect(),
        train_fraction,
        seed,
    })
}
