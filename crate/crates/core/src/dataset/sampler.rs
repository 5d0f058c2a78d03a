//! Exact k-shot selection of fine-tuning annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotationId, ClassId, DatasetIndex, ImageId, SplitSpec};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Base-to-novel annotation ratio used during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Proportion {
    /// `n` base annotations per class for every novel shot; `0` means novel only.
    Ratio(u32),
    /// Every base annotation of the training pool.
    All,
}

impl Proportion {
    /// The settings swept by the proportion ablation.
    pub const SWEEP: [Proportion; 6] = [
        Proportion::Ratio(0),
        Proportion::Ratio(1),
        Proportion::Ratio(2),
        Proportion::Ratio(3),
        Proportion::Ratio(5),
        Proportion::All,
    ];
}

impl fmt::Display for Proportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proportion::Ratio(n) => write!(f, "{n}"),
            Proportion::All => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Proportion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "all" | "∞" => Ok(Proportion::All),
            v => v
                .parse()
                .map(Proportion::Ratio)
                .map_err(|_| Error::Config(format!("invalid proportion {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotBudget {
    pub k: usize,
    pub proportion: Proportion,
}

impl ShotBudget {
    pub fn new(k: usize, proportion: Proportion) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(ShotBudget { k, proportion })
    }

    /// Active annotations required for a base class; `None` means all.
    pub fn base_target(&self) -> Option<usize> {
        match self.proportion {
            Proportion::Ratio(n) => Some(n as usize * self.k),
            Proportion::All => None,
        }
    }
}

/// Whether surplus objects in a selected image may be masked out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingPolicy {
    #[default]
    Allow,
    Forbid,
}

/// Images and annotations selected for fine-tuning. Annotations of selected
/// images that are not active are masked: ignored by losses and matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSet {
    pub images: Vec<ImageId>,
    pub active: BTreeSet<AnnotationId>,
    pub masked: BTreeSet<AnnotationId>,
    pub counts: BTreeMap<ClassId, usize>,
    pub budget: ShotBudget,
    pub seed: u64,
}

impl FinetuneSet {
    pub fn is_active(&self, a: AnnotationId) -> bool {
        self.active.contains(&a)
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn active_of_class(&self, index: &DatasetIndex, class: ClassId) -> Vec<AnnotationId> {
        self.active
            .iter()
            .copied()
            .filter(|a| index.annotation(*a).is_some_and(|a| a.class == class))
            .collect()
    }
}

pub fn sample_finetune_set(
    index: &DatasetIndex,
    split: &SplitSpec,
    budget: ShotBudget,
    seed: u64,
) -> Result<FinetuneSet> {
    sample_finetune_set_with(index, split, budget, MaskingPolicy::Allow, seed)
}

/// Selects training images so that exactly `k` novel and `rho * k` base
/// annotations per class are active.
///
/// With [`MaskingPolicy::Allow`] images are taken greedily in seeded order
/// (images holding novel objects first) and surplus objects are masked. With
/// [`MaskingPolicy::Forbid`] every object of a selected image counts, so an
/// exact subset of images must exist; classes whose images all carry more
/// objects than the budget are reported as infeasible.
pub fn sample_finetune_set_with(
    index: &DatasetIndex,
    split: &SplitSpec,
    budget: ShotBudget,
    policy: MaskingPolicy,
    seed: u64,
) -> Result<FinetuneSet> {
    if budget.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut pool: Vec<ImageId> = split.train.iter().copied().collect();
    pool.shuffle(&mut rng_for(seed, "finetune-sample"));

    let classes: Vec<ClassId> = split.classes.all().into_iter().collect();
    let mut available: BTreeMap<ClassId, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for id in &pool {
        for a in index.annotations_of(*id) {
            if let Some(n) = available.get_mut(&a.class) {
                *n += 1;
            }
        }
    }
    let mut targets = BTreeMap::new();
    for &c in &classes {
        let want = if split.classes.is_novel(c) {
            budget.k
        } else {
            budget.base_target().unwrap_or(available[&c])
        };
        if available[&c] < want {
            return Err(infeasible(
                index,
                c,
                format!("needs {want} annotations, training pool holds {}", available[&c]),
            ));
        }
        targets.insert(c, want);
    }

    let (images, active) = match policy {
        MaskingPolicy::Allow => greedy_with_masking(index, split, &pool, &targets),
        MaskingPolicy::Forbid => exact_subset(index, &pool, &targets)?,
    };

    let mut masked = BTreeSet::new();
    let mut counts: BTreeMap<ClassId, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for id in &images {
        for a in index.annotations_of(*id) {
            if active.contains(&a.id) {
                *counts.entry(a.class).or_default() += 1;
            } else {
                masked.insert(a.id);
            }
        }
    }
    let mut images = images;
    images.sort();
    Ok(FinetuneSet {
        images,
        active,
        masked,
        counts,
        budget,
        seed,
    })
}

fn infeasible(index: &DatasetIndex, class: ClassId, reason: String) -> Error {
    Error::Infeasible {
        class,
        name: index.class_name(class),
        reason,
    }
}

fn greedy_with_masking(
    index: &DatasetIndex,
    split: &SplitSpec,
    pool: &[ImageId],
    targets: &BTreeMap<ClassId, usize>,
) -> (Vec<ImageId>, BTreeSet<AnnotationId>) {
    let mut need = targets.clone();
    let mut chosen = BTreeSet::new();
    let mut active = BTreeSet::new();
    let holds_novel = |id: &ImageId| index.annotations_of(*id).any(|a| split.classes.is_novel(a.class));
    let ordered = pool
        .iter()
        .filter(|id| holds_novel(id))
        .chain(pool.iter().filter(|id| !holds_novel(id)));
    for &id in ordered {
        if need.values().all(|&n| n == 0) {
            break;
        }
        let mut picked = Vec::new();
        for a in index.annotations_of(id) {
            if let Some(n) = need.get_mut(&a.class) {
                if *n > 0 {
                    *n -= 1;
                    picked.push(a.id);
                }
            }
        }
        if !picked.is_empty() {
            chosen.insert(id);
            active.extend(picked);
        }
    }
    (chosen.into_iter().collect(), active)
}

const SEARCH_LIMIT: usize = 2_000_000;

fn exact_subset(
    index: &DatasetIndex,
    pool: &[ImageId],
    targets: &BTreeMap<ClassId, usize>,
) -> Result<(Vec<ImageId>, BTreeSet<AnnotationId>)> {
    let classes: Vec<ClassId> = targets.keys().copied().collect();
    let target: Vec<usize> = classes.iter().map(|c| targets[c]).collect();
    let counts_of = |id: ImageId| -> Vec<usize> {
        let mut v = vec![0; classes.len()];
        for a in index.annotations_of(id) {
            if let Ok(i) = classes.binary_search(&a.class) {
                v[i] += 1;
            }
        }
        v
    };
    // Images that could ever be part of an exact selection.
    let candidates: Vec<(ImageId, Vec<usize>)> = pool
        .iter()
        .map(|&id| (id, counts_of(id)))
        .filter(|(_, c)| c.iter().any(|&n| n > 0) && c.iter().zip(&target).all(|(n, t)| n <= t))
        .collect();
    for (ci, &class) in classes.iter().enumerate() {
        let reachable: usize = candidates.iter().map(|(_, c)| c[ci]).sum();
        if reachable < target[ci] {
            let dense = pool.iter().any(|&id| counts_of(id)[ci] > target[ci]);
            let reason = if dense {
                format!(
                    "images holding this class carry more than {} objects and masking is not allowed",
                    target[ci]
                )
            } else {
                format!(
                    "only {reachable} of {} annotations can be selected without masking",
                    target[ci]
                )
            };
            return Err(infeasible(index, class, reason));
        }
    }

    // suffix[i][c]: objects of class c available in candidates[i..]
    let mut suffix = vec![vec![0usize; classes.len()]; candidates.len() + 1];
    for i in (0..candidates.len()).rev() {
        let (head, tail) = suffix.split_at_mut(i + 1);
        for ((s, next), n) in head[i].iter_mut().zip(&tail[0]).zip(&candidates[i].1) {
            *s = next + n;
        }
    }
    let mut state = Search {
        candidates: &candidates,
        suffix: &suffix,
        target: &target,
        picked: Vec::new(),
        nodes: 0,
        best_deficit: (usize::MAX, 0),
    };
    let mut sums = vec![0; classes.len()];
    if state.dfs(0, &mut sums) {
        let images: Vec<ImageId> = state.picked.iter().map(|&i| candidates[i].0).collect();
        let active = images
            .iter()
            .flat_map(|&id| index.annotations_of(id).map(|a| a.id))
            .collect();
        return Ok((images, active));
    }
    let class = classes[state.best_deficit.1];
    Err(infeasible(
        index,
        class,
        "no combination of whole images reaches the exact budget without masking".into(),
    ))
}

struct Search<'a> {
    candidates: &'a [(ImageId, Vec<usize>)],
    suffix: &'a [Vec<usize>],
    target: &'a [usize],
    picked: Vec<usize>,
    nodes: usize,
    best_deficit: (usize, usize),
}

impl Search<'_> {
    fn dfs(&mut self, i: usize, sums: &mut [usize]) -> bool {
        self.nodes += 1;
        if sums.iter().zip(self.target).all(|(s, t)| s == t) {
            return true;
        }
        let deficit: usize = sums.iter().zip(self.target).map(|(s, t)| t - s).sum();
        if deficit < self.best_deficit.0 {
            let worst = (0..sums.len()).max_by_key(|&c| self.target[c] - sums[c]).unwrap_or(0);
            self.best_deficit = (deficit, worst);
        }
        if i == self.candidates.len() || self.nodes > SEARCH_LIMIT {
            return false;
        }
        if (0..sums.len()).any(|c| sums[c] + self.suffix[i][c] < self.target[c]) {
            return false;
        }
        let counts = &self.candidates[i].1;
        if counts
            .iter()
            .zip(sums.iter())
            .zip(self.target)
            .all(|((n, s), t)| s + n <= *t)
        {
            for (s, n) in sums.iter_mut().zip(counts) {
                *s += n;
            }
            self.picked.push(i);
            if self.dfs(i + 1, sums) {
                return true;
            }
            self.picked.pop();
            for (s, n) in sums.iter_mut().zip(counts) {
                *s -= n;
            }
        }
        self.dfs(i + 1, sums)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_split;
    use crate::dataset::testutil::grid_index;

    fn split_all_train(idx: &DatasetIndex, novel: u32) -> SplitSpec {
        let mut s = make_split(idx, &BTreeSet::from([ClassId(novel)]), 0.5, 0).unwrap();
        s.train = idx.images().iter().map(|r| r.id).collect();
        s.test.clear();
        s
    }

    #[test]
    fn one_shot_one_object_per_image() {
        let layout: Vec<_> = (0..12).map(|i| vec![(i % 3 + 1, 1)]).collect();
        let idx = grid_index(3, &layout);
        let split = split_all_train(&idx, 3);
        let set = sample_finetune_set(&idx, &split, ShotBudget::new(1, Proportion::Ratio(1)).unwrap(), 5).unwrap();
        assert_eq!(set.images.len(), 3);
        assert!(set.counts.values().all(|&n| n == 1));
        assert!(set.masked.is_empty());
    }

    #[test]
    fn surplus_is_masked() {
        let idx = grid_index(2, &[vec![(1, 4), (2, 3)], vec![(2, 1)]]);
        let split = split_all_train(&idx, 2);
        let set = sample_finetune_set(&idx, &split, ShotBudget::new(2, Proportion::Ratio(1)).unwrap(), 1).unwrap();
        assert_eq!(set.count(ClassId(1)), 2);
        assert_eq!(set.count(ClassId(2)), 2);
        let selected: usize = set.images.iter().map(|&i| idx.annotations_of(i).count()).sum();
        assert_eq!(set.active.len() + set.masked.len(), selected);
    }

    #[test]
    fn proportion_zero_and_all() {
        let layout: Vec<_> = (0..20).map(|i| vec![(1, 1), (2, (i % 2) as usize)]).collect();
        let idx = grid_index(2, &layout);
        let split = split_all_train(&idx, 2);
        let zero = sample_finetune_set(&idx, &split, ShotBudget::new(3, Proportion::Ratio(0)).unwrap(), 0).unwrap();
        assert_eq!(zero.count(ClassId(1)), 0);
        assert_eq!(zero.count(ClassId(2)), 3);
        let all = sample_finetune_set(&idx, &split, ShotBudget::new(3, Proportion::All).unwrap(), 0).unwrap();
        assert_eq!(all.count(ClassId(1)), 20);
        assert_eq!(all.count(ClassId(2)), 3);
    }

    #[test]
    fn not_enough_annotations_names_the_class() {
        let idx = grid_index(2, &[vec![(1, 1)], vec![(2, 1)]]);
        let split = split_all_train(&idx, 2);
        let err = sample_finetune_set(&idx, &split, ShotBudget::new(2, Proportion::Ratio(1)).unwrap(), 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible { class: ClassId(1), .. }), "{err}");
    }

    #[test]
    fn dense_class_without_masking_is_infeasible() {
        let mut layout: Vec<_> = (0..10).map(|_| vec![(1, 1)]).collect();
        layout.extend((0..10).map(|_| vec![(2, 1)]));
        layout.extend((0..4).map(|_| vec![(3, 12)]));
        let idx = grid_index(3, &layout);
        let split = split_all_train(&idx, 2);
        let budget = ShotBudget::new(10, Proportion::Ratio(1)).unwrap();
        let err = sample_finetune_set_with(&idx, &split, budget, MaskingPolicy::Forbid, 0).unwrap_err();
        match err {
            Error::Infeasible { class, .. } => assert_eq!(class, ClassId(3)),
            e => panic!("unexpected {e}"),
        }
        // masking makes it feasible
        let ok = sample_finetune_set(&idx, &split, budget, 0).unwrap();
        assert_eq!(ok.count(ClassId(3)), 10);
    }

    #[test]
    fn exact_subset_without_masking() {
        let idx = grid_index(
            2,
            &[
                vec![(1, 2), (2, 1)],
                vec![(1, 1)],
                vec![(1, 3)],
                vec![(2, 1)],
                vec![(1, 1), (2, 1)],
            ],
        );
        let split = split_all_train(&idx, 2);
        let budget = ShotBudget::new(2, Proportion::Ratio(2)).unwrap();
        let set = sample_finetune_set_with(&idx, &split, budget, MaskingPolicy::Forbid, 9).unwrap();
        assert_eq!(set.count(ClassId(1)), 4);
        assert_eq!(set.count(ClassId(2)), 2);
        assert!(set.masked.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let layout: Vec<_> = (0..30).map(|i| vec![(i % 2 + 1, 1 + (i % 3) as usize)]).collect();
        let idx = grid_index(2, &layout);
        let split = split_all_train(&idx, 2);
        let b = ShotBudget::new(3, Proportion::Ratio(2)).unwrap();
        assert_eq!(
            sample_finetune_set(&idx, &split, b, 4).unwrap(),
            sample_finetune_set(&idx, &split, b, 4).unwrap()
        );
    }

    #[test]
    fn proportion_parsing() {
        assert_eq!("inf".parse::<Proportion>().unwrap(), Proportion::All);
        assert_eq!("∞".parse::<Proportion>().unwrap(), Proportion::All);
        assert_eq!("3".parse::<Proportion>().unwrap(), Proportion::Ratio(3));
        assert!("x".parse::<Proportion>().is_err());
    }
}
