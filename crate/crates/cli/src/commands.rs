use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use fsdet::dataset::{
    crop_support, make_split, parse_annotations, read_index, read_manifest, sample_finetune_set_with, write_index,
    write_manifest, ClassId, ClassSplit, DatasetIndex, FinetuneSet, ImageRecord, Manifest, ManifestHeader, Phase,
    Proportion, ShotBudget, SplitSpec, SupportPool, SyntheticConfig,
};
use fsdet::evaluation::{
    eval_supports, evaluate, read_reports, render_report, run_experiment_grid, write_csv, write_reports, CellResult,
    CellSpec, EvalContext, GridSpec, ImageDetections, Method, Pipeline, PipelineConfig,
};
use fsdet::io::write_atomic;
use fsdet::model::FewShotModel;
use fsdet::raster::Interpolation;
use fsdet::rng::derive_seed;
use fsdet::saan::Fusion;
use fsdet::training::{finetune_novel, hash_json, train_base, train_baseline, BaselineMode, TrainLog};
use fsdet::Error;

use crate::config::RunConfig;
use crate::GridKind;

/// File layout under the output root.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: &RunConfig) -> Self {
        Workspace { root: cfg.out_root() }
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.tsv")
    }

    pub fn manifest(&self, kind: &str) -> PathBuf {
        self.root.join(format!("{kind}.tsv"))
    }

    pub fn checkpoint(&self, phase: Phase, fusion: Fusion) -> PathBuf {
        self.root.join(format!("{phase}-{fusion}.ckpt"))
    }
}

/// A prepared dataset: index, split and the two fine-tuning sets.
#[derive(Debug)]
pub struct Prepared {
    pub index: DatasetIndex,
    pub split: SplitSpec,
    pub finetune: FinetuneSet,
    /// `k` novel shots plus every base annotation, for the joint baseline.
    pub joint: FinetuneSet,
}

fn split_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "split")
}

fn sample_seed(cfg: &RunConfig, budget: ShotBudget) -> u64 {
    derive_seed(cfg.seed, &format!("finetune/k{}/rho{}", budget.k, budget.proportion))
}

/// Parses the configured dataset and rewrites image paths as absolute, so
/// the index can live anywhere.
pub fn load_source_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset root: pass --data or set data.root".into()))?;
    let outcome = parse_annotations(root, cfg.data.format, cfg.data.classes.as_deref())?;
    for e in &outcome.errors {
        log::warn!("skipped record: {e}");
    }
    if !outcome.errors.is_empty() {
        log::warn!("{} malformed records skipped", outcome.errors.len());
    }
    absolutise(&outcome.index)
}

fn absolutise(index: &DatasetIndex) -> Result<DatasetIndex> {
    let given = match index.root() {
        r if r.as_os_str().is_empty() => Path::new("."),
        r => r,
    };
    let root = fs::canonicalize(given).map_err(|e| Error::Io {
        path: given.to_path_buf(),
        source: e,
    })?;
    let images = index
        .images()
        .iter()
        .map(|r| {
            let record = ImageRecord {
                path: root.join(&r.path),
                ..r.clone()
            };
            (record, index.annotations_of(r.id).map(|a| (a.class, a.bbox)).collect())
        })
        .collect();
    Ok(DatasetIndex::new(root, index.classes().to_vec(), images)?)
}

fn resolve_novel(index: &DatasetIndex, tokens: &[String]) -> Result<Vec<ClassId>, Error> {
    let mut out = BTreeSet::new();
    for t in tokens {
        let id = index
            .resolve_class(t)
            .ok_or_else(|| Error::Config(format!("unknown class {t:?}")))?;
        out.insert(id);
    }
    Ok(out.into_iter().collect())
}

fn header(cfg: &RunConfig, kind: &str, seed: u64, novel: &[ClassId]) -> ManifestHeader {
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), cfg.hash());
    extra.insert("root_seed".to_string(), cfg.seed.to_string());
    ManifestHeader {
        kind: kind.to_string(),
        seed,
        novel: novel.to_vec(),
        extra,
        ..ManifestHeader::default()
    }
}

fn write_set(ws: &Workspace, kind: &str, cfg: &RunConfig, prepared: &Prepared, set: &FinetuneSet) -> Result<()> {
    let novel: Vec<ClassId> = prepared.split.classes.novel().iter().copied().collect();
    let h = ManifestHeader {
        k: Some(set.budget.k),
        rho: Some(set.budget.proportion),
        phase: Some(if kind == "joint" { Phase::Joint } else { Phase::Finetune }),
        ..header(cfg, kind, set.seed, &novel)
    };
    write_manifest(&ws.manifest(kind), &prepared.index, &h, &set.images, &set.masked)?;
    Ok(())
}

/// Index, split and sampled sets for `cfg`, computed from the source data.
pub fn build_prepared(cfg: &RunConfig, index: DatasetIndex) -> Result<Prepared> {
    let novel: BTreeSet<ClassId> = resolve_novel(&index, &cfg.data.novel)?.into_iter().collect();
    if novel.is_empty() {
        return Err(Error::Config("no novel class: pass --novel or set data.novel".into()).into());
    }
    let split = make_split(&index, &novel, cfg.data.train_fraction, split_seed(cfg))?;
    let sample = |budget: ShotBudget| {
        sample_finetune_set_with(&index, &split, budget, cfg.data.masking, sample_seed(cfg, budget))
    };
    let budget = cfg.shot_budget()?;
    let finetune = sample(budget)?;
    let joint = sample(ShotBudget::new(budget.k, Proportion::All)?)?;
    Ok(Prepared {
        index,
        split,
        finetune,
        joint,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(cfg);
    let index = load_source_index(cfg)?;
    let p = build_prepared(cfg, index)?;
    let novel: Vec<ClassId> = p.split.classes.novel().iter().copied().collect();

    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), cfg.hash());
    extra.insert("seed".to_string(), cfg.seed.to_string());
    write_index(&p.index, &ws.index(), &extra)?;
    for (kind, images) in [("train", &p.split.train), ("test", &p.split.test)] {
        let mut h = header(cfg, kind, p.split.seed, &novel);
        h.extra
            .insert("train_fraction".to_string(), p.split.train_fraction.to_string());
        let ids: Vec<_> = images.iter().copied().collect();
        write_manifest(&ws.manifest(kind), &p.index, &h, &ids, &BTreeSet::new())?;
    }
    write_set(&ws, "finetune", cfg, &p, &p.finetune)?;
    write_set(&ws, "joint", cfg, &p, &p.joint)?;
    write_atomic(&ws.root.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    println!(
        "{} images, {} annotations; train {} / test {} images",
        p.index.images().len(),
        p.index.annotations().len(),
        p.split.train.len(),
        p.split.test.len()
    );
    println!(
        "fine-tuning set k={} rho={}: {} images",
        p.finetune.budget.k,
        p.finetune.budget.proportion,
        p.finetune.images.len()
    );
    for (class, n) in &p.finetune.counts {
        let role = if p.split.classes.is_novel(*class) {
            "novel"
        } else {
            "base"
        };
        println!("  {:<24} {role:<5} {n}", p.index.class_name(*class));
    }
    println!("wrote {}", ws.root.display());
    Ok(())
}

fn set_from_manifest(index: &DatasetIndex, split: &SplitSpec, m: Manifest) -> Result<FinetuneSet> {
    let bad = |f: &str| Error::Dataset(format!("{} manifest lacks {f}", m.header.kind));
    let k = m.header.k.ok_or_else(|| bad("k"))?;
    let rho = m.header.rho.ok_or_else(|| bad("rho"))?;
    let mut counts: BTreeMap<ClassId, usize> = split.classes.all().into_iter().map(|c| (c, 0)).collect();
    let mut active = BTreeSet::new();
    for id in &m.images {
        for a in index.annotations_of(*id) {
            if !m.masked.contains(&a.id) {
                active.insert(a.id);
                *counts.entry(a.class).or_default() += 1;
            }
        }
    }
    Ok(FinetuneSet {
        images: m.images,
        active,
        masked: m.masked,
        counts,
        budget: ShotBudget::new(k, rho)?,
        seed: m.header.seed,
    })
}

/// Reads what `prepare` wrote under the output root.
pub fn load_prepared(ws: &Workspace) -> Result<Prepared> {
    let path = ws.index();
    if !path.exists() {
        return Err(Error::Dataset(format!(
            "no prepared dataset at {}; run `fsdet prepare` first",
            ws.root.display()
        ))
        .into());
    }
    let index = read_index(&path)?;
    let train = read_manifest(&ws.manifest("train"), &index)?;
    let test = read_manifest(&ws.manifest("test"), &index)?;
    let novel: BTreeSet<ClassId> = train.header.novel.iter().copied().collect();
    let train_fraction = train
        .header
        .extra
        .get("train_fraction")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Dataset("train manifest lacks train_fraction".into()))?;
    let split = SplitSpec {
        classes: ClassSplit::from_novel(&index, &novel)?,
        train: train.images.into_iter().collect(),
        test: test.images.into_iter().collect(),
        train_fraction,
        seed: train.header.seed,
    };
    let finetune = set_from_manifest(&index, &split, read_manifest(&ws.manifest("finetune"), &index)?)?;
    let joint = set_from_manifest(&index, &split, read_manifest(&ws.manifest("joint"), &index)?)?;
    Ok(Prepared {
        index,
        split,
        finetune,
        joint,
    })
}

#[derive(Serialize)]
struct RunHeader<'a> {
    config_hash: &'a str,
    seed: u64,
    phase: Phase,
    fusion: Fusion,
}

/// JSON lines: a header object, then one record per step.
fn write_jsonl<T: Serialize>(path: &Path, header: &RunHeader<'_>, rows: &[T]) -> Result<()> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, phase: Phase, base_checkpoint: Option<PathBuf>) -> Result<()> {
    let ws = Workspace::new(cfg);
    let p = load_prepared(&ws)?;
    let fusion = cfg.model.fusion;
    let hash = cfg.hash();
    let novel: Vec<ClassId> = p.split.classes.novel().iter().copied().collect();
    let (model, log): (FewShotModel, TrainLog) = match phase {
        Phase::Base => train_base(&p.index, &p.split, cfg.detector(), &cfg.train_config(Phase::Base)?)?,
        Phase::Finetune => {
            let path = base_checkpoint.unwrap_or_else(|| ws.checkpoint(Phase::Base, fusion));
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "base checkpoint {} not found; run `fsdet train --phase base` first",
                    path.display()
                ))
                .into());
            }
            let (base, meta) = FewShotModel::load(&path)?;
            if meta.fusion != fusion {
                return Err(Error::Config(format!(
                    "base checkpoint uses fusion {}, but fine-tuning asks for {fusion}",
                    meta.fusion
                ))
                .into());
            }
            if meta.novel != novel.iter().map(|c| c.0).collect::<Vec<_>>() {
                return Err(Error::Config("base checkpoint was trained for another novel split".into()).into());
            }
            finetune_novel(
                base,
                &p.index,
                &p.split,
                &p.finetune,
                &cfg.train_config(Phase::Finetune)?,
            )?
        }
        Phase::Joint => {
            if fusion != Fusion::None {
                return Err(
                    Error::Config("joint training is the plain-detector baseline; use --fusion none".into()).into(),
                );
            }
            train_baseline(
                &p.index,
                &p.split,
                &p.joint,
                BaselineMode::Joint,
                cfg.detector(),
                &cfg.train_config(Phase::Base)?,
                &cfg.train_config(Phase::Finetune)?,
            )?
        }
    };
    let path = ws.checkpoint(phase, fusion);
    model.save(&path, &model.meta(phase, &novel, &hash, cfg.seed, log.losses.len()))?;
    let h = RunHeader {
        config_hash: &hash,
        seed: cfg.seed,
        phase,
        fusion,
    };
    write_jsonl(&ws.root.join(format!("{phase}-{fusion}.losses.jsonl")), &h, &log.losses)?;
    write_jsonl(
        &ws.root.join(format!("{phase}-{fusion}.episodes.jsonl")),
        &h,
        &log.episodes,
    )?;
    if let (Some(first), Some(last)) = (log.losses.first(), log.losses.last()) {
        println!(
            "{phase} ({fusion}): {} steps, loss {:.4} -> {:.4}",
            log.losses.len(),
            first.total,
            last.total
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn method_of(phase: Phase, fusion: Fusion) -> Option<Method> {
    match (phase, fusion) {
        (Phase::Base, _) => None,
        (Phase::Joint, _) => Some(Method::FrcnJoint),
        (Phase::Finetune, Fusion::Gru) => Some(Method::Saan),
        (Phase::Finetune, Fusion::Xcorr) => Some(Method::Xcorr),
        (Phase::Finetune, Fusion::None) => Some(Method::FrcnFt),
    }
}

fn print_cells(cells: &[CellResult], index: &DatasetIndex) {
    for c in cells {
        let novel: Vec<String> = c.cell.novel.iter().map(|id| index.class_name(*id)).collect();
        let what = format!(
            "{} novel={} k={} rho={}",
            c.cell.method,
            novel.join("+"),
            c.cell.k,
            c.cell.rho
        );
        match (&c.report, &c.error) {
            (Some(r), _) => {
                let ap = r
                    .novel_ap()
                    .map(|v| format!("{:.2}", v * 100.0))
                    .unwrap_or_else(|| "-".into());
                println!("{what}: novel AP {ap}");
            }
            (None, Some(e)) => println!("{what}: failed: {e}"),
            (None, None) => println!("{what}: no result"),
        }
    }
}

pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: Option<PathBuf>, render: bool) -> Result<()> {
    let ws = Workspace::new(cfg);
    let p = load_prepared(&ws)?;
    let path = checkpoint.unwrap_or_else(|| ws.checkpoint(Phase::Finetune, cfg.model.fusion));
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", path.display())).into());
    }
    let (model, meta) = FewShotModel::load(&path)?;
    let opts = cfg.eval_options();
    let (pool, k, rho) = match meta.phase {
        Phase::Base => (SupportPool::phase1(&p.index, &p.split), None, None),
        Phase::Finetune => (
            SupportPool::finetune(&p.index, &p.split, &p.finetune),
            Some(p.finetune.budget.k),
            Some(p.finetune.budget.proportion),
        ),
        Phase::Joint => (
            SupportPool::finetune(&p.index, &p.split, &p.joint),
            Some(p.joint.budget.k),
            Some(Proportion::All),
        ),
    };
    let supports = if model.fusion.uses_supports() {
        let shots = k.unwrap_or(cfg.budget.k);
        eval_supports(
            &p.index,
            &pool,
            &model.class_ids(),
            shots,
            opts.support_side,
            Interpolation::Bilinear,
        )?
    } else {
        Vec::new()
    };
    let method = method_of(meta.phase, meta.fusion);
    let novel: Vec<ClassId> = p.split.classes.novel().iter().copied().collect();
    let names: Vec<String> = novel.iter().map(|c| p.index.class_name(*c)).collect();
    let ctx = EvalContext {
        method: method
            .map(|m| m.to_string())
            .unwrap_or_else(|| format!("base-{}", meta.fusion)),
        novel: p.split.classes.novel().clone(),
        k,
        rho,
        split_id: format!("novel={};seed={}", names.join("+"), p.split.seed),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        checkpoint: Some(meta.clone()),
        masked: BTreeSet::new(),
    };
    let (report, detections) = evaluate(&model, &p.index, &p.split.test_images(), &supports, &ctx, &opts)?;

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let dir = ws.root.join("eval").join(stem);
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;
    write_atomic(&dir.join("detections.json"), &serde_json::to_vec(&detections)?)?;
    let cells: Vec<CellResult> = method
        .map(|m| CellResult {
            cell: CellSpec {
                method: m,
                novel,
                k: k.unwrap_or(cfg.budget.k),
                rho: rho.unwrap_or(Proportion::All),
            },
            report: Some(report.clone()),
            error: None,
        })
        .into_iter()
        .collect();
    if !cells.is_empty() {
        write_reports(&dir.join("reports.json"), &cells)?;
        write_csv(&dir.join("results.csv"), &cells, &p.index)?;
    }
    if render {
        let written = render_report(&cells, &detections, Some(&p.index), &dir.join("figures"))?;
        println!("rendered {} figures", written.len());
    }
    for c in &report.classes {
        let ap = c.ap.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into());
        let role = if c.novel { "novel" } else { "base" };
        println!("{:<24} {role:<5} AP {ap:>6}  ({} gt)", c.name, c.num_gt);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn eval_grid(cfg: &RunConfig, kind: GridKind, shots: &[usize], methods: &[Method], render: bool) -> Result<()> {
    let ws = Workspace::new(cfg);
    let index = if ws.index().exists() {
        read_index(&ws.index())?
    } else {
        load_source_index(cfg)?
    };
    let novel = resolve_novel(&index, &cfg.data.novel)?;
    let (mut spec, name) = match kind {
        GridKind::Rsod => {
            let choices = if novel.is_empty() { index.class_ids() } else { novel };
            (GridSpec::one_novel_each(&choices, Method::ALL.to_vec()), "rsod")
        }
        GridKind::Proportion => {
            if novel.is_empty() {
                return Err(Error::Config("the proportion grid needs --novel".into()).into());
            }
            (GridSpec::proportion_sweep(novel), "proportion")
        }
    };
    if !shots.is_empty() {
        spec.shots = shots.to_vec();
    }
    if !methods.is_empty() {
        spec.methods = methods.to_vec();
    }
    let config = PipelineConfig {
        detector: cfg.detector(),
        base: cfg.train_config(Phase::Base)?,
        finetune: cfg.train_config(Phase::Finetune)?,
        eval: cfg.eval_options(),
        train_fraction: cfg.data.train_fraction,
        masking: cfg.data.masking,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    log::info!("grid {name}: {} cells", spec.cells().len());
    let mut pipeline = Pipeline::new(&index, config);
    let cells = run_experiment_grid(&spec, |cell| pipeline.run_cell(cell));

    let dir = ws.root.join(format!("grid-{name}"));
    write_reports(&dir.join("reports.json"), &cells)?;
    write_csv(&dir.join("results.csv"), &cells, &index)?;
    if render {
        render_report(&cells, &[], Some(&index), &dir.join("figures"))?;
    }
    print_cells(&cells, &index);
    println!("wrote {}", dir.display());
    if cells.iter().all(|c| c.report.is_none()) {
        return Err(Error::Evaluation("every grid cell failed".into()).into());
    }
    Ok(())
}

pub fn synth(config: &SyntheticConfig, dest: &Path) -> Result<()> {
    let index = fsdet::dataset::generate_synthetic_dataset(config, dest)?;
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), hash_json(config));
    extra.insert("generator".to_string(), "synthetic".to_string());
    extra.insert("seed".to_string(), config.seed.to_string());
    write_index(&index, &dest.join("index.tsv"), &extra)?;
    println!(
        "{} images, {} objects of {} classes",
        index.images().len(),
        index.annotations().len(),
        index.classes().len()
    );
    println!("wrote {}", dest.display());
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

pub fn crop_supports(cfg: &RunConfig, phase: Phase, per_class: Option<usize>, side: Option<usize>) -> Result<()> {
    let ws = Workspace::new(cfg);
    let p = load_prepared(&ws)?;
    let pool = match phase {
        Phase::Base => SupportPool::phase1(&p.index, &p.split),
        Phase::Finetune => SupportPool::finetune(&p.index, &p.split, &p.finetune),
        Phase::Joint => SupportPool::finetune(&p.index, &p.split, &p.joint),
    };
    let n = per_class.unwrap_or(p.finetune.budget.k);
    let side = side.unwrap_or(cfg.eval.support_side);
    let dir = ws.root.join("supports");
    let mut listing = format!(
        "#supports\tconfig_hash={}\tseed={}\tphase={phase}\tside={side}\n",
        cfg.hash(),
        cfg.seed
    );
    let mut cache = BTreeMap::new();
    for class in pool.classes() {
        let name = p.index.class_name(class);
        for &a in pool.of_class(class).iter().take(n) {
            let image = p
                .index
                .annotation(a)
                .map(|x| x.image)
                .context("annotation without image")?;
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(image) {
                slot.insert(p.index.load_image(image)?);
            }
            let crop = crop_support(&p.index, &cache[&image], a, side, Interpolation::Bilinear)?;
            let rel = PathBuf::from(file_stem(&name)).join(format!("{:05}.png", a.0));
            let out = dir.join(&rel);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            crop.raster.save_png(&out)?;
            listing.push_str(&format!("{}\t{}\t{}\t{}\n", rel.display(), class, a, image));
        }
    }
    write_atomic(&dir.join("supports.tsv"), listing.as_bytes())?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn report(cfg: &RunConfig, reports: &Path, detections: Option<&Path>, figures: Option<PathBuf>) -> Result<()> {
    let cells = read_reports(reports)?;
    let dets: Vec<ImageDetections> = match detections {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Vec::new(),
    };
    let ws = Workspace::new(cfg);
    let index = if ws.index().exists() {
        Some(read_index(&ws.index())?)
    } else {
        None
    };
    if index.is_none() && !dets.is_empty() {
        log::warn!("no prepared index under {}; overlays skipped", ws.root.display());
    }
    let dir = figures.unwrap_or_else(|| reports.parent().unwrap_or(Path::new(".")).join("figures"));
    let written = render_report(&cells, &dets, index.as_ref(), &dir)?;
    println!("rendered {} files into {}", written.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsdet::dataset::generate_synthetic_dataset;

    fn fixture(dir: &Path) -> RunConfig {
        let synth = SyntheticConfig {
            images: 30,
            image_size: 64,
            min_size: 12,
            max_size: 24,
            seed: 3,
            ..SyntheticConfig::default()
        };
        generate_synthetic_dataset(&synth, &dir.join("data")).unwrap();
        let mut cfg = RunConfig {
            seed: 5,
            out_dir: Some(dir.join("out")),
            ..RunConfig::default()
        };
        cfg.data.root = Some(dir.join("data"));
        cfg.data.novel = vec!["triangle".into()];
        cfg.budget.k = 2;
        cfg
    }

    #[test]
    fn prepared_manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        prepare(&cfg).unwrap();
        let fresh = build_prepared(&cfg, load_source_index(&cfg).unwrap()).unwrap();
        let back = load_prepared(&Workspace::new(&cfg)).unwrap();
        assert_eq!(back.split, fresh.split);
        assert_eq!(back.finetune, fresh.finetune);
        assert_eq!(back.joint, fresh.joint);
        assert_eq!(back.finetune.count(ClassId(3)), 2);
        assert_eq!(back.joint.budget.proportion, Proportion::All);
    }

    #[test]
    fn index_paths_are_absolute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let index = load_source_index(&cfg).unwrap();
        assert!(index.images().iter().all(|r| r.path.is_absolute()));
        index.load_image(index.images()[0].id).unwrap();
    }

    #[test]
    fn unknown_novel_class_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path());
        cfg.data.novel = vec!["hexagon-ish".into()];
        let err = build_prepared(&cfg, load_source_index(&cfg).unwrap()).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))));
    }

    #[test]
    fn methods_follow_phase_and_fusion() {
        assert_eq!(method_of(Phase::Finetune, Fusion::Gru), Some(Method::Saan));
        assert_eq!(method_of(Phase::Finetune, Fusion::None), Some(Method::FrcnFt));
        assert_eq!(method_of(Phase::Joint, Fusion::None), Some(Method::FrcnJoint));
        assert_eq!(method_of(Phase::Base, Fusion::Gru), None);
    }
}
