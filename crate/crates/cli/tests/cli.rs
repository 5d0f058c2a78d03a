use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsdet::dataset::{
    read_index, read_manifest, render_synthetic_image, write_index, ClassId, ClassInfo, DatasetIndex, ImageId,
    ImageRecord, SyntheticConfig,
};
use fsdet::geometry::{BBox, ImageDims};

fn fsdet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsdet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FSDET_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fsdet")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const RUN: &str = r#"
seed = 7
[data]
root = "data"
novel = ["triangle"]
[budget]
k = 3
rho = "1"
[base]
steps = 6
lr = 0.005
support_side = 48
[finetune]
steps = 4
support_side = 48
[eval]
support_side = 48
"#;

/// A 40-image synthetic dataset plus `run.toml` in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&fsdet(
        dir.path(),
        &["synth", "--images", "40", "--seed", "1", "--dest", "data"],
    ));
    fs::write(dir.path().join("run.toml"), RUN).unwrap();
    dir
}

fn prepared() -> tempfile::TempDir {
    let dir = workspace();
    ok(&fsdet(dir.path(), &["prepare", "--config", "run.toml", "--out", "out"]));
    dir
}

#[test]
fn synth_is_deterministic_and_boxes_pass_pixel_scan() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for (dest, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        ok(&fsdet(p, &["synth", "--images", "12", "--seed", seed, "--dest", dest]));
    }
    let a = fs::read(p.join("a/index.tsv")).unwrap();
    assert_eq!(a, fs::read(p.join("b/index.tsv")).unwrap());
    assert_ne!(a, fs::read(p.join("c/index.tsv")).unwrap());
    assert_eq!(
        fs::read(p.join("a/images/00005.png")).unwrap(),
        fs::read(p.join("b/images/00005.png")).unwrap()
    );

    let cfg = SyntheticConfig {
        images: 12,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let index = read_index(&p.join("a/index.tsv")).unwrap();
    let n = cfg.image_size;
    for i in 0..cfg.images {
        let img = render_synthetic_image(&cfg, i);
        let boxes: Vec<BBox> = index.annotations_of(ImageId(i as u32)).map(|a| a.bbox).collect();
        assert_eq!(boxes.len(), img.boxes.len());
        for (j, b) in boxes.iter().enumerate() {
            let label = j as u16 + 1;
            let (mut x1, mut y1, mut x2, mut y2) = (n, n, 0, 0);
            for y in 0..n {
                for x in 0..n {
                    if img.instance_mask[y * n + x] == label {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x + 1);
                        y2 = y2.max(y + 1);
                    }
                }
            }
            assert_eq!(*b, BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap());
        }
    }
}

#[test]
fn prepare_writes_exact_counts_and_is_byte_identical() {
    let dir = workspace();
    let p = dir.path();
    let args = [
        "prepare", "--data", "data", "--novel", "triangle", "--k", "3", "--rho", "1", "--seed", "7", "--out",
    ];
    let mut first = args.to_vec();
    first.push("o1");
    let mut second = args.to_vec();
    second.push("o2");
    ok(&fsdet(p, &first));
    ok(&fsdet(p, &second));
    for f in ["index.tsv", "train.tsv", "test.tsv", "finetune.tsv", "joint.tsv"] {
        assert_eq!(
            fs::read(p.join("o1").join(f)).unwrap(),
            fs::read(p.join("o2").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let index = read_index(&p.join("o1/index.tsv")).unwrap();
    let m = read_manifest(&p.join("o1/finetune.tsv"), &index).unwrap();
    assert_eq!(m.header.k, Some(3));
    assert!(m.header.extra.contains_key("config_hash"));
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for id in &m.images {
        for a in index.annotations_of(*id).filter(|a| !m.masked.contains(&a.id)) {
            *counts.entry(a.class).or_default() += 1;
        }
    }
    assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![3, 3, 3]);
}

#[test]
fn infeasible_dense_class_exits_nonzero_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let dims = ImageDims::new(200, 200).unwrap();
    let mut images = Vec::new();
    let object = |i: usize| {
        BBox::new(
            (i % 6 * 30) as f64,
            (i / 6 * 30) as f64,
            (i % 6 * 30 + 20) as f64,
            (i / 6 * 30 + 20) as f64,
        )
        .unwrap()
    };
    for i in 0..32u32 {
        let objects: Vec<(ClassId, BBox)> = if i < 28 {
            vec![(ClassId(i % 2 + 1), object(0))]
        } else {
            (0..12).map(|j| (ClassId(3), object(j))).collect()
        };
        let record = ImageRecord {
            id: ImageId(i),
            path: PathBuf::from(format!("{i}.png")),
            dims,
        };
        images.push((record, objects));
    }
    let classes = ["sparse-a", "sparse-b", "dense"]
        .iter()
        .enumerate()
        .map(|(i, n)| ClassInfo {
            id: ClassId(i as u32 + 1),
            name: n.to_string(),
        })
        .collect();
    let index = DatasetIndex::new(p, classes, images).unwrap();
    write_index(&index, &p.join("index.tsv"), &BTreeMap::new()).unwrap();

    let out = fsdet(
        p,
        &[
            "prepare",
            "--data",
            "index.tsv",
            "--format",
            "canonical",
            "--novel",
            "sparse-a",
            "--k",
            "10",
            "--rho",
            "1",
            "--train-fraction",
            "0.9",
            "--no-masking",
            "--seed",
            "0",
            "--out",
            "out",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("dense"), "{}", stderr(&out));
}

#[test]
fn finetune_without_base_checkpoint_fails() {
    let dir = prepared();
    let out = fsdet(
        dir.path(),
        &["train", "--config", "run.toml", "--out", "out", "--phase", "finetune"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("base checkpoint"), "{}", stderr(&out));
}

#[test]
fn train_and_eval_embed_config_hash_and_seed() {
    let dir = prepared();
    let p = dir.path();
    ok(&fsdet(
        p,
        &["train", "--config", "run.toml", "--out", "out", "--phase", "base"],
    ));
    ok(&fsdet(
        p,
        &["train", "--config", "run.toml", "--out", "out", "--phase", "finetune"],
    ));
    assert!(p.join("out/finetune-gru.ckpt").exists());

    let losses = fs::read_to_string(p.join("out/base-gru.losses.jsonl")).unwrap();
    let head: serde_json::Value = serde_json::from_str(losses.lines().next().unwrap()).unwrap();
    let hash = head["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(head["seed"], 7);
    assert_eq!(losses.lines().count(), 1 + 6);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("out/finetune-gru.ckpt.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], hash.as_str());

    ok(&fsdet(p, &["eval", "--config", "run.toml", "--out", "out", "--render"]));
    let eval = p.join("out/eval/finetune-gru");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash.as_str());
    assert_eq!(report["seed"], 7);
    assert_eq!(report["method"], "saan");
    let csv = fs::read_to_string(eval.join("results.csv")).unwrap();
    assert!(csv.starts_with("method,novel_class,k,rho,class,AP,seed"));
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(eval.join("figures/hist_triangle.svg").exists());

    ok(&fsdet(
        p,
        &[
            "report",
            "--out",
            "out",
            "--reports",
            "out/eval/finetune-gru/reports.json",
            "--detections",
            "out/eval/finetune-gru/detections.json",
            "--figures",
            "re",
        ],
    ));
    assert_eq!(
        fs::read(p.join("re/hist_triangle.svg")).unwrap(),
        fs::read(eval.join("figures/hist_triangle.svg")).unwrap()
    );
    assert!(fs::read_dir(p.join("re")).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("overlay_")));
}

#[test]
fn joint_baseline_needs_plain_detector() {
    let dir = prepared();
    let p = dir.path();
    let out = fsdet(
        p,
        &["train", "--config", "run.toml", "--out", "out", "--phase", "joint"],
    );
    assert_eq!(out.status.code(), Some(1));
    ok(&fsdet(
        p,
        &[
            "train", "--config", "run.toml", "--out", "out", "--phase", "joint", "--fusion", "none",
        ],
    ));
    assert!(p.join("out/joint-none.ckpt").exists());
    ok(&fsdet(
        p,
        &[
            "eval",
            "--config",
            "run.toml",
            "--out",
            "out",
            "--checkpoint",
            "out/joint-none.ckpt",
        ],
    ));
    let csv = fs::read_to_string(p.join("out/eval/joint-none/results.csv")).unwrap();
    assert!(
        csv.lines().skip(1).all(|l| l.starts_with("frcn-joint,triangle,3,inf,")),
        "{csv}"
    );
}

#[test]
fn grid_writes_one_row_per_class_and_cell() {
    let dir = workspace();
    let out = fsdet(
        dir.path(),
        &[
            "eval",
            "--config",
            "run.toml",
            "--out",
            "out",
            "--grid",
            "rsod",
            "--novel",
            "square",
            "--shots",
            "1,2",
            "--methods",
            "saan",
        ],
    );
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("out/grid-rsod/results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.starts_with("saan,square,")));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/grid-rsod/reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
}

#[test]
fn crop_supports_dumps_k_per_class() {
    let dir = prepared();
    ok(&fsdet(
        dir.path(),
        &["crop-supports", "--config", "run.toml", "--out", "out", "--side", "32"],
    ));
    let listing = fs::read_to_string(dir.path().join("out/supports/supports.tsv")).unwrap();
    assert!(listing.starts_with("#supports\tconfig_hash="));
    assert_eq!(listing.lines().count(), 1 + 3 * 3);
    let first = listing.lines().nth(1).unwrap().split('\t').next().unwrap();
    let img = image::open(dir.path().join("out/supports").join(first)).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn flags_override_file_and_env_sets_output_root() {
    let dir = workspace();
    let p = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_fsdet"))
        .args(["prepare", "--config", "run.toml", "--seed", "11", "--k", "2"])
        .current_dir(p)
        .env("FSDET_OUT", p.join("env-out"))
        .output()
        .unwrap();
    ok(&out);
    let index = fs::read_to_string(p.join("env-out/index.tsv")).unwrap();
    assert!(index.lines().next().unwrap().contains("seed=11"));
    let config = fs::read_to_string(p.join("env-out/config.toml")).unwrap();
    assert!(config.contains("seed = 11"));
    assert!(config.contains("k = 2"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(fsdet(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fsdet(p, &["prepare", "--k", "many"]).status.code(), Some(1));
    assert_eq!(
        fsdet(p, &["prepare", "--config", "run.toml", "--rho", "half"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        fsdet(p, &["prepare", "--config", "run.toml", "--novel", "hexagon"])
            .status
            .code(),
        Some(1)
    );
    fs::write(p.join("bad.toml"), "sed = 3\n").unwrap();
    assert_eq!(fsdet(p, &["prepare", "--config", "bad.toml"]).status.code(), Some(1));
    assert_eq!(fsdet(p, &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsdet(
        dir.path(),
        &["prepare", "--data", "nowhere", "--format", "nwpu", "--novel", "bridge"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = fsdet(dir.path(), &["train", "--out", "empty"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
