//! Acceptance gate: one pass/fail line per criterion, then a single assert.
//!
//! Run with `cargo test -p fsdet-core --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;

use fsdet::autograd::{Graph, Sgd, Var};
use fsdet::dataset::{
    crop_support, generate_synthetic_dataset, make_split, sample_finetune_set, sample_finetune_set_with, ClassId,
    ClassInfo, DatasetIndex, ImageId, ImageRecord, MaskingPolicy, Proportion, ShotBudget, SyntheticConfig,
};
use fsdet::detector::boxes::corners;
use fsdet::detector::DetectorConfig;
use fsdet::error::Error;
use fsdet::evaluation::{
    compute_ap, CellSpec, EvalOptions, EvalReport, GtBox, Method, Pipeline, PipelineConfig, ScoredBox,
};
use fsdet::geometry::{square_pad_bbox, BBox, ImageDims};
use fsdet::model::FewShotModel;
use fsdet::raster::Interpolation;
use fsdet::rng::rng_from_seed;
use fsdet::saan::{fuse_graph, gru_cell_graph, relation_gru_cell, GruMatrices, GruVars};
use fsdet::saan::{fuse_roi_with_supports, Fusion, Reduction, SupportFeatureBank};
use fsdet::training::{sample_losses, LossRecord, Targets, TrainConfig, TrainLog, TrainingSample};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {n} PASS [{secs:.1}s] {title}: {detail}"),
        Err(detail) => println!("criterion {n} FAIL [{secs:.1}s] {title}: {detail}"),
    }
    result.is_ok()
}

// ---- criterion 1 ----

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain loops over the reset gate, update gate, candidate and blend.
fn gru_scalar(x: &[f64], h: &[f64], m: &GruMatrices<f64>) -> Vec<f64> {
    let d = x.len();
    let mut r = vec![0.0; d];
    let mut z = vec![0.0; d];
    for i in 0..d {
        let (mut a, mut b) = (0.0, 0.0);
        for j in 0..d {
            a += m.wr[[i, j]] * x[j] + m.wr[[i, d + j]] * h[j];
            b += m.wz[[i, j]] * x[j] + m.wz[[i, d + j]] * h[j];
        }
        r[i] = sig(a);
        z[i] = sig(b);
    }
    (0..d)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..d {
                s += m.w[[i, j]] * x[j] + m.u[[i, j]] * (r[j] * h[j]);
            }
            z[i] * h[i] + (1.0 - z[i]) * s.tanh()
        })
        .collect()
}

fn rand_vec(d: usize, scale: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.gen_range(-scale..scale))
}

fn criterion_1() -> Outcome {
    let mut rng = rng_from_seed(101);
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut trials = 0;
    for d in [1, 8, 32] {
        for _ in 0..1000 {
            let m = GruMatrices::<f64>::random(d, &mut rng);
            let x = rand_vec(d, 2.0, &mut rng);
            let h = rand_vec(d, 2.0, &mut rng);
            let got = relation_gru_cell(x.view(), h.view(), &m)
                .map_err(|e| e.to_string())?
                .hidden;
            let want = gru_scalar(x.as_slice().unwrap(), h.as_slice().unwrap(), &m);
            for (a, b) in got.iter().zip(&want) {
                let err = (a - b).abs();
                worst_abs = worst_abs.max(err);
                // relative error, with an absolute floor for outputs at round-off scale
                let rel = if err <= 1e-15 { 0.0 } else { err / a.abs().max(b.abs()) };
                worst = worst.max(rel);
            }
            trials += 1;
        }
    }
    check(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{trials} trials at d in {{1,8,32}}, max relative error {worst:.2e} (tol 1e-6), max absolute {worst_abs:.2e}"
    ))
}

// ---- criterion 2 ----

/// Relative error of a gradient tensor: ||a - n|| / max(||a||, ||n||).
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Scalar objective `sum(fuse(roi, supports) * probe)`; inputs are
/// `[wr, wz, w, u, roi, supports...]`.
fn objective(inputs: &[ArrayD<f64>], probe: &ArrayD<f64>, single_cell: bool) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let m = GruVars {
        wr: vars[0],
        wz: vars[1],
        w: vars[2],
        u: vars[3],
    };
    let out = if single_cell {
        gru_cell_graph(&mut g, m, vars[5], vars[4]).unwrap().hidden
    } else {
        fuse_graph(&mut g, m, vars[4], &vars[5..]).unwrap()
    };
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p).unwrap();
    let s = g.sum(prod);
    (g, vars, s)
}

/// Objective evaluated through the vector API, independent of the tape.
fn objective_value(inputs: &[ArrayD<f64>], probe: &ArrayD<f64>, single_cell: bool) -> f64 {
    let to2 = |a: &ArrayD<f64>| a.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let m = GruMatrices {
        wr: to2(&inputs[0]),
        wz: to2(&inputs[1]),
        w: to2(&inputs[2]),
        u: to2(&inputs[3]),
    };
    let row = |a: &ArrayD<f64>| Array1::from(a.iter().copied().collect::<Vec<_>>());
    let roi = row(&inputs[4]);
    let out = if single_cell {
        relation_gru_cell(row(&inputs[5]).view(), roi.view(), &m)
            .unwrap()
            .hidden
    } else {
        let vectors: BTreeMap<ClassId, Array1<f64>> = inputs[5..]
            .iter()
            .enumerate()
            .map(|(i, s)| (ClassId(i as u32 + 1), row(s)))
            .collect();
        let bank = SupportFeatureBank::new(vectors, BTreeMap::new(), Reduction::Mean).unwrap();
        fuse_roi_with_supports(roi.view(), &bank, &m).unwrap()
    };
    out.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
}

fn criterion_2() -> Outcome {
    let d = 32;
    let eps = 1e-3;
    let sampled_weight_coords = 24;
    let mut rng = rng_from_seed(202);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for trial in 0..100 {
        for single in [true, false] {
            let m = GruMatrices::<f64>::random(d, &mut rng);
            let mut inputs = vec![m.wr.into_dyn(), m.wz.into_dyn(), m.w.into_dyn(), m.u.into_dyn()];
            let supports = if single { 1 } else { 3 };
            for _ in 0..=supports {
                inputs.push(
                    rand_vec(d, 1.0, &mut rng)
                        .into_shape_with_order(IxDyn(&[1, d]))
                        .unwrap(),
                );
            }
            let probe = rand_vec(d, 1.0, &mut rng)
                .into_shape_with_order(IxDyn(&[1, d]))
                .unwrap();
            let (g, vars, out) = objective(&inputs, &probe, single);
            let grads = g.backward(out);
            for (k, base) in inputs.iter().enumerate() {
                let analytic: Vec<f64> = grads.wrt(vars[k]).ok_or("missing gradient")?.iter().copied().collect();
                // every element of the vectors, a seeded sample of each weight matrix
                let idx: Vec<usize> = if k < 4 {
                    (0..sampled_weight_coords)
                        .map(|_| rng.gen_range(0..base.len()))
                        .collect()
                } else {
                    (0..base.len()).collect()
                };
                let mut a = Vec::with_capacity(idx.len());
                let mut n = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let mut plus = inputs.clone();
                    plus[k].as_slice_mut().unwrap()[i] += eps;
                    let mut minus = inputs.clone();
                    minus[k].as_slice_mut().unwrap()[i] -= eps;
                    let numeric = (objective_value(&plus, &probe, single) - objective_value(&minus, &probe, single))
                        / (2.0 * eps);
                    a.push(analytic[i]);
                    n.push(numeric);
                }
                coords += idx.len();
                let e = rel_err(&a, &n);
                if e > 1e-4 {
                    return Err(format!("trial {trial} single={single} input {k}: relative error {e:e}"));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(format!(
        "100 trials x (cell, C=3 fusion) at d=32, {coords} coordinates, max relative error {worst:.2e} (tol 1e-4)"
    ))
}

// ---- criterion 3 ----

fn criterion_3() -> Outcome {
    let d100 = ImageDims::new(100, 100).unwrap();
    let examples = [
        ((10.0, 20.0, 50.0, 40.0), (10.0, 10.0, 50.0, 50.0)),
        ((0.0, 0.0, 30.0, 30.0), (0.0, 0.0, 30.0, 30.0)),
        ((10.0, 2.0, 50.0, 10.0), (10.0, 0.0, 50.0, 26.0)),
    ];
    for ((a, b, c, e), want) in examples {
        let w = square_pad_bbox(&BBox::new(a, b, c, e).unwrap(), d100)
            .map_err(|e| e.to_string())?
            .window;
        check((w.x1, w.y1, w.x2, w.y2) == want, || {
            format!("example {:?} gave {w}", (a, b, c, e))
        })?;
    }
    let mut rng = rng_from_seed(303);
    for i in 0..10_000 {
        let dims = ImageDims::new(rng.gen_range(1..400), rng.gen_range(1..400)).unwrap();
        let (x1, x2) = sorted_pair(&mut rng, dims.width);
        let (y1, y2) = sorted_pair(&mut rng, dims.height);
        let bbox = BBox::new(x1, y1, x2, y2).unwrap();
        let win = square_pad_bbox(&bbox, dims).map_err(|e| e.to_string())?.window;
        let (w, h) = (bbox.width(), bbox.height());
        let (long, short) = (w.max(h), w.min(h));
        let contains = win.x1 <= bbox.x1 && win.y1 <= bbox.y1 && win.x2 >= bbox.x2 && win.y2 >= bbox.y2;
        let bounded = win.x1 >= 0.0 && win.y1 >= 0.0 && win.x2 <= dims.width as f64 && win.y2 <= dims.height as f64;
        let (long_ext, pad_ext, long_kept) = if w >= h {
            (win.width(), win.height(), win.x1 == bbox.x1 && win.x2 == bbox.x2)
        } else {
            (win.height(), win.width(), win.y1 == bbox.y1 && win.y2 == bbox.y2)
        };
        let extent = long_ext == long && pad_ext >= short && pad_ext <= long;
        let integral = [win.x1, win.y1, win.x2, win.y2].iter().all(|v| v.fract() == 0.0);
        check(contains && bounded && extent && long_kept && integral, || {
            format!("pair {i}: bbox {bbox} dims {}x{} window {win}", dims.width, dims.height)
        })?;
        if w == h {
            check(win == bbox, || format!("square box {bbox} changed to {win}"))?;
        }
    }
    Ok("3 worked examples exact; 10000 random integer (bbox, dims) pairs satisfy containment, bounds, extents".into())
}

fn sorted_pair(rng: &mut impl Rng, max: usize) -> (f64, f64) {
    if max == 1 {
        return (0.0, 1.0);
    }
    let a = rng.gen_range(0..max);
    let b = rng.gen_range(0..max);
    let (lo, hi) = (a.min(b), a.max(b));
    if lo == hi {
        (lo as f64, lo as f64 + 1.0)
    } else {
        (lo as f64, hi as f64)
    }
}

// ---- criterion 4 ----

/// Independent greedy matcher and exhaustive PR enumeration.
fn ap_brute_force(dets: &[ScoredBox], gts: &[GtBox], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &i in &order {
        let mut best = -1.0;
        let mut best_j = None;
        for (j, g) in gts.iter().enumerate() {
            if g.image == dets[i].image {
                let v = dets[i].bbox.iou(&g.bbox);
                if v > best {
                    best = v;
                    best_j = Some(j);
                }
            }
        }
        match best_j {
            Some(j) if best >= thr && !used[j] => {
                used[j] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let n = gts.len() as f64;
    // every prefix of the ranking is one operating point
    let mut points = Vec::new();
    for cut in 1..=hits.len() {
        let tp = hits[..cut].iter().filter(|h| **h).count() as f64;
        points.push((tp / n, tp / cut as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.insert(0, 0.0);
    levels.dedup();
    let mut ap = 0.0;
    for w in levels.windows(2) {
        let best = points.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
        ap += (w[1] - w[0]) * best;
    }
    ap
}

fn sb(image: u32, score: f64, b: (f64, f64, f64, f64)) -> ScoredBox {
    ScoredBox {
        image: ImageId(image),
        score,
        bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
    }
}

fn gb(image: u32, b: (f64, f64, f64, f64)) -> GtBox {
    GtBox {
        image: ImageId(image),
        bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
        masked: false,
    }
}

fn criterion_4() -> Outcome {
    let one = compute_ap(
        &[sb(0, 0.9, (0.0, 0.0, 10.0, 10.0))],
        &[gb(0, (0.0, 0.0, 10.0, 10.0))],
        0.5,
    )
    .unwrap();
    check(one.ap == 1.0, || format!("single TP gave {}", one.ap))?;
    let none = compute_ap(&[], &[gb(0, (0.0, 0.0, 10.0, 10.0))], 0.5).unwrap();
    check(none.ap == 0.0, || format!("no detections gave {}", none.ap))?;
    let gts = [gb(0, (0.0, 0.0, 10.0, 10.0)), gb(0, (50.0, 50.0, 60.0, 60.0))];
    let dets = [
        sb(0, 0.9, (0.0, 0.0, 10.0, 10.0)),
        sb(0, 0.8, (20.0, 20.0, 30.0, 30.0)),
        sb(0, 0.7, (50.0, 50.0, 60.0, 60.0)),
    ];
    let tft = compute_ap(&dets, &gts, 0.5).unwrap().ap;
    let oracle = ap_brute_force(&dets, &gts, 0.5);
    check(tft == oracle && (tft - 5.0 / 6.0).abs() < 1e-15, || {
        format!("TP,FP,TP gave {tft}, oracle {oracle}")
    })?;

    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f64;
    let mut undefined = 0;
    for i in 0..1000 {
        let images = rng.gen_range(1..4u32);
        let boxes = |n: usize, rng: &mut fsdet::rng::Rng| -> Vec<(u32, (f64, f64, f64, f64))> {
            (0..n)
                .map(|_| {
                    let x = rng.gen_range(0..6) as f64 * 4.0;
                    let y = rng.gen_range(0..6) as f64 * 4.0;
                    let w = rng.gen_range(4..12) as f64;
                    let h = rng.gen_range(4..12) as f64;
                    (rng.gen_range(0..images), (x, y, x + w, y + h))
                })
                .collect()
        };
        let n_gt = rng.gen_range(0..6);
        let n_det = rng.gen_range(0..10);
        let gts: Vec<GtBox> = boxes(n_gt, &mut rng).into_iter().map(|(im, b)| gb(im, b)).collect();
        let dets: Vec<ScoredBox> = boxes(n_det, &mut rng)
            .into_iter()
            // coarse scores so that ties occur
            .map(|(im, b)| sb(im, rng.gen_range(0..5) as f64 / 4.0, b))
            .collect();
        let thr = [0.3, 0.5, 0.7][i % 3];
        match compute_ap(&dets, &gts, thr) {
            None => {
                check(gts.is_empty(), || {
                    format!("instance {i}: AP undefined with {} GT", gts.len())
                })?;
                undefined += 1;
            }
            Some(r) => {
                let o = ap_brute_force(&dets, &gts, thr);
                let e = (r.ap - o).abs();
                check(e <= 1e-9, || format!("instance {i}: AP {} vs oracle {o}", r.ap))?;
                worst = worst.max(e);
            }
        }
    }
    Ok(format!(
        "3 worked examples exact; 1000 random instances ({undefined} with no GT) max |AP - oracle| = {worst:.1e} (tol 1e-9)"
    ))
}

// ---- criterion 5 ----

fn synthetic(dir: &std::path::Path, images: usize, seed: u64) -> DatasetIndex {
    let cfg = SyntheticConfig {
        images,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic_dataset(&cfg, dir).expect("synthetic dataset")
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let index = synthetic(dir.path(), 300, 5);
    let novel = ClassId(3);
    let split = make_split(&index, &BTreeSet::from([novel]), 0.8, 1).map_err(|e| e.to_string())?;
    let pool_count = |c: ClassId| {
        split
            .train
            .iter()
            .flat_map(|i| index.annotations_of(*i))
            .filter(|a| a.class == c)
            .count()
    };
    let mut cells = 0;
    for k in [1, 2, 3, 5, 10] {
        for rho in Proportion::SWEEP {
            let budget = ShotBudget::new(k, rho).unwrap();
            let set = sample_finetune_set(&index, &split, budget, 17).map_err(|e| format!("k={k} rho={rho}: {e}"))?;
            check(set.count(novel) == k, || {
                format!("k={k} rho={rho}: novel count {}", set.count(novel))
            })?;
            for &b in split.classes.base() {
                let want = budget.base_target().unwrap_or_else(|| pool_count(b));
                check(set.count(b) == want, || {
                    format!("k={k} rho={rho}: class {b} count {} != {want}", set.count(b))
                })?;
                check(set.active_of_class(&index, b).len() == want, || {
                    format!("k={k} rho={rho}: active list")
                })?;
            }
            check(
                set.active
                    .iter()
                    .all(|a| split.train.contains(&index.annotation(*a).unwrap().image)),
                || format!("k={k} rho={rho}: active annotation outside the training split"),
            )?;
            cells += 1;
        }
    }

    // a class whose every image carries twelve instances cannot give exactly
    // ten shots unless surplus objects may be masked
    let mut records = Vec::new();
    let classes: Vec<ClassInfo> = ["sparse-a", "sparse-b", "dense"]
        .iter()
        .enumerate()
        .map(|(i, n)| ClassInfo {
            id: ClassId(i as u32 + 1),
            name: n.to_string(),
        })
        .collect();
    for i in 0..32u32 {
        let (class, count) = match i {
            0..=13 => (1, 1),
            14..=27 => (2, 1),
            _ => (3, 12),
        };
        let boxes = (0..count)
            .map(|j| {
                let x = (j % 6) as f64 * 30.0;
                let y = (j / 6) as f64 * 30.0;
                (ClassId(class), BBox::new(x, y, x + 20.0, y + 20.0).unwrap())
            })
            .collect();
        let record = ImageRecord {
            id: ImageId(i),
            path: PathBuf::from(format!("{i}.png")),
            dims: ImageDims::new(200, 200).unwrap(),
        };
        records.push((record, boxes));
    }
    let dense = DatasetIndex::new("unused", classes, records).map_err(|e| e.to_string())?;
    let split = make_split(&dense, &BTreeSet::from([ClassId(1)]), 0.9, 0).map_err(|e| e.to_string())?;
    let budget = ShotBudget::new(10, Proportion::Ratio(1)).unwrap();
    let err = sample_finetune_set_with(&dense, &split, budget, MaskingPolicy::Forbid, 0);
    let named = match &err {
        Err(Error::Infeasible { class, name, .. }) => *class == ClassId(3) && name == "dense",
        _ => false,
    };
    check(named, || format!("dense class gave {err:?}"))?;
    Ok(format!(
        "{cells} (k, rho) cells exact; dense class rejected: {}",
        err.unwrap_err()
    ))
}

// ---- criterion 6 ----

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let index = synthetic(dir.path(), 4, 6);
    let mut model = FewShotModel::new(
        DetectorConfig::tiny(),
        Fusion::Gru,
        SyntheticConfig::default().class_infos(),
        6,
    )
    .map_err(|e| e.to_string())?;
    let audit = |model: &FewShotModel, when: &str| -> Result<String, String> {
        let c = model.census().map_err(|e| e.to_string())?;
        let shared: BTreeSet<_> = model.detector.shared_param_ids().into_iter().collect();
        check(c.support_only().is_empty(), || {
            format!("{when}: {} encoder-only parameters", c.support_only().len())
        })?;
        check(c.support_encoder == shared, || {
            format!("{when}: encoder does not alias backbone + RoI head")
        })?;
        check(c.gru.len() == 4, || format!("{when}: {} GRU matrices", c.gru.len()))?;
        check(c.unaccounted() == 0, || {
            format!("{when}: {} unaccounted parameters", c.unaccounted())
        })?;
        Ok(format!(
            "{when}: {} tensors = {} detector + {} GRU, encoder uses {} detector aliases",
            c.total,
            c.detector.len(),
            c.gru.len(),
            c.support_encoder.len()
        ))
    };
    let before = audit(&model, "before")?;
    let sample = overfit_sample(&index, &model)?;
    let mut g = Graph::new();
    let losses = sample_losses(&mut g, &model, &sample, 0).map_err(|e| e.to_string())?;
    let grads = g.backward(losses.total);
    let snapshot = model.store.clone();
    Sgd::new(1e-2f32, 0.9, 1e-4).step(&mut model.store, &grads);
    let moved = model
        .store
        .ids()
        .filter(|&id| model.store.value(id) != snapshot.value(id))
        .count();
    check(moved > 0, || "optimizer step changed nothing".into())?;
    let gru_grads = model
        .gru
        .unwrap()
        .ids()
        .iter()
        .filter(|id| grads.param(**id).is_some())
        .count();
    check(gru_grads == 4, || {
        format!("{gru_grads} GRU matrices received gradients")
    })?;
    let after = audit(&model, "after one step")?;
    Ok(format!("{before}; {after}"))
}

// ---- criterion 7 ----

fn overfit_sample(index: &DatasetIndex, model: &FewShotModel) -> Result<TrainingSample, String> {
    let query = index.load_image(ImageId(0)).map_err(|e| e.to_string())?;
    let mut targets = Targets::default();
    for a in index.annotations_of(ImageId(0)) {
        targets
            .boxes
            .push((model.label_of(a.class).ok_or("unknown class")?, corners(&a.bbox)));
    }
    let mut supports = Vec::new();
    for c in &model.classes {
        let a = index
            .annotations()
            .iter()
            .find(|a| a.class == c.id)
            .ok_or("class without annotations")?;
        let img = index.load_image(a.image).map_err(|e| e.to_string())?;
        supports.push(crop_support(index, &img, a.id, 64, Interpolation::Bilinear).map_err(|e| e.to_string())?);
    }
    Ok(TrainingSample {
        query,
        targets,
        supports,
    })
}

const OVERFIT_STEPS: usize = 200;
const OVERFIT_LR: f32 = 5e-3;

fn overfit_run(seed: u64) -> Result<Vec<LossRecord>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let index = synthetic(dir.path(), 8, seed);
    let mut model = FewShotModel::new(
        DetectorConfig::tiny(),
        Fusion::Gru,
        SyntheticConfig::default().class_infos(),
        seed,
    )
    .map_err(|e| e.to_string())?;
    let sample = overfit_sample(&index, &model)?;
    let mut opt = Sgd::new(OVERFIT_LR, 0.9, 1e-4).with_clip_norm(Some(10.0));
    let mut log = Vec::with_capacity(OVERFIT_STEPS);
    for step in 0..OVERFIT_STEPS {
        let mut g = Graph::new();
        let losses = sample_losses(&mut g, &model, &sample, step as u64).map_err(|e| e.to_string())?;
        let record = losses.record(&g, step);
        check(record.is_finite(), || {
            format!("non-finite loss at step {step}: {record:?}")
        })?;
        let grads = g.backward(losses.total);
        check(grads.all_finite(), || format!("non-finite gradient at step {step}"))?;
        opt.step(&mut model.store, &grads);
        log.push(record);
    }
    Ok(log)
}

fn criterion_7(log: &Result<Vec<LossRecord>, String>) -> Outcome {
    let log = log.as_ref().map_err(|e| e.clone())?;
    let first = log[0].total;
    let last = log.last().unwrap().total;
    let drop = 1.0 - last / first;
    check(drop >= 0.9, || {
        format!("loss {first:.4} -> {last:.4}, reduction {:.1}%", drop * 100.0)
    })?;
    Ok(format!(
        "{OVERFIT_STEPS} steps at lr {OVERFIT_LR}: total loss {first:.4} -> {last:.4} ({:.1}% reduction), all finite",
        drop * 100.0
    ))
}

// ---- criterion 8 ----

struct EndToEnd {
    reports: Vec<(String, EvalReport)>,
    logs: Vec<TrainLog>,
}

fn end_to_end(seed: u64) -> Result<EndToEnd, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let index = synthetic(dir.path(), 120, seed);
    let detector = DetectorConfig::tiny();
    let base = TrainConfig {
        steps: 1500,
        lr: 5e-3,
        support_side: 64,
        seed,
        ..TrainConfig::for_phase(fsdet::dataset::Phase::Base, &detector)
    };
    let finetune = TrainConfig {
        steps: 600,
        lr: 1e-3,
        support_side: 64,
        seed,
        ..TrainConfig::for_phase(fsdet::dataset::Phase::Finetune, &detector)
    };
    let eval = EvalOptions {
        support_side: 64,
        ..EvalOptions::default()
    };
    let config = PipelineConfig {
        detector,
        base,
        finetune,
        eval,
        train_fraction: 0.8,
        masking: MaskingPolicy::Allow,
        seed,
        config_hash: String::new(),
    };
    let mut pipeline = Pipeline::new(&index, config);
    let mut out = EndToEnd {
        reports: Vec::new(),
        logs: Vec::new(),
    };
    for (method, k) in [(Method::Saan, 10), (Method::Saan, 1), (Method::FrcnFt, 10)] {
        let cell = CellSpec {
            method,
            novel: vec![ClassId(3)],
            k,
            rho: Proportion::Ratio(1),
        };
        let report = pipeline.run_cell(&cell).map_err(|e| format!("{method} k={k}: {e}"))?;
        for log in &pipeline.last_logs {
            check(log.losses.iter().all(LossRecord::is_finite), || {
                format!("{method} k={k}: non-finite loss")
            })?;
        }
        out.logs.extend(pipeline.last_logs.iter().cloned());
        out.reports.push((format!("{method} k={k}"), report));
    }
    Ok(out)
}

fn novel_ap(run: &EndToEnd, label: &str) -> Option<f64> {
    run.reports
        .iter()
        .find(|(l, _)| l == label)
        .and_then(|(_, r)| r.class(ClassId(3)))
        .and_then(|c| c.ap)
}

fn criterion_8(run: &Result<EndToEnd, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let k10 = novel_ap(run, "saan k=10").ok_or("no novel AP for k=10")?;
    let k1 = novel_ap(run, "saan k=1").ok_or("no novel AP for k=1")?;
    let frcn = novel_ap(run, "frcn-ft k=10");
    let detail = format!(
        "novel (triangle) AP@0.5: gru k=10 {k10:.3}, gru k=1 {k1:.3}, FRCN-ft k=10 {}",
        frcn.map_or("none".into(), |v| format!("{v:.3}"))
    );
    check(k10 >= 0.5 && k10 > k1 && frcn.is_some(), || detail.clone())?;
    Ok(detail)
}

// ---- criterion 9 ----

fn criterion_9(
    overfit: &Result<Vec<LossRecord>, String>,
    e2e: &Result<EndToEnd, String>,
    seed_overfit: u64,
    seed_e2e: u64,
) -> Outcome {
    let a = overfit.as_ref().map_err(|e| e.clone())?;
    let b = overfit_run(seed_overfit)?;
    check(a == &b, || "overfit loss logs differ between identical runs".into())?;
    let first = e2e.as_ref().map_err(|e| e.clone())?;
    let second = end_to_end(seed_e2e)?;
    check(first.logs.len() == second.logs.len(), || {
        "different number of training logs".into()
    })?;
    for (x, y) in first.logs.iter().zip(&second.logs) {
        check(x.losses == y.losses && x.episodes == y.episodes, || {
            "training logs differ".into()
        })?;
    }
    for ((la, ra), (lb, rb)) in first.reports.iter().zip(&second.reports) {
        check(la == lb && ra == rb, || format!("report {la} differs"))?;
    }
    let steps: usize = first.logs.iter().map(|l| l.losses.len()).sum();
    Ok(format!(
        "bitwise-equal reruns: {} overfit losses, {steps} pipeline losses, {} reports",
        a.len(),
        first.reports.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let mut passed = vec![
        run(1, "GRU cell oracle", criterion_1),
        run(2, "gradient check", criterion_2),
        run(3, "crop geometry", criterion_3),
        run(4, "AP oracle", criterion_4),
        run(5, "sampler exactness", criterion_5),
        run(6, "weight-sharing census", criterion_6),
    ];

    let t = Instant::now();
    let overfit = catch_unwind(|| overfit_run(7)).unwrap_or_else(|_| Err("overfit run panicked".into()));
    let overfit_secs = t.elapsed().as_secs_f64();
    passed.push(run(7, "smoke training", || {
        criterion_7(&overfit).map(|d| format!("{d}; run took {overfit_secs:.1}s"))
    }));

    let t = Instant::now();
    let e2e = catch_unwind(|| end_to_end(0)).unwrap_or_else(|_| Err("end-to-end run panicked".into()));
    let e2e_secs = t.elapsed().as_secs_f64();
    passed.push(run(8, "end-to-end synthetic few-shot", || {
        criterion_8(&e2e).map(|d| format!("{d}; run took {e2e_secs:.1}s"))
    }));

    passed.push(run(9, "determinism", || criterion_9(&overfit, &e2e, 7, 0)));
    println!("criterion 10 SKIP: optional dataset-scale run needs the RSOD images and a GPU");

    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
