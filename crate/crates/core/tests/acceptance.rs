//! End-to-end acceptance run. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{blob_examples, oracle, perturbed, random_label_map};
use cryoseg::data::synthetic::{write_corpus, SyntheticConfig, ORGANS};
use cryoseg::data::{load_dataset, make_folds, mask_to_contours, AugmentedExample, DEFAULT_CONTOUR_THICKNESS};
use cryoseg::losses::{
    bce_loss, bce_loss_grad, soft_dice_loss, soft_dice_loss_grad, total_loss, total_loss_grad, HeadMaps,
    LossWeights, PixelPrediction, SegStLoss,
};
use cryoseg::metrics::evaluate_pair;
use cryoseg::metrics::reference::{BASELINE_AJI, BASELINE_PQ};
use cryoseg::model::{NetworkConfig, TripleUNet};
use cryoseg::nn::{Tape, Tensor};
use cryoseg::pipeline::evaluate::{read_report, RowKind};
use cryoseg::pipeline::train::binary_dice;
use cryoseg::pipeline::{crossval, infer_image, Trainer, TrainConfig};
use cryoseg::postprocess::{segment_maps, PostprocessParams};
use cryoseg::stain::{deconvolve_unclamped, rgb_to_optical_density, StainMatrix};
use cryoseg::types::{count_instances, LabelMap, ProbabilityMap};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || {
        format!("{what} took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// 1. metrics against enumeration

fn block(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> LabelMap {
    Array2::from_shape_fn((h, w), |(y, x)| ((y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)) as u32)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let gt = random_label_map(&mut rng, h, w, 5);
        let pred = if case % 2 == 0 {
            perturbed(&mut rng, &gt)
        } else {
            random_label_map(&mut rng, h, w, 5)
        };
        let r = evaluate_pair(&gt, &pred).map_err(|e| e.to_string())?;
        let o = oracle(&gt, &pred);
        for (name, a, b) in [("aji", r.aji, o.aji), ("pq", r.pq, o.pq), ("dice", r.dice, o.dice)] {
            let d = (a - b).abs();
            worst = worst.max(d);
            ensure(d <= 1e-9, || format!("case {case}: {name} {a} vs oracle {b}"))?;
        }
        ensure((r.tp, r.fp, r.fn_) == (o.tp, o.fp, o.fn_), || format!("case {case}: counts differ"))?;
    }
    let gt = block(4, 4, 1, 1, 2);
    let pred = block(4, 4, 1, 2, 2);
    let r = evaluate_pair(&gt, &pred).map_err(|e| e.to_string())?;
    ensure(r.aji == 1.0 / 3.0, || format!("shifted block AJI {}", r.aji))?;
    ensure(r.pq == 0.0, || format!("shifted block PQ {}", r.pq))?;
    within(start.elapsed(), 60, "oracle comparison")?;
    Ok(format!("1000 random maps, max deviation {worst:.1e}; shifted block AJI = 1/3, PQ = 0"))
}

// 2. losses

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn loss_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let n = 64;
    for case in 0..20 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let pp = PixelPrediction::new(&x, &y).unwrap();
        let single: [(&str, Box<dyn Fn(&[f64]) -> f64>, Vec<f64>); 2] = [
            ("bce", Box::new(|v: &[f64]| bce_loss(&PixelPrediction::new(v, &y).unwrap())), bce_loss_grad(&pp).1),
            (
                "soft dice",
                Box::new(|v: &[f64]| soft_dice_loss(&PixelPrediction::new(v, &y).unwrap())),
                soft_dice_loss_grad(&pp).1,
            ),
        ];
        for (name, f, grad) in &single {
            for i in 0..n {
                let e = rel_err(grad[i], central_difference(f.as_ref(), &x, i, h));
                worst = worst.max(e);
                ensure(e < 1e-3, || format!("case {case}: {name} pixel {i} relative error {e:e}"))?;
            }
        }
        // weighted total over three heads
        let heads: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(0.02..0.98)).collect()).collect();
        let contour_t: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let weights =
            LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0))
                .unwrap();
        let kind = if case % 2 == 0 { SegStLoss::Bce } else { SegStLoss::SoftDice };
        let maps = |r: &[f64], c: &[f64], s: &[f64]| -> f64 {
            let m = HeadMaps { rgb_prob: r, contour_prob: c, seg_prob: s, seg_target: &y, contour_target: &contour_t };
            total_loss(m, &weights, kind).unwrap().total
        };
        let (_, g) = total_loss_grad(
            HeadMaps {
                rgb_prob: &heads[0],
                contour_prob: &heads[1],
                seg_prob: &heads[2],
                seg_target: &y,
                contour_target: &contour_t,
            },
            &weights,
            kind,
        )
        .unwrap();
        for i in 0..n {
            let nr = central_difference(&|v| maps(v, &heads[1], &heads[2]), &heads[0], i, h);
            let nc = central_difference(&|v| maps(&heads[0], v, &heads[2]), &heads[1], i, h);
            let ns = central_difference(&|v| maps(&heads[0], &heads[1], v), &heads[2], i, h);
            for (a, num, head) in [(g.rgb[i], nr, "rgb"), (g.contour[i], nc, "contour"), (g.seg[i], ns, "seg")] {
                let e = rel_err(a, num);
                worst = worst.max(e);
                ensure(e < 1e-3, || format!("case {case}: total loss, {head} head pixel {i}, relative error {e:e}"))?;
            }
        }
    }
    let half = bce_loss(&PixelPrediction::new(&[0.5; 64], &[1.0; 64]).unwrap());
    ensure((half - std::f64::consts::LN_2).abs() <= 1e-9, || format!("bce(0.5) = {half}"))?;
    let target: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let inverse: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
    let perfect = soft_dice_loss(&PixelPrediction::new(&target, &target).unwrap());
    let disjoint = soft_dice_loss(&PixelPrediction::new(&inverse, &target).unwrap());
    let half_field = soft_dice_loss(&PixelPrediction::new(&[0.5; 64], &[1.0; 64]).unwrap());
    ensure(perfect.abs() <= 1e-6, || format!("perfect dice loss {perfect}"))?;
    ensure((disjoint - 1.0).abs() <= 1e-6, || format!("disjoint dice loss {disjoint}"))?;
    ensure((half_field - 0.2).abs() <= 1e-6, || format!("half-field dice loss {half_field}"))?;
    Ok(format!(
        "20 random 8x8 cases, max relative error {worst:.1e}; bce(0.5) = ln 2; dice {perfect:.1e} / {disjoint:.6} / {half_field:.6}"
    ))
}

// 3. stain arithmetic

fn stain_math() -> Outcome {
    let white = rgb_to_optical_density(Array3::from_elem((1, 1, 3), 255.0f32).view(), 255.0).unwrap();
    ensure(white.values().iter().all(|&v| v == 0.0), || format!("white OD {:?}", white.values()))?;
    let tenth = rgb_to_optical_density(Array3::from_elem((1, 1, 3), 25.5f32).view(), 255.0).unwrap();
    ensure(tenth.values().iter().all(|&v| v == 1.0), || format!("25.5 OD {:?}", tenth.values()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels = Array3::from_shape_fn((1000, 1, 3), |_| rng.random_range(1.0f32..=255.0));
    let stains = StainMatrix::default();
    let od = rgb_to_optical_density(pixels.view(), 255.0).unwrap();
    let conc = deconvolve_unclamped(&od, &stains).unwrap();
    let mut worst = 0.0f64;
    for (px, c) in pixels.lanes(Axis(2)).into_iter().zip(conc.lanes(Axis(2))) {
        let back = stains.mix([c[0], c[1], c[2]]);
        for k in 0..3 {
            let rgb = 255.0 * 10f64.powf(-back[k]);
            worst = worst.max((rgb - px[k] as f64).abs());
        }
    }
    ensure(worst < 1e-6, || format!("round-trip error {worst:e}"))?;
    Ok(format!("white -> 0 OD, 25.5 -> 1 OD exactly; 1000-pixel round trip max error {worst:.1e}"))
}

// 4. network bookkeeping

fn network_bookkeeping() -> Outcome {
    let start = Instant::now();
    let cfg = NetworkConfig::default();
    ensure(cfg.depth == 4, || format!("default depth {}", cfg.depth))?;
    let net = TripleUNet::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let tape = Tape::inference(net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut blocks = 0;
    for b in net.pdfa_blocks() {
        let sources: Vec<_> = b
            .source_channels()
            .iter()
            .map(|&c| tape.constant(Tensor::from_shape_fn((1, c, 4, 4), |_| rng.random_range(-1.0..1.0))))
            .collect();
        let refs: Vec<_> = sources.iter().collect();
        let out = b.forward(&tape, &refs).map_err(|e| e.to_string())?;
        let expected = b.source_channels().iter().sum::<usize>() + b.layer_count() * cfg.growth_rate;
        ensure(out.shape()[1] == expected, || format!("{}: {} channels, expected {expected}", b.name, out.shape()[1]))?;
        blocks += 1;
    }
    let image = Array3::from_shape_fn((256, 256, 3), |_| rng.random_range(0.0f32..255.0));
    let hem = Array2::from_shape_fn((256, 256), |_| rng.random_range(0.0f32..1.0));
    let forward = Instant::now();
    let out = net.predict(&[(&image, &hem)]).map_err(|e| e.to_string())?.remove(0);
    let forward_s = forward.elapsed().as_secs_f64();
    for (name, m) in [("rgb", &out.rgb_prob), ("contour", &out.contour_prob), ("seg", &out.seg_prob)] {
        ensure(m.dim() == (256, 256), || format!("{name} map is {:?}", m.dim()))?;
        ensure(m.iter().all(|v| (0.0..=1.0).contains(v)), || format!("{name} map leaves [0, 1]"))?;
    }
    within(start.elapsed(), 30, "depth-4 check")?;
    Ok(format!("{blocks} blocks add layers x growth; 256x256 forward in {forward_s:.1} s gives three [0, 1] maps"))
}

// 5. watershed separation

fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

fn as_prob(b: &Array2<bool>) -> ProbabilityMap {
    b.mapv(|v| v as u8 as f64)
}

/// 4-connected components by repeated label propagation; independent of the BFS labeller.
fn propagate_components(mask: &Array2<bool>) -> LabelMap {
    let (h, w) = mask.dim();
    let mut lab = Array2::from_shape_fn((h, w), |(y, x)| if mask[[y, x]] { (y * w + x + 1) as u32 } else { 0 });
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if lab[[y, x]] == 0 {
                    continue;
                }
                let mut m = lab[[y, x]];
                for (ny, nx) in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
                    if ny < h && nx < w && lab[[ny, nx]] > 0 {
                        m = m.min(lab[[ny, nx]]);
                    }
                }
                if m < lab[[y, x]] {
                    lab[[y, x]] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

/// Same partition of the pixels up to renaming of the labels.
fn same_partition(a: &LabelMap, b: &LabelMap) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter().zip(b.iter()).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}

fn watershed_separation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = PostprocessParams::default();
    let (h, w) = (64, 80);
    let mut split = 0;
    for _ in 0..50 {
        let (r1, r2) = (rng.random_range(8.0..14.0), rng.random_range(8.0..14.0));
        let d = rng.random_range(0.55..0.85) * (r1 + r2);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (cy, cx) = (32.0 - 0.5 * d * angle.sin(), 40.0 - 0.5 * d * angle.cos());
        let (dy, dx) = (cy + d * angle.sin(), cx + d * angle.cos());
        let a = disk(h, w, cy, cx, r1);
        let b = disk(h, w, dy, dx, r2);
        // the shared lens goes to the disk whose boundary is farther away
        let truth = Array2::from_shape_fn((h, w), |(y, x)| {
            let fa = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / r1;
            let fb = ((y as f64 - dy).powi(2) + (x as f64 - dx).powi(2)).sqrt() / r2;
            match (a[[y, x]], b[[y, x]]) {
                (false, false) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (true, true) => if fa <= fb { 1 } else { 2 },
            }
        });
        let contour = as_prob(&mask_to_contours(&truth, DEFAULT_CONTOUR_THICKNESS));
        let fg = &a | &b;
        let out = segment_maps(&as_prob(&fg), &contour, &params).map_err(|e| e.to_string())?;
        split += (count_instances(&out) == 2) as usize;
    }
    ensure(split >= 48, || format!("only {split}/50 overlapping pairs split into two instances"))?;

    for case in 0..50 {
        let mut fg = Array2::from_elem((h, w), false);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        for _ in 0..rng.random_range(2..=6) {
            let r = rng.random_range(4.0..9.0);
            let (cy, cx) = (rng.random_range(r..h as f64 - r), rng.random_range(r..w as f64 - r));
            if placed.iter().all(|&(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() > pr + r + 3.0) {
                placed.push((cy, cx, r));
                fg = &fg | &disk(h, w, cy, cx, r);
            }
        }
        let truth = propagate_components(&fg);
        // nothing to split, so no contour signal: the seeds are the components themselves
        let out = segment_maps(&as_prob(&fg), &ProbabilityMap::zeros((h, w)), &params).map_err(|e| e.to_string())?;
        ensure(same_partition(&out, &truth), || format!("non-touching case {case} differs from connected components"))?;
    }
    Ok(format!("{split}/50 overlapping pairs split in two; 50/50 separate-blob images equal connected components"))
}

// 6. learnability

const OVERFIT_STEPS: usize = 100;
const OVERFIT_LR: f64 = 0.005;
const SMOOTHING_WINDOW: usize = 10;
const REPLAY_STEPS: usize = 10;

fn overfit_net() -> NetworkConfig {
    NetworkConfig {
        depth: 2,
        base_channels: 2,
        growth_rate: 2,
        input_size: 256,
        seg_raw_input: false,
    }
}

fn train_steps(batch: &[&AugmentedExample], steps: usize) -> Result<(Trainer, Vec<f64>), String> {
    let mut trainer =
        Trainer::new(overfit_net(), 0, LossWeights::default(), SegStLoss::Bce).map_err(|e| e.to_string())?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(trainer.step(batch, OVERFIT_LR).map_err(|e| e.to_string())?.losses.total);
    }
    Ok((trainer, losses))
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let examples = blob_examples(256);
    let batch: Vec<&AugmentedExample> = examples.iter().collect();
    let (trainer, losses) = train_steps(&batch, OVERFIT_STEPS)?;
    let pairs: Vec<_> = examples.iter().map(|e| (&e.image, &e.hematoxylin)).collect();
    let outputs = trainer.model().predict(&pairs).map_err(|e| e.to_string())?;
    let prob: Vec<f64> = outputs.iter().flat_map(|o| o.seg_prob.iter().copied()).collect();
    let target: Vec<f64> = examples.iter().flat_map(|e| e.seg_target.iter().map(|&b| b as u8 as f64)).collect();
    let dice = binary_dice(&prob, &target);
    ensure(dice > 0.9, || format!("training Dice {dice:.4} after {OVERFIT_STEPS} steps"))?;
    let smoothed: Vec<f64> =
        losses.chunks(SMOOTHING_WINDOW).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    ensure(smoothed.windows(2).all(|w| w[1] <= w[0]), || format!("smoothed loss rises: {smoothed:?}"))?;
    let (_, replay) = train_steps(&batch, REPLAY_STEPS)?;
    ensure(replay == losses[..REPLAY_STEPS], || "a second run with the same seed diverged".into())?;
    let blank = infer_image(trainer.model(), &Array3::from_elem((256, 256, 3), 255.0), &PostprocessParams::default())
        .map_err(|e| e.to_string())?;
    ensure(count_instances(&blank.labels) == 0, || "the blank image produced instances".into())?;
    within(start.elapsed(), 600, "overfitting run")?;
    Ok(format!(
        "{OVERFIT_STEPS} steps, Dice {dice:.4}, loss {:.3} -> {:.3} in {SMOOTHING_WINDOW}-step means, replay identical, {:.0} s",
        smoothed[0],
        smoothed[smoothed.len() - 1],
        start.elapsed().as_secs_f64()
    ))
}

// 7. protocol

fn toy_config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        data_root: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        epochs: 2,
        batch_size: 2,
        steps_per_epoch: 1,
        depth: 2,
        base_channels: 2,
        growth_rate: 2,
        input_size: 32,
        crop_size: 24,
        elastic_alpha: 2.0,
        ..TrainConfig::default()
    }
}

fn protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    write_corpus(&data, &ORGANS, 3, 0, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let samples = load_dataset(&data).map_err(|e| e.to_string())?;
    ensure(samples.len() == 30, || format!("{} samples", samples.len()))?;
    let split = make_folds(&samples).map_err(|e| e.to_string())?;
    ensure(split.len() == 10, || format!("{} folds", split.len()))?;
    let mut held = BTreeSet::new();
    let mut organs = BTreeSet::new();
    for f in &split.folds {
        ensure(f.holdout.len() == 3, || format!("{}: {} held out", f.organ, f.holdout.len()))?;
        ensure(f.holdout.iter().all(|id| cryoseg::data::organ_of(id) == f.organ), || format!("{} is not organ-pure", f.organ))?;
        ensure(f.train.len() == 27 && f.train.iter().all(|id| !f.holdout.contains(id)), || format!("{}: train overlaps", f.organ))?;
        ensure(organs.insert(f.organ.clone()), || format!("{} held out twice", f.organ))?;
        for id in &f.holdout {
            ensure(held.insert(id.clone()), || format!("{id} held out twice"))?;
        }
    }
    ensure(held.len() == 30, || "hold-out sets do not cover the corpus".into())?;

    let cfg = toy_config(&data, &dir.path().join("runs"));
    let outcome = crossval(&cfg).map_err(|e| e.to_string())?;
    ensure(outcome.folds.len() == 10, || format!("{} fold results", outcome.folds.len()))?;
    ensure(outcome.folds.iter().all(|f| f.record.epochs.len() == 2), || "a fold did not run two epochs".into())?;
    let table = |name: &str| outcome.tables.iter().find(|t| t.name == name).ok_or(format!("no {name} table"));
    let organ = table("organ_table")?;
    ensure(organ.header == ["Organ", "AJI baseline", "AJI measured", "PQ baseline", "PQ measured"], || {
        format!("organ header {:?}", organ.header)
    })?;
    ensure(organ.rows.len() == 11, || format!("{} organ rows", organ.rows.len()))?;
    let avg = organ.rows.last().unwrap();
    ensure(avg[0] == "Average" && avg[1] == "52.50" && avg[3] == "47.70", || format!("organ average row {avg:?}"))?;
    for (name, base) in [("fold_aji", "0.525"), ("fold_pq", "0.477")] {
        let t = table(name)?;
        ensure(t.header == ["Fold", "Baseline", "Measured"], || format!("{name} header {:?}", t.header))?;
        ensure(t.rows.len() == 11, || format!("{name}: {} rows", t.rows.len()))?;
        let last = t.rows.last().unwrap();
        ensure(last[0] == "AVERAGE" && last[1] == base, || format!("{name} average row {last:?}"))?;
    }
    let summary = table("summary")?;
    ensure(summary.rows[0][1] == "52.50" && summary.rows[0][2] == "47.70", || format!("summary {:?}", summary.rows[0]))?;
    for file in ["crossval_report.csv", "crossval.md", "organ_table.csv", "fold_aji.csv", "fold_pq.csv", "summary.csv"] {
        ensure(cfg.output_dir.join(file).is_file(), || format!("{file} missing"))?;
    }
    Ok(format!(
        "10 organ-pure hold-out triples; 2-epoch crossval wrote organ and fold tables, baseline {:.1}/{:.1}",
        BASELINE_AJI * 100.0,
        BASELINE_PQ * 100.0
    ))
}

// 8. command line

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cryoseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CRYOSEG_DEVICE")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("cryoseg {} exited with {}: {}", args[0], out.status, String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn command_line() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    cli(&["synth", "--out", &p("corpus"), "--organs", "10", "--per-organ", "3", "--seed", "3"])?;
    cli(&["prepare", "--data", &p("corpus"), "--out", &p("prepared")])?;
    let cfg = TrainConfig {
        folds_file: Some(dir.path().join("prepared").join("folds.json")),
        epochs: 1,
        ..toy_config(&dir.path().join("corpus"), &dir.path().join("runs"))
    };
    cfg.save(&dir.path().join("toy.toml")).map_err(|e| e.to_string())?;
    cli(&["train", "--config", &p("toy.toml"), "--fold", "0"])?;
    let ckpt = dir.path().join("runs").join("fold_0").join("best.ckpt");
    ensure(ckpt.is_file(), || "no checkpoint written".into())?;
    cli(&["infer", "--ckpt", &ckpt.to_string_lossy(), "--images", &p("corpus"), "--out", &p("pred")])?;
    cli(&[
        "evaluate",
        "--pred",
        &p("pred"),
        "--gt",
        &p("corpus"),
        "--out",
        &p("report.csv"),
        "--folds",
        &p("prepared/folds.json"),
    ])?;
    let rows = read_report(&dir.path().join("report.csv")).map_err(|e| e.to_string())?;
    let count = |k: RowKind| rows.iter().filter(|r| r.row_type == k).count();
    ensure(count(RowKind::Image) == 30, || format!("{} image rows", count(RowKind::Image)))?;
    ensure(count(RowKind::Overall) == 1 && count(RowKind::Reference) == 2, || "aggregate rows missing".into())?;
    ensure(rows.iter().all(|r| (0.0..=1.0).contains(&r.aji)), || "AJI outside [0, 1]".into())?;
    Ok(format!("synth, prepare, train, infer, evaluate exited 0; report has {} rows", rows.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("loss correctness", loss_gradients),
        ("stain math", stain_math),
        ("aggregation block bookkeeping", network_bookkeeping),
        ("watershed separation", watershed_separation),
        ("learnability smoke test", learnability),
        ("protocol fidelity", protocol),
        ("end-to-end command line", command_line),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}, {secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
