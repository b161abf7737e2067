//! Acceptance suite. Each criterion is its own test and writes one
//! `criterion N ...: PASS|FAIL` line straight to stdout so the summary
//! survives output capture.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textseg::autodiff::Tape;
use textseg::checkpoint::{transfer_init, Checkpoint};
use textseg::crf::{apply_crf, meanfield, CrfConfig, RelabelPolicy};
use textseg::datasynth::{build_dataset, generate, Sample, SourcePool, Split, SynthConfig};
use textseg::gradcheck::{run_suite, GradcheckOptions};
use textseg::labelcodec::{
    collapse_to_three, decode_gt, encode_gt, expand_overlap, Class, LabelMap, LabelMode, OverlapPolicy,
};
use textseg::losses::{
    ce_loss, dice_loss, focal_loss, fusion_loss, soft_counts, wce_loss, weighted_dice_loss, weighted_focal_loss,
    ClassWeights, LossKind, LossSpec, DEFAULT_DICE_SMOOTH,
};
use textseg::metrics::{confusion, iou, mean_iou, ConfusionCounts, IouAccumulator, EVAL_CLASSES};
use textseg::models::{Architecture, FfpConfig, Model, Network, SspConfig};
use textseg::nn::Mode;
use textseg::trainer::{train, TrainConfig};
use textseg::Tensor;

fn report(n: usize, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} {name}: {verdict} ({detail})");
    let _ = out.flush();
    assert!(passed, "criterion {n} {name} failed: {detail}");
}

fn random_probs(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let mut t = Tensor::from_fn(dims, |_| rng.random_range(0.05..1.0));
    for s in 0..n {
        for i in 0..hw {
            let z: f64 = (0..c).map(|k| t.data()[(s * c + k) * hw + i]).sum();
            for k in 0..c {
                t.data_mut()[(s * c + k) * hw + i] /= z;
            }
        }
    }
    t
}

fn random_labels(rng: &mut ChaCha8Rng, w: u32, h: u32, mode: LabelMode) -> LabelMap {
    let n = mode.classes();
    let classes = (0..w * h).map(|_| Class::from_index(rng.random_range(0..n)).unwrap()).collect();
    LabelMap::new(w, h, mode, classes).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let rep = run_suite(&GradcheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let mut problems = Vec::new();
    let primitives = [
        "conv2d",
        "batchnorm",
        "relu",
        "maxpool2",
        "upsample2",
        "concat_channels",
        "softmax_channels",
        "add",
    ];
    let losses = LossKind::ALL.map(|k| format!("loss_{}", k.name()));
    for name in primitives.iter().map(|s| s.to_string()).chain(losses).chain(["mfm_end_to_end".to_string()]) {
        match rep.get(&name) {
            None => problems.push(format!("{name} missing")),
            Some(c) if c.checked == 0 => problems.push(format!("{name} checked nothing")),
            Some(_) => {}
        }
    }
    for c in &rep.checks {
        let tol = if c.name == "mfm_end_to_end" { END_TO_END_TOL } else { PRIMITIVE_TOL };
        if !(c.max_rel_err <= tol) {
            problems.push(format!("{} err {:.2e} > {tol:.0e}", c.name, c.max_rel_err));
        }
    }
    if elapsed >= GRADCHECK_BUDGET {
        problems.push(format!("runtime {:.1}s ≥ 60s", elapsed.as_secs_f64()));
    }
    let worst = rep.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    report(
        1,
        "gradient suite",
        problems.is_empty(),
        &format!(
            "{} checks, worst rel err {worst:.2e}, {:.1}s{}{}",
            rep.checks.len(),
            elapsed.as_secs_f64(),
            if problems.is_empty() { "" } else { "; " },
            problems.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Architecture conformance

#[test]
fn criterion_2_architecture() {
    let mut problems = Vec::new();

    let ffp = Model::<f32>::new(&Architecture::Ffp(FfpConfig::standard(4)), 0).unwrap();
    let Network::Ffp(net) = ffp.network() else { unreachable!() };
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 8, 8], 0.5));
    let out = net.forward(&mut tape, ffp.store(), x, Mode::Eval).unwrap();
    let stages: Vec<usize> = out.stages.iter().map(|&v| tape.value(v).dims()[1]).collect();
    if stages != [67, 131, 195, 259] {
        problems.push(format!("FFP stages {stages:?}"));
    }
    let final_dims = tape.value(out.logits).dims().to_vec();
    if final_dims != [1, 4, 8, 8] {
        problems.push(format!("FFP output {final_dims:?}"));
    }

    for arch in [
        Architecture::Mfm { ffp: FfpConfig::standard(4), ssp: SspConfig::light(4) },
        Architecture::toy_mfm(4),
    ] {
        let m = Model::<f32>::new(&arch, 0).unwrap();
        let Network::Mfm(net) = m.network() else { unreachable!() };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 16, 16], 0.5));
        let out = net.forward(&mut tape, m.store(), x, Mode::Eval).unwrap();
        let concat = tape.value(out.concat).dims().to_vec();
        if concat != [1, 8, 16, 16] {
            problems.push(format!("MFM concat {concat:?}"));
        }
        let logits = tape.value(out.logits).dims().to_vec();
        if logits != [1, 4, 16, 16] {
            problems.push(format!("MFM output {logits:?}"));
        }
    }
    report(
        2,
        "architecture",
        problems.is_empty(),
        &format!("FFP stages {stages:?}, MFM concat 8 channels{}", problems.iter().map(|p| format!("; {p}")).collect::<String>()),
    );
}

// ---------------------------------------------------------------------------
// 3. Loss identities

const IDENTITY_TOL: f64 = 1e-12;
const PERFECT_TOL: f64 = 1e-4;

fn one_hot(labels: &[usize], classes: usize, h: usize, w: usize) -> Tensor<f64> {
    let n = labels.len() / (h * w);
    Tensor::from_fn(&[n, classes, h, w], |idx| {
        let i = idx % (h * w);
        let c = (idx / (h * w)) % classes;
        let s = idx / (classes * h * w);
        f64::from(u8::from(labels[s * h * w + i] == c))
    })
}

/// Class-mean F-score from soft counts, smoothed the same way as the dice loss.
fn f_score(pred: &Tensor<f64>, gt: &Tensor<f64>, weights: Option<&[f64]>, s: f64) -> f64 {
    let c = soft_counts(pred, gt).unwrap();
    let m = c.intersection.len();
    let mut total = 0.0;
    for k in 0..m {
        let prec = c.intersection[k] / (c.predicted[k] + s);
        let rec = c.intersection[k] / (c.actual[k] + s);
        total += weights.map_or(1.0, |w| w[k]) * 2.0 * prec * rec / (prec + rec + s);
    }
    total / m as f64
}

#[test]
fn criterion_3_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let classes = if trial % 2 == 0 { 4 } else { 3 };
        let (n, h, w) = (2, 5, 4);
        let pred = random_probs(&mut rng, &[n, classes, h, w]);
        let labels: Vec<usize> = (0..n * h * w).map(|_| rng.random_range(0..classes)).collect();
        let gt = one_hot(&labels, classes, h, w);
        let spec = LossSpec::new(LossKind::Fusion, classes).unwrap();

        let ce = ce_loss(&pred, &gt).unwrap();
        let pairs = [
            (focal_loss(&pred, &gt, 0.0).unwrap(), ce),
            (wce_loss(&pred, &gt, &ClassWeights::ones(classes)).unwrap(), ce),
            (
                fusion_loss(&pred, &gt, &spec).unwrap(),
                weighted_focal_loss(&pred, &gt, &spec.weights, spec.gamma).unwrap()
                    + wce_loss(&pred, &gt, &spec.weights).unwrap()
                    + weighted_dice_loss(&pred, &gt, &spec.weights, spec.dice_smooth).unwrap(),
            ),
            (
                dice_loss(&pred, &gt, DEFAULT_DICE_SMOOTH).unwrap(),
                1.0 - f_score(&pred, &gt, None, DEFAULT_DICE_SMOOTH),
            ),
            (
                weighted_dice_loss(&pred, &gt, &spec.weights, DEFAULT_DICE_SMOOTH).unwrap(),
                1.0 - f_score(&pred, &gt, Some(&spec.weights.weights), DEFAULT_DICE_SMOOTH),
            ),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }

    // Perfect prediction with every class present.
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let gt = one_hot(&labels, 4, 4, 4);
    let w4 = ClassWeights::four_class_default();
    let ce = ce_loss(&gt, &gt).unwrap();
    let dice = dice_loss(&gt, &gt, DEFAULT_DICE_SMOOTH).unwrap();
    let wd = weighted_dice_loss(&gt, &gt, &w4, DEFAULT_DICE_SMOOTH).unwrap();
    let perfect_ok = ce.abs() <= PERFECT_TOL && dice.abs() <= PERFECT_TOL && (wd - 0.75).abs() <= PERFECT_TOL;
    report(
        3,
        "loss identities",
        worst <= IDENTITY_TOL && perfect_ok,
        &format!("max identity gap {worst:.1e}; perfect CE {ce:.1e}, Dice {dice:.1e}, WD {wd:.6}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric oracle

fn pixel_set(map: &LabelMap, class: Class) -> BTreeSet<usize> {
    map.classes()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == class || (c == Class::Ov && matches!(class, Class::Ht | Class::Pt)))
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn criterion_4_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for pair in 0..200 {
        let mode = if pair % 4 == 3 { LabelMode::Three } else { LabelMode::Four };
        let pred = random_labels(&mut rng, 16, 16, mode);
        let gt = random_labels(&mut rng, 16, 16, LabelMode::Four);
        let counts: ConfusionCounts = confusion(&pred, &gt, None).unwrap();
        let mut oracle_ious = Vec::new();
        for c in EVAL_CLASSES {
            let (p, g) = (pixel_set(&pred, c), pixel_set(&gt, c));
            let tp = p.intersection(&g).count() as u64;
            let fp = p.difference(&g).count() as u64;
            let fn_ = g.difference(&p).count() as u64;
            let got = counts.get(c).unwrap();
            if (got.tp, got.fp, got.fn_) != (tp, fp, fn_) {
                mismatches.push(format!("pair {pair} {c:?} counts"));
            }
            let u = tp + fp + fn_;
            let oracle = (u > 0).then(|| tp as f64 / u as f64);
            if iou(&counts, c) != oracle {
                mismatches.push(format!("pair {pair} {c:?} IoU"));
            }
            oracle_ious.push(oracle);
        }
        let defined: Vec<f64> = oracle_ious.iter().flatten().copied().collect();
        let oracle_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let mean = mean_iou(&EVAL_CLASSES.map(|c| iou(&counts, c)));
        if mean != oracle_mean {
            mismatches.push(format!("pair {pair} mean IoU"));
        }
    }
    let row = mean_iou(&[Some(46.07), Some(42.18), Some(73.82)]).unwrap();
    let row_ok = format!("{row:.2}") == "54.02";
    report(
        4,
        "metric oracle",
        mismatches.is_empty() && row_ok,
        &format!("200 pairs, {} mismatches; table row mean {row:.2}", mismatches.len()),
    );
}

// ---------------------------------------------------------------------------
// 5. CRF oracle

const CRF_TOL: f64 = 1e-6;

/// Mean-field on two horizontally adjacent pixels, written out by hand:
/// the message to label `l` at pixel `i` enumerates every label `l'` of
/// the other pixel with Potts cost `[l ≠ l']`.
fn two_pixel_oracle(p: [[f64; 2]; 2], image: [u8; 2], cfg: &CrfConfig) -> [[f64; 2]; 2] {
    let gauss = |d2: f64, s: f64| (-d2 / (2.0 * s * s)).exp();
    let ks = gauss(1.0, cfg.spatial_sigma);
    let di = f64::from(image[0].abs_diff(image[1]));
    let kb = gauss(1.0, cfg.bilateral_sigma_xy) * gauss(di * di, cfg.bilateral_sigma_intensity);
    // A pixel has one neighbour, so per-kernel normalization divides each kernel by itself.
    let (ks, kb) = if cfg.normalize { (1.0, 1.0) } else { (ks, kb) };
    let k = cfg.spatial_weight * ks + cfg.bilateral_weight * kb;
    let unary = p.map(|px| px.map(|v| -v.max(1e-7).ln()));
    let softmax = |e: [f64; 2]| {
        let m = e[0].max(e[1]);
        let z = (e[0] - m).exp() + (e[1] - m).exp();
        [(e[0] - m).exp() / z, (e[1] - m).exp() / z]
    };
    let mut q = [softmax(unary[0].map(|u| -u)), softmax(unary[1].map(|u| -u))];
    for _ in 0..cfg.n_iters {
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            let j = 1 - i;
            let mut energy = [0.0; 2];
            for l in 0..2 {
                let mut pairwise = 0.0;
                for lp in 0..2 {
                    if lp != l {
                        pairwise += k * q[j][lp];
                    }
                }
                energy[l] = -unary[i][l] - pairwise;
            }
            next[i] = softmax(energy);
        }
        q = next;
    }
    q
}

#[test]
fn criterion_5_crf_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let a: f64 = rng.random_range(0.05..0.95);
        let b: f64 = rng.random_range(0.05..0.95);
        let p = [[a, 1.0 - a], [b, 1.0 - b]];
        let image = [rng.random::<u8>(), rng.random::<u8>()];
        let cfg = CrfConfig {
            n_iters: 1 + trial % 12,
            spatial_sigma: rng.random_range(0.5..4.0),
            bilateral_sigma_xy: rng.random_range(0.5..4.0),
            bilateral_sigma_intensity: rng.random_range(5.0..60.0),
            spatial_weight: rng.random_range(0.0..4.0),
            bilateral_weight: rng.random_range(0.0..4.0),
            normalize: trial % 2 == 0,
        };
        // Channel-major 1×2×1×2 tensor.
        let t = Tensor::from_vec(&[1, 2, 1, 2], vec![p[0][0], p[1][0], p[0][1], p[1][1]]).unwrap();
        let got = meanfield(&t, &image, &cfg).unwrap();
        let want = two_pixel_oracle(p, image, &cfg);
        let want = [want[0][0], want[1][0], want[0][1], want[1][1]];
        for (g, w) in got.data().iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }

    let mut noop_ok = true;
    let zero = CrfConfig { spatial_weight: 0.0, bilateral_weight: 0.0, ..Default::default() };
    for _ in 0..20 {
        let p = random_probs(&mut rng, &[1, 4, 6, 6]);
        let img: Vec<u8> = (0..36).map(|_| rng.random()).collect();
        let out = apply_crf(&p, &img, &zero, RelabelPolicy::Unrestricted).unwrap();
        noop_ok &= out == LabelMap::from_probs(&p).unwrap();
    }

    let mut inclusion_ok = true;
    let mut relabeled = 0usize;
    for _ in 0..100 {
        let p = random_probs(&mut rng, &[1, 4, 8, 8]);
        let img: Vec<u8> = (0..64).map(|_| rng.random()).collect();
        let pre = LabelMap::from_probs(&p).unwrap();
        let post = apply_crf(&p, &img, &CrfConfig::default(), RelabelPolicy::Crfh).unwrap();
        let (a, b) = (expand_overlap(&pre).unwrap(), expand_overlap(&post).unwrap());
        for i in 0..a.ht.len() {
            inclusion_ok &= (!a.ht[i] || b.ht[i]) && (!a.pt[i] || b.pt[i]);
        }
        relabeled += pre.classes().iter().zip(post.classes()).filter(|(x, y)| x != y).count();
    }
    report(
        5,
        "crf oracle",
        worst <= CRF_TOL && noop_ok && inclusion_ok,
        &format!(
            "two-pixel max err {worst:.1e}; zero-pairwise no-op {noop_ok}; CRFH inclusion {inclusion_ok} ({relabeled} pixels relabeled)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Four-class benefit on overlap pixels

const BENEFIT_SEEDS: [u64; 3] = [0, 1, 2];
const BENEFIT_EPOCHS: usize = 30;
const BENEFIT_LR: f64 = 3e-3;
const BENEFIT_BUDGET: Duration = Duration::from_secs(30 * 60);

fn toy_splits(seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let cfg = SynthConfig { seed, ..SynthConfig::toy() };
    let pool = SourcePool::procedural(cfg.printed_sources, cfg.handwritten_sources, cfg.size, seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (r, s) in generate(&pool, &cfg).unwrap() {
        match r.split {
            Split::Train => tr.push(s),
            Split::Val => va.push(s),
            Split::Test => te.push(s),
        }
    }
    (tr, va, te)
}

/// HT and PT IoU restricted to ground-truth OV pixels, pooled over `test`.
fn overlap_iou(classes: usize, seed: u64, data: &(Vec<Sample>, Vec<Sample>, Vec<Sample>)) -> (f64, f64) {
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(classes), seed).unwrap();
    let cfg = TrainConfig {
        epochs: BENEFIT_EPOCHS,
        lr0: BENEFIT_LR,
        seed,
        loss: LossSpec::new(LossKind::Fusion, classes).unwrap(),
        overlap_policy: OverlapPolicy::ToPt,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data.0, &data.1, &cfg, |_| {}).unwrap();
    out.best.load_into(model.store_mut()).unwrap();
    let mut acc = IouAccumulator::new();
    for s in &data.2 {
        let pred = LabelMap::from_probs(&model.predict(&s.input::<f32>()).unwrap()).unwrap();
        let region: Vec<bool> = s.labels.classes().iter().map(|&c| c == Class::Ov).collect();
        acc.add_region(&pred, &s.labels, Some(&region)).unwrap();
    }
    let rep = acc.report();
    (rep.iou(Class::Ht).unwrap_or(0.0), rep.iou(Class::Pt).unwrap_or(0.0))
}

#[test]
fn criterion_6_four_class_benefit() {
    let start = Instant::now();
    let (mut four, mut three) = ([0.0; 2], [0.0; 2]);
    let mut per_seed = Vec::new();
    for seed in BENEFIT_SEEDS {
        let data = toy_splits(seed);
        assert_eq!(data.0.len(), 64);
        let f = overlap_iou(4, seed, &data);
        let t = overlap_iou(3, seed, &data);
        per_seed.push(format!("seed {seed}: 4c HT {:.3} PT {:.3} / 3c HT {:.3} PT {:.3}", f.0, f.1, t.0, t.1));
        four[0] += f.0 / 3.0;
        four[1] += f.1 / 3.0;
        three[0] += t.0 / 3.0;
        three[1] += t.1 / 3.0;
    }
    let elapsed = start.elapsed();
    for line in &per_seed {
        let _ = writeln!(std::io::stdout().lock(), "  {line}");
    }
    report(
        6,
        "four-class benefit",
        four[0] > three[0] && four[1] > three[1] && elapsed < BENEFIT_BUDGET,
        &format!(
            "overlap-pixel IoU, mean of 3 seeds: HT 4c {:.4} vs 3c {:.4}; PT 4c {:.4} vs 3c {:.4}; {:.0}s",
            four[0],
            three[0],
            four[1],
            three[1],
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Overfit sanity

const OVERFIT_STEPS: usize = 500;
const OVERFIT_IOU: f64 = 0.90;
const SMOOTH_WINDOW: usize = 10;

#[test]
fn criterion_7_overfit() {
    let (train_set, _, _) = toy_splits(0);
    let samples: Vec<Sample> = train_set.into_iter().take(8).collect();
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 0).unwrap();
    let cfg = TrainConfig {
        epochs: OVERFIT_STEPS,
        max_steps: Some(OVERFIT_STEPS),
        lr_patience: OVERFIT_STEPS,
        ..TrainConfig::default()
    };
    let mut reached: Option<usize> = None;
    let mut steps = 0usize;
    let out = train(&mut model, &samples, &samples, &cfg, |e| {
        steps += 1;
        if reached.is_none() && e.val_mean_iou.is_some_and(|m| m >= OVERFIT_IOU) {
            reached = Some(steps);
        }
    })
    .unwrap();
    let windows: Vec<f64> = out
        .step_losses
        .chunks_exact(SMOOTH_WINDOW)
        .map(|w| w.iter().sum::<f64>() / SMOOTH_WINDOW as f64)
        .collect();
    let increases = windows.windows(2).filter(|p| p[1] > p[0]).count();
    let final_iou = out.log.last().and_then(|e| e.val_mean_iou).unwrap_or(0.0);
    report(
        7,
        "overfit sanity",
        out.step_losses.len() == OVERFIT_STEPS && reached.is_some() && increases == 0,
        &format!(
            "mean IoU ≥ {OVERFIT_IOU} at step {}; final {final_iou:.4}; smoothed loss {:.4} → {:.4} with {increases} increases",
            reached.map_or("never".into(), |s| s.to_string()),
            windows.first().copied().unwrap_or(f64::NAN),
            windows.last().copied().unwrap_or(f64::NAN),
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Determinism and round trips

fn dir_checksum(dir: &Path) -> u64 {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut h = DefaultHasher::new();
    for n in names {
        n.hash(&mut h);
        fs::read(dir.join(&n)).unwrap().hash(&mut h);
    }
    h.finish()
}

fn short_training(seed: u64, samples: &[Sample]) -> Vec<u8> {
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), seed).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, seed, ..TrainConfig::default() };
    let out = train(&mut model, samples, &samples[..1], &cfg, |_| {}).unwrap();
    out.last.to_bytes()
}

#[test]
fn criterion_8_determinism_and_round_trips() {
    let mut problems = Vec::new();
    let cfg = SynthConfig { train: 6, val: 2, test: 2, seed: 11, ..SynthConfig::toy() };
    let pool = SourcePool::procedural(cfg.printed_sources, cfg.handwritten_sources, cfg.size, cfg.seed);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&pool, &cfg, a.path()).unwrap();
    build_dataset(&pool, &cfg, b.path()).unwrap();
    let (sa, sb) = (dir_checksum(a.path()), dir_checksum(b.path()));
    if sa != sb {
        problems.push("synth checksums differ".to_string());
    }

    let samples: Vec<Sample> = generate(&pool, &cfg).unwrap().into_iter().take(4).map(|(_, s)| s).collect();
    let (ta, tb) = (short_training(5, &samples), short_training(5, &samples));
    if ta != tb {
        problems.push("training checkpoints differ".to_string());
    }

    let ckpt = Checkpoint::from_bytes(&ta).unwrap();
    let path = a.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    if reloaded != ckpt || reloaded.to_bytes() != ta {
        problems.push("checkpoint round trip not bit-exact".to_string());
    }
    let mut model = Model::<f32>::new(&Architecture::toy_mfm(4), 99).unwrap();
    reloaded.load_into(model.store_mut()).unwrap();
    if Checkpoint::from_store(model.store()).params != ckpt.params {
        problems.push("checkpoint load into model not bit-exact".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for mode in [LabelMode::Four, LabelMode::Three] {
        let labels = random_labels(&mut rng, 23, 17, mode);
        let gt_path = a.path().join("codec_gt.png");
        encode_gt(&labels).save(&gt_path).unwrap();
        let back = decode_gt(&image::open(&gt_path).unwrap().into_rgb8(), mode).unwrap();
        if back != labels {
            problems.push(format!("GT codec round trip failed for {mode:?}"));
        }
    }
    for s in &samples {
        let three = collapse_to_three(&s.labels, OverlapPolicy::ToHt).unwrap();
        if decode_gt(&encode_gt(&three), LabelMode::Three).unwrap() != three {
            problems.push("GT codec round trip failed for collapsed sample".to_string());
        }
    }

    let ssp_cfg = match Architecture::toy_mfm(4) {
        Architecture::Mfm { ssp, .. } => ssp,
        _ => unreachable!(),
    };
    let mut ssp = Model::<f32>::new(&Architecture::Ssp(ssp_cfg), 21).unwrap();
    let ssp_cfg_train = TrainConfig { epochs: 1, batch_size: 2, seed: 21, ..TrainConfig::default() };
    train(&mut ssp, &samples, &samples[..1], &ssp_cfg_train, |_| {}).unwrap();
    let ssp_path = a.path().join("ssp.ckpt");
    Checkpoint::from_store(ssp.store()).save(&ssp_path).unwrap();
    let source = Checkpoint::load(&ssp_path).unwrap();
    let mut mfm = Model::<f32>::new(&Architecture::toy_mfm(4), 22).unwrap();
    transfer_init(&mut mfm, &source).unwrap();
    let (Network::Ssp(alone), Network::Mfm(mixed)) = (ssp.network(), mfm.network()) else { unreachable!() };
    let mut identical = true;
    for s in &samples {
        let mut t1 = Tape::new();
        let x1 = t1.leaf(s.input::<f32>());
        let o1 = alone.forward(&mut t1, ssp.store(), x1, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(s.input::<f32>());
        let o2 = mixed.ssp.forward(&mut t2, mfm.store(), x2, Mode::Eval).unwrap();
        identical &= t1.value(o1.logits).data() == t2.value(o2.logits).data();
        identical &= t1.value(o1.bottleneck).data() == t2.value(o2.bottleneck).data();
    }
    if !identical {
        problems.push("SSP activations differ after transfer".to_string());
    }
    report(
        8,
        "determinism and round trips",
        problems.is_empty(),
        &format!("synth checksum {sa:016x}; {}", if problems.is_empty() { "all bit-exact".into() } else { problems.join("; ") }),
    );
}
