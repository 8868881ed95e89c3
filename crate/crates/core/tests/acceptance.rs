//! The acceptance gate: ten go/no-go checks covering exact augmentation
//! inversion, gradient fidelity, loss and sampler arithmetic, metric
//! correctness, determinism, and desk-scale training behavior.
//!
//! Each check prints one `[C#] PASS/FAIL` line (visible under
//! `cargo test --test acceptance -- --nocapture`) and fails its test on a
//! miss. Tolerances and floors are pinned here, next to the checks.

use std::path::PathBuf;
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use agsp_core::augment::{apply_geometric, invert_geometric, sample_aug};
use agsp_core::datamodel::generate_synthetic;
use agsp_core::losses::{AiOptions, ai_loss, seg_loss, seg_loss_with_grad, total_loss};
use agsp_core::metrics::MetricsAccumulator;
use agsp_core::model::checkpoint;
use agsp_core::sampler::{ConfidenceTracker, SamplerState, adaptive_scores};
use agsp_core::trainer::{self, TrainConfig, read_log};
use agsp_core::{ArchDescriptor, AugRecord, Dataset, GeometricOp, SegModel};

// ---- pinned tolerances and bounds ------------------------------------------

/// C1: 1,000 random geometric round trips must be bit-exact within this time.
const C1_RECORDS: usize = 1000;
const C1_BUDGET: Duration = Duration::from_secs(5);
/// C2: max relative error of analytic vs central-difference gradients.
const C2_MAX_REL_ERR: f64 = 1e-4;
const C2_BUDGET: Duration = Duration::from_secs(60);
/// C3/C4: closed-form arithmetic tolerances.
const EXACT_TOL: f64 = 1e-12;
const C3_TWO_PIXEL: f64 = 0.126_928;
const C3_TWO_PIXEL_TOL: f64 = 1e-6;
const C4_SCORES: [f64; 3] = [0.0, 0.6861, 1.0];
const C4_SCORES_TOL: f64 = 1e-4;
/// C5: total-variation bound between draw frequencies and probabilities.
const C5_DRAWS: u64 = 100_000;
const C5_TV_BOUND: f64 = 0.01;
const C5_BUDGET: Duration = Duration::from_secs(10);
/// C6: brute-force mIoU cross-check instances and hand-case tolerance.
const C6_INSTANCES: usize = 500;
const C6_HAND_TOL: f64 = 1e-9;
/// C7: two identically seeded 400-step runs, byte-equal logs.
const C7_BUDGET: Duration = Duration::from_secs(300);
/// C8: held-out mIoU the plain baseline must reach within 2,000 iterations.
/// Calibrated from the first complete run of this implementation (which
/// measured 0.8740) and committed as the regression floor.
const C8_MIOU_FLOOR: f64 = 0.85;
const C8_BUDGET: Duration = Duration::from_secs(900);
/// C9a: minimum ratio of rare-class selection frequency (adaptive) to the
/// rare class's appearance frequency under uniform image draws.
const C9A_MIN_RATIO: f64 = 3.0;

// ---- shared fixtures -------------------------------------------------------

struct Corpus {
    _dir: TempDir,
    train: PathBuf,
    eval: PathBuf,
}

/// The desk-scale corpus: 200 training and 50 held-out images, 64×64, with
/// class pixel shares of roughly 0.90/0.08/0.02.
static CORPUS: LazyLock<Corpus> = LazyLock::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");
    generate_synthetic(&train, 200, 64, &[0.90, 0.08, 0.02], 1).expect("train corpus");
    generate_synthetic(&eval, 50, 64, &[0.90, 0.08, 0.02], 2).expect("eval corpus");
    Corpus {
        _dir: dir,
        train,
        eval,
    }
});

struct Run {
    _dir: TempDir,
    out: PathBuf,
    best_miou: f64,
    elapsed: Duration,
}

fn train_run(cfg: &TrainConfig) -> Run {
    let corpus = &*CORPUS;
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("run");
    let start = Instant::now();
    let summary =
        trainer::fit(cfg, &corpus.train, &out, Some(&corpus.eval), false).expect("training run");
    Run {
        _dir: dir,
        out,
        best_miou: summary.best_miou.expect("eval ran"),
        elapsed: start.elapsed(),
    }
}

/// 2,000 iterations with both mechanisms disabled: plain two-branch training
/// with uniform image draws.
static BASELINE_RUN: LazyLock<Run> = LazyLock::new(|| {
    train_run(&TrainConfig {
        iterations: 2000,
        use_ai: false,
        use_as: false,
        eval_every: 500,
        ..TrainConfig::default()
    })
});

/// 2,000 iterations at the full default config: consistency loss (λ = 0.75)
/// plus adaptive class sampling.
static FULL_RUN: LazyLock<Run> = LazyLock::new(|| {
    train_run(&TrainConfig {
        iterations: 2000,
        eval_every: 500,
        ..TrainConfig::default()
    })
});

fn report(tag: &str, pass: bool, detail: String) {
    println!("[{tag}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "[{tag}] {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, n, n), |_| rng.random_range(-1.0..1.0))
}

// ---- the ten checks --------------------------------------------------------

#[test]
fn c1_geometric_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    for i in 0..C1_RECORDS {
        let n = rng.random_range(1..=64);
        let c = rng.random_range(1..=4);
        let x = rand_tensor(&mut rng, c, n);
        let rec = sample_aug(&mut rng, 0.7, 0.1).unwrap();
        let fwd = apply_geometric(&x, &rec.geometric).unwrap();
        let back = invert_geometric(&fwd, &rec.geometric).unwrap();
        assert_eq!(back, x, "round trip {i} lost bits ({n}×{n}, {rec:?})");
    }
    let elapsed = start.elapsed();
    report(
        "C1",
        elapsed < C1_BUDGET,
        format!("{C1_RECORDS} random geometric round trips bit-exact in {elapsed:.2?}"),
    );
}

#[test]
fn c2_analytic_gradients_match_central_differences() {
    let arch = ArchDescriptor {
        in_channels: 3,
        widths: vec![2, 3],
        strides: vec![1, 2],
        kernel: 3,
        feature_dim: 4,
        num_classes: 3,
    };
    let start = Instant::now();
    let mut model = SegModel::init(arch, 41).unwrap();
    assert!(model.params.param_count() <= 5000);

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0));
    let y = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..3u8));
    let rec = AugRecord {
        geometric: vec![GeometricOp::HFlip, GeometricOp::Rot90 { k: 3 }],
        photometric: None,
        seed: 0,
    };
    let opts = AiOptions::default();
    let base = model.params.to_flat();
    let h = 1e-5;

    // Analytic gradients of the plain branch, the consistency term alone
    // (difference of λ=1 and λ=0 total gradients), and the full objective.
    let seg_analytic = {
        let trace = model.forward(&x).unwrap();
        let seg = seg_loss_with_grad(&trace.logits, &y, None).unwrap();
        let zero_feat = Array3::zeros(trace.features.dim());
        model
            .backward(trace, &seg.d_logits, &zero_feat)
            .unwrap()
            .to_flat()
    };
    let with_lambda = |model: &SegModel, lambda: f64| {
        total_loss(model, &x, &y, None, &rec, lambda, &opts).unwrap()
    };
    let ai_analytic: Vec<f64> = {
        let g1 = with_lambda(&model, 1.0).grads.to_flat();
        let g0 = with_lambda(&model, 0.0).grads.to_flat();
        g1.iter().zip(&g0).map(|(a, b)| a - b).collect()
    };
    let tot_analytic = with_lambda(&model, 0.75).grads.to_flat();

    let mut max_rel = 0.0f64;
    let mut check = |analytic: f64, numeric: f64, what: &str, i: usize| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            rel <= C2_MAX_REL_ERR,
            "{what} param {i}: analytic {analytic} vs numeric {numeric} (rel {rel})"
        );
        max_rel = max_rel.max(rel);
    };

    for i in 0..base.len() {
        let at = |model: &mut SegModel, v: f64| {
            let mut p = base.clone();
            p[i] = v;
            model.params.load_flat(&p);
        };
        let seg_at = |model: &SegModel| {
            seg_loss(&model.forward(&x).unwrap().logits, &y, None).unwrap()
        };
        let ai_at = |model: &SegModel| {
            let f_orig = model.forward(&x).unwrap().features;
            let x_aug = apply_geometric(&x, &rec.geometric).unwrap();
            let f_aug = model.forward(&x_aug).unwrap().features;
            ai_loss(&f_orig, &f_aug, &rec).unwrap()
        };

        at(&mut model, base[i] + h);
        let (seg_up, ai_up, tot_up) = (
            seg_at(&model),
            ai_at(&model),
            with_lambda(&model, 0.75).report.l_tot,
        );
        at(&mut model, base[i] - h);
        let (seg_dn, ai_dn, tot_dn) = (
            seg_at(&model),
            ai_at(&model),
            with_lambda(&model, 0.75).report.l_tot,
        );
        at(&mut model, base[i]);

        check(seg_analytic[i], (seg_up - seg_dn) / (2.0 * h), "seg", i);
        check(ai_analytic[i], (ai_up - ai_dn) / (2.0 * h), "consistency", i);
        check(tot_analytic[i], (tot_up - tot_dn) / (2.0 * h), "total", i);
    }
    let elapsed = start.elapsed();
    report(
        "C2",
        elapsed < C2_BUDGET,
        format!(
            "gradients of all three objectives within {C2_MAX_REL_ERR:.0e} of central \
             differences over {} parameters (max rel {max_rel:.2e}) in {elapsed:.2?}",
            base.len()
        ),
    );
}

#[test]
fn c3_loss_value_oracles() {
    // Uniform logits cost exactly ln |C|.
    let uniform = seg_loss(
        &Array3::zeros((4, 2, 2)),
        &Array2::from_elem((2, 2), 3u8),
        None,
    )
    .unwrap();
    assert!((uniform - 4.0f64.ln()).abs() < EXACT_TOL, "uniform {uniform}");

    // Two pixels, each with a +2 logit margin for its true class.
    let logits = Array3::from_shape_vec((2, 1, 2), vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    let y = Array2::from_shape_vec((1, 2), vec![0u8, 1u8]).unwrap();
    let two_pixel = seg_loss(&logits, &y, None).unwrap();
    assert!(
        (two_pixel - C3_TWO_PIXEL).abs() < C3_TWO_PIXEL_TOL,
        "two-pixel {two_pixel}"
    );

    // A feature map compared against its own transform is perfectly aligned.
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..50 {
        let f = rand_tensor(&mut rng, 3, 6);
        let rec = sample_aug(&mut rng, 0.8, 0.1).unwrap();
        let f_aug = apply_geometric(&f, &rec.geometric).unwrap();
        assert_eq!(ai_loss(&f, &f_aug, &rec).unwrap(), 0.0);
    }
    report(
        "C3",
        true,
        format!(
            "uniform = ln|C| ±{EXACT_TOL:.0e}, two-pixel = {two_pixel:.6} \
             ±{C3_TWO_PIXEL_TOL:.0e}, alignment identity exactly 0"
        ),
    );
}

#[test]
fn c4_sampler_arithmetic_worked_examples() {
    let scores = adaptive_scores(&[1.0, 0.0899, 0.0], &[1.0, 1.0, 1.0], 4.0);
    for (c, want) in C4_SCORES.iter().enumerate() {
        assert!(
            (scores[c] - want).abs() < C4_SCORES_TOL,
            "score {c}: {} vs {want}",
            scores[c]
        );
    }

    let mut tracker = ConfidenceTracker::with_conf(vec![0.9], 0.968, 0).unwrap();
    tracker.update(&[Some(0.5)]).unwrap();
    let ema = tracker.conf()[0];
    assert!((ema - 0.8872).abs() < EXACT_TOL, "EMA {ema}");

    // Step response from 0 under constant full confidence: 1 − α^k.
    let mut step = ConfidenceTracker::with_conf(vec![0.0], 0.968, 0).unwrap();
    for k in 1..=100u32 {
        step.update(&[Some(1.0)]).unwrap();
        let want = 1.0 - 0.968f64.powi(k as i32);
        assert!(
            (step.conf()[0] - want).abs() < EXACT_TOL,
            "step {k}: {} vs {want}",
            step.conf()[0]
        );
    }
    report(
        "C4",
        true,
        format!(
            "scores [0, 0.6861, 1] ±{C4_SCORES_TOL:.0e}; EMA 0.8872 and 1−α^k \
             (k ≤ 100) ±{EXACT_TOL:.0e}"
        ),
    );
}

#[test]
fn c5_draw_frequencies_match_class_probabilities() {
    let start = Instant::now();
    let members = vec![vec![0, 1], vec![2, 3, 4], vec![5]];
    let mut state = SamplerState::new(
        vec![1.0, 0.0899, 0.0],
        members,
        4.0,
        0.968,
        0.01,
        true,
        105,
    )
    .unwrap();
    let p = state.class_probabilities().unwrap();
    let mut counts = vec![0u64; p.len()];
    for _ in 0..C5_DRAWS {
        let (class, _) = state.sample().unwrap();
        counts[class] += 1;
    }
    let tv: f64 = p
        .iter()
        .zip(&counts)
        .map(|(pc, k)| (pc - *k as f64 / C5_DRAWS as f64).abs())
        .sum::<f64>()
        / 2.0;
    let elapsed = start.elapsed();
    report(
        "C5",
        tv < C5_TV_BOUND && elapsed < C5_BUDGET,
        format!(
            "{C5_DRAWS} draws within TV {tv:.4} (< {C5_TV_BOUND}) of analytic \
             probabilities in {elapsed:.2?}"
        ),
    );
}

#[test]
fn c6_miou_matches_brute_force_confusion() {
    // Independent oracle: raw confusion counting with per-class IoU and the
    // same absent-class conventions.
    fn brute_force(
        pred: &Array2<u8>,
        y: &Array2<u8>,
        valid: Option<&Array2<bool>>,
        nc: usize,
        strict: bool,
    ) -> f64 {
        let mut conf = vec![vec![0u64; nc]; nc];
        for ((i, j), p) in pred.indexed_iter() {
            if valid.is_none_or(|v| v[[i, j]]) {
                conf[y[[i, j]] as usize][*p as usize] += 1;
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..nc {
            let row: u64 = conf[c].iter().sum();
            let col: u64 = (0..nc).map(|r| conf[r][c]).sum();
            let inter = conf[c][c];
            let union = row + col - inter;
            if union > 0 {
                sum += inter as f64 / union as f64;
                n += 1;
            } else if strict {
                n += 1;
            }
        }
        sum / n as f64
    }

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for i in 0..C6_INSTANCES {
        let nc = rng.random_range(2..=4usize);
        let h = rng.random_range(1..=16usize);
        let w = rng.random_range(1..=16usize);
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0..nc as u8));
        let y = Array2::from_shape_fn((h, w), |_| rng.random_range(0..nc as u8));
        let mut valid = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() > 0.15);
        valid[[0, 0]] = true;
        let strict = rng.random::<bool>();

        let mut acc = MetricsAccumulator::new(nc);
        acc.accumulate(&pred, &y, Some(&valid)).unwrap();
        let got = acc.miou(strict).unwrap();
        let want = brute_force(&pred, &y, Some(&valid), nc, strict);
        assert!(
            (got - want).abs() < 1e-15,
            "instance {i}: {got} vs brute force {want}"
        );
    }

    // Hand case: pred [0,0,1,1] vs y [0,1,1,1] gives IoUs 1/2 and 2/3.
    let pred = Array2::from_shape_vec((1, 4), vec![0u8, 0, 1, 1]).unwrap();
    let y = Array2::from_shape_vec((1, 4), vec![0u8, 1, 1, 1]).unwrap();
    let mut acc = MetricsAccumulator::new(2);
    acc.accumulate(&pred, &y, None).unwrap();
    let hand = acc.miou(false).unwrap();
    assert!((hand - 7.0 / 12.0).abs() < C6_HAND_TOL, "hand case {hand}");
    report(
        "C6",
        true,
        format!(
            "{C6_INSTANCES} random instances match brute-force confusion; \
             hand case {hand:.5} ±{C6_HAND_TOL:.0e}"
        ),
    );
}

#[test]
fn c7_identically_seeded_runs_log_identically() {
    let corpus = &*CORPUS;
    let dir = TempDir::new().unwrap();
    let cfg = TrainConfig::default(); // 400 iterations, seed 0
    let start = Instant::now();
    trainer::fit(&cfg, &corpus.train, &dir.path().join("a"), None, false).unwrap();
    trainer::fit(&cfg, &corpus.train, &dir.path().join("b"), None, false).unwrap();
    let a = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    let elapsed = start.elapsed();
    report(
        "C7",
        a == b && elapsed < C7_BUDGET,
        format!(
            "two 400-step runs, {} log bytes each, byte-identical in {elapsed:.2?}",
            a.len()
        ),
    );
}

#[test]
fn c8_baseline_reaches_the_committed_miou_floor() {
    let run = &*BASELINE_RUN;
    report(
        "C8",
        run.best_miou >= C8_MIOU_FLOOR && run.elapsed < C8_BUDGET,
        format!(
            "baseline (no consistency loss, uniform draws) best held-out mIoU \
             {:.4} ≥ {C8_MIOU_FLOOR} within 2000 iterations ({:.1?})",
            run.best_miou, run.elapsed
        ),
    );
}

#[test]
fn c9a_adaptive_sampling_concentrates_on_the_rare_class() {
    let corpus = &*CORPUS;
    let rare = {
        let data = Dataset::load(&corpus.train, 4).unwrap();
        let counts = &data.index.pixel_counts;
        (0..counts.len()).min_by_key(|&c| counts[c]).unwrap() as u32
    };

    // Adaptive runs log the selected class per batch slot; uniform runs log
    // every class present in the drawn image, so its rare-class rate is the
    // chance a uniformly drawn image contains that class at all.
    let tally = |run: &Run, hit: &dyn Fn(&[u32]) -> bool| {
        let log = read_log(&run.out.join("metrics.jsonl")).unwrap();
        let mut hits = 0usize;
        let mut slots = 0usize;
        for rec in &log {
            for slot in &rec.sampled_classes {
                slots += 1;
                if hit(slot) {
                    hits += 1;
                }
            }
        }
        hits as f64 / slots as f64
    };
    let adaptive = tally(&FULL_RUN, &|slot| slot == [rare]);
    let uniform = tally(&BASELINE_RUN, &|slot| slot.contains(&rare));
    let ratio = adaptive / uniform;
    report(
        "C9a",
        ratio >= C9A_MIN_RATIO,
        format!(
            "rare class {rare} selected in {:.1}% of adaptive slots vs present in \
             {:.1}% of uniform draws: {ratio:.2}× (need ≥ {C9A_MIN_RATIO}×)",
            100.0 * adaptive,
            100.0 * uniform
        ),
    );
}

#[test]
fn c9b_consistency_training_lowers_held_out_alignment_error() {
    let corpus = &*CORPUS;
    let with_ai = checkpoint::load(&FULL_RUN.out.join("final.agsp")).unwrap();
    let without = checkpoint::load(&BASELINE_RUN.out.join("final.agsp")).unwrap();
    let eval = Dataset::load(&corpus.eval, 4).unwrap();

    // Fresh quarter-turn rotations, unseen by either run.
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mean = |model: &SegModel, rng: &mut ChaCha8Rng| -> f64 {
        let mut total = 0.0;
        for sample in &eval.samples {
            let k = rng.random_range(1..=3u8);
            let rec = AugRecord {
                geometric: vec![GeometricOp::Rot90 { k }],
                photometric: None,
                seed: 0,
            };
            let f = model.forward(&sample.rgb).unwrap().features;
            let x_rot = apply_geometric(&sample.rgb, &rec.geometric).unwrap();
            let f_rot = model.forward(&x_rot).unwrap().features;
            total += ai_loss(&f, &f_rot, &rec).unwrap();
        }
        total / eval.samples.len() as f64
    };
    let seed = rng.next_u64();
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
    let loss_ai = mean(&with_ai, &mut rng_a);
    let loss_base = mean(&without, &mut rng_b);
    report(
        "C9b",
        loss_ai < loss_base,
        format!(
            "held-out alignment error under fresh rotations: {loss_ai:.5} with \
             consistency training vs {loss_base:.5} without"
        ),
    );
}

#[test]
fn c10_nir_expansion_preserves_outputs_bit_exactly() {
    let model3 = SegModel::init(ArchDescriptor::reference(3, 3), 110).unwrap();
    let model4 = model3.expand_input_nir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let x3 = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(0.0..1.0));
    let mut x4 = Array3::zeros((4, 16, 16));
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..16 {
                x4[[c, i, j]] = x3[[c, i, j]];
            }
        }
    }
    let t3 = model3.forward(&x3).unwrap();
    let t4 = model4.forward(&x4).unwrap();
    let logits_equal = t3.logits == t4.logits;
    let features_equal = t3.features == t4.features;
    report(
        "C10",
        logits_equal && features_equal,
        "a 4-channel expansion fed zero NIR reproduces the 3-channel model's \
         activations bit for bit"
            .into(),
    );
}
