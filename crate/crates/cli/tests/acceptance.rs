//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with the measured quantities (run with `--nocapture` to see
//! them). The two training fixtures are shared and serialized so parallel
//! test threads never train two models at once.

use std::sync::{LazyLock, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use yolos_cli::{checkpoint, commands, config::RunConfig, train};
use yolos_core::boxes::{BoxCxcywh, GroundTruthObject};
use yolos_core::eval::ApReport;
use yolos_core::loss::{assign, set_loss, LossWeights};
use yolos_core::model::{check_set_loss_gradients, Model, ModelConfig, Parameters, PeScheme};
use yolos_core::posembed::{interpolate_pe, PePlacement, PositionEmbedding};
use yolos_core::scaling::{flops, scale_uniform, HeadSpec, ScaleConfig};
use yolos_core::tensor::Tensor;

const G: f64 = 1e9;

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

fn train_slot() -> MutexGuard<'static, ()> {
    TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct TrainedFixture {
    _dir: TempDir,
    report: ApReport,
    model: Model,
    initial: Parameters,
    wall: Duration,
}

fn train_and_eval(detach: bool) -> TrainedFixture {
    let _slot = train_slot();
    let dir = TempDir::new().expect("tempdir");
    let mut cfg = RunConfig::default();
    cfg.detach_det_tokens = detach;
    cfg.out = dir.path().display().to_string();

    let started = Instant::now();
    let mut log_lines = 0usize;
    let result = train::train(&cfg, None, |_| log_lines += 1).expect("training");
    let wall = started.elapsed();
    assert_eq!(log_lines, cfg.optimizer.total_steps);

    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(&ckpt, &cfg.model, &result.model.params).expect("save");
    let report = commands::run_eval(&cfg, &ckpt, None).expect("eval");
    TrainedFixture {
        _dir: dir,
        report,
        model: result.model,
        initial: result.initial,
        wall,
    }
}

static TRAINED: LazyLock<TrainedFixture> = LazyLock::new(|| train_and_eval(false));
static DETACHED: LazyLock<TrainedFixture> = LazyLock::new(|| train_and_eval(true));

#[test]
fn criterion_01_published_flops_table_reproduces() {
    let started = Instant::now();
    let rows: [(&str, f64, f64); 5] = [
        ("ti", 1.2, 5.9),
        ("s", 4.5, 11.8),
        ("b", 17.6, 23.5),
        ("dwr", 4.6, 5.0),
        ("fast-dwr", 4.6, 8.8),
    ];
    let reports = commands::run_flops("ti", None, 1, None, true, None).expect("flops table");
    for ((name, total_g, ratio), (row_name, report)) in rows.iter().zip(&reports) {
        assert_eq!(name, row_name);
        let rel = (report.total / (total_g * G) - 1.0).abs();
        assert!(rel <= 0.05, "{name}: total {:.3}G vs {total_g}G ({rel:.3})", report.total / G);
        assert!(
            (report.ratio - ratio).abs() <= 0.15,
            "{name}: ratio {:.3} vs {ratio}",
            report.ratio
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "criterion 01 (published FLOPs table): PASS ({:?}, totals {:?})",
        elapsed,
        reports.iter().map(|(_, r)| (r.total / G * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_02_uniform_scaling_regenerates_dwr_config() {
    let started = Instant::now();
    let scaled = scale_uniform(&ScaleConfig::tiny(), (224, 224), 1, 4.6 * G).expect("scale");
    assert_eq!(scaled.config.depth, 19, "depth {}", scaled.config.depth);
    assert_eq!(scaled.config.width, 240, "width {}", scaled.config.width);
    assert_eq!(scaled.resolution, (272, 272), "resolution {:?}", scaled.resolution);
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    println!(
        "criterion 02 (dwr config regeneration): PASS (d=19, w=240, r=272, {:.3}G)",
        scaled.flops / G
    );
}

#[test]
fn criterion_03_detection_regime_ratio() {
    let r = flops(
        &ScaleConfig::small(),
        (800, 1104),
        100,
        Some(HeadSpec {
            det_tokens: 100,
            num_classes: 91,
        }),
    )
    .expect("flops");
    assert!(r.ratio >= 0.45 && r.ratio <= 0.70, "ratio {}", r.ratio);
    let rel = (r.total / (194.0 * G) - 1.0).abs();
    assert!(rel <= 0.20, "total {:.1}G vs 194G", r.total / G);
    println!(
        "criterion 03 (detection-regime ratio): PASS (ratio {:.3}, total {:.1}G)",
        r.ratio,
        r.total / G
    );
}

/// Exhaustive minimum over all full-cardinality assignments.
fn brute_force_min(cost: &Tensor) -> f64 {
    fn recurse(cost: &Tensor, row: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
        let n = cost.shape()[0];
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if row >= n || n - row < left {
            return;
        }
        if n - row - 1 >= left {
            recurse(cost, row + 1, used, left, acc, best);
        }
        for col in 0..cost.shape()[1] {
            if !used[col] {
                used[col] = true;
                recurse(cost, row + 1, used, left - 1, acc + cost.at2(row, col), best);
                used[col] = false;
            }
        }
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    let mut best = f64::INFINITY;
    recurse(cost, 0, &mut vec![false; m], n.min(m), 0.0, &mut best);
    best
}

#[test]
fn criterion_04_hungarian_equals_exhaustive_search() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA55);
    let mut checked = 0usize;
    for n in 1..=7 {
        for m in 1..=7 {
            for _ in 0..1000 {
                let data: Vec<f64> = (0..n * m).map(|_| rng.random_range(-10.0..10.0)).collect();
                let cost = Tensor::from_vec(vec![n, m], data).unwrap();
                let solved = yolos_core::hungarian::hungarian(&cost).expect("solve");
                let brute = brute_force_min(&cost);
                assert!(
                    (solved.total_cost - brute).abs() < 1e-9,
                    "{n}x{m}: {} vs {brute}",
                    solved.total_cost
                );
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!("criterion 04 (assignment oracle): PASS ({checked} matrices, 0 mismatches, {elapsed:?})");
}

#[test]
fn criterion_05_full_model_gradient_check() {
    let started = Instant::now();
    let cfg = ModelConfig {
        depth: 2,
        width: 16,
        heads: 2,
        patch_size: 4,
        det_tokens: 4,
        num_classes: 3,
        mlp_ratio: 2.0,
        pe_scheme: PeScheme::TypeI,
        pe_grid: (2, 2),
        image_channels: 3,
    };
    let mut worst_overall = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::init(cfg.clone(), &mut rng).unwrap();
        let image = Tensor::uniform(&[12, 12, 3], 0.0, 1.0, &mut rng);
        let gts = vec![
            GroundTruthObject {
                class_id: rng.random_range(0..3),
                bbox: BoxCxcywh::new(
                    rng.random_range(0.3..0.5),
                    rng.random_range(0.3..0.5),
                    rng.random_range(0.1..0.3),
                    rng.random_range(0.1..0.3),
                ),
            },
            GroundTruthObject {
                class_id: rng.random_range(0..3),
                bbox: BoxCxcywh::new(0.7, 0.7, 0.2, 0.25),
            },
        ];
        let worst =
            check_set_loss_gradients(&mut model, &image, &gts, &LossWeights::default(), 0.1, 1e-5, 1e-4)
                .expect("grad check");
        assert!(worst < 1e-4, "seed {seed}: worst rel err {worst}");
        worst_overall = worst_overall.max(worst);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "criterion 05 (gradient correctness): PASS (10 seeds, worst rel err {worst_overall:.2e}, {elapsed:?})"
    );
}

#[test]
fn criterion_06_set_loss_invariant_to_ground_truth_order() {
    fn permutations(values: &[usize]) -> Vec<Vec<usize>> {
        if values.len() <= 1 {
            return vec![values.to_vec()];
        }
        let mut out = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            let mut rest = values.to_vec();
            rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, v);
                out.push(p);
            }
        }
        out
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5E7);
    let weights = LossWeights::default();
    let mut worst_spread = 0.0f64;
    for _ in 0..100 {
        let tokens = 6;
        let logits = Tensor::uniform(&[tokens, 4], -2.0, 2.0, &mut rng);
        let mut boxes = Tensor::zeros(&[tokens, 4]);
        for i in 0..tokens {
            boxes.data_mut()[i * 4] = rng.random_range(0.2..0.8);
            boxes.data_mut()[i * 4 + 1] = rng.random_range(0.2..0.8);
            boxes.data_mut()[i * 4 + 2] = rng.random_range(0.05..0.3);
            boxes.data_mut()[i * 4 + 3] = rng.random_range(0.05..0.3);
        }
        let gts: Vec<GroundTruthObject> = (0..4)
            .map(|_| GroundTruthObject {
                class_id: rng.random_range(0..3),
                bbox: BoxCxcywh::new(
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                ),
            })
            .collect();

        let evaluate = |ordered: &[GroundTruthObject]| {
            let m = assign(&logits, &boxes, ordered, &weights).unwrap();
            let tape = yolos_core::autodiff::Tape::new();
            let (_, report) = set_loss(
                tape.leaf(logits.clone()),
                tape.leaf(boxes.clone()),
                ordered,
                &m,
                &weights,
                0.1,
            )
            .unwrap();
            report.total
        };
        let base = evaluate(&gts);
        for perm in permutations(&[0, 1, 2, 3]) {
            let reordered: Vec<GroundTruthObject> = perm.iter().map(|&i| gts[i]).collect();
            let total = evaluate(&reordered);
            worst_spread = worst_spread.max((total - base).abs());
            assert!((total - base).abs() <= 1e-9, "spread {}", (total - base).abs());
        }
    }
    println!("criterion 06 (set invariance): PASS (100 fixtures x 24 permutations, max spread {worst_spread:.2e})");
}

#[test]
fn criterion_07_permutation_equivariance_with_zero_pe() {
    let cfg = ModelConfig {
        depth: 3,
        width: 32,
        heads: 4,
        patch_size: 8,
        det_tokens: 8,
        num_classes: 3,
        mlp_ratio: 2.0,
        pe_scheme: PeScheme::TypeII,
        pe_grid: (4, 4),
        image_channels: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E9);
    let mut params = Parameters::init(&cfg, &mut rng).unwrap();
    params.pe_first.values = Tensor::zeros(params.pe_first.values.shape());
    let model = Model::new(cfg.clone(), params).unwrap();

    let image = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut rng);
    let base = model.forward(&image, false).unwrap();
    let seq = yolos_core::model::patchify(&image, cfg.patch_size).unwrap();
    let n = seq.shape()[0];
    let cols = seq.shape()[1];

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = Tensor::zeros(seq.shape());
        for (dst, &src) in perm.iter().enumerate() {
            let row = seq.row(src).to_vec();
            permuted.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&row);
        }
        let image2 = yolos_core::model::unpatchify(&permuted, 32, 32, 3, cfg.patch_size).unwrap();
        let out = model.forward(&image2, false).unwrap();
        let diff = base
            .boxes
            .max_abs_diff(&out.boxes)
            .max(base.class_logits.max_abs_diff(&out.class_logits));
        worst = worst.max(diff);
        assert!(diff <= 1e-6, "prediction drift {diff}");
    }
    println!("criterion 07 (permutation equivariance): PASS (20 permutations, worst drift {worst:.2e})");
}

#[test]
fn criterion_08_pe_interpolation_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEE);
    let pe = PositionEmbedding::random((5, 7), 4, 12, PePlacement::FirstLayerOnly, &mut rng);

    // Identity at equal grids: exact.
    let same = interpolate_pe(&pe, (5, 7)).unwrap();
    assert_eq!(same.values, pe.values);

    // Constant preservation: exact.
    let constant = PositionEmbedding::new((3, 3), 2, Tensor::full(&[11, 6], 1.25), PePlacement::FirstLayerOnly).unwrap();
    let scaled = interpolate_pe(&constant, (9, 4)).unwrap();
    assert!(scaled.values.data().iter().all(|&v| v == 1.25));

    // Linearity within 1e-12.
    let pe_b = PositionEmbedding::random((5, 7), 4, 12, PePlacement::FirstLayerOnly, &mut rng);
    let (alpha, beta) = (0.6, -1.7);
    let mut combo = pe.clone();
    for (c, (&x, &y)) in combo
        .values
        .data_mut()
        .iter_mut()
        .zip(pe.values.data().iter().zip(pe_b.values.data()))
    {
        *c = alpha * x + beta * y;
    }
    let ia = interpolate_pe(&pe, (8, 3)).unwrap();
    let ib = interpolate_pe(&pe_b, (8, 3)).unwrap();
    let ic = interpolate_pe(&combo, (8, 3)).unwrap();
    let mut linearity = 0.0f64;
    for ((&x, &y), &z) in ia.values.data().iter().zip(ib.values.data()).zip(ic.values.data()) {
        linearity = linearity.max((alpha * x + beta * y - z).abs());
    }
    assert!(linearity <= 1e-12, "linearity {linearity}");

    // Detection-token slots bit-identical.
    let resized = interpolate_pe(&pe, (13, 2)).unwrap();
    for e in 0..4 {
        let src = pe.values.row(35 + e);
        let dst = resized.values.row(26 + e);
        for (a, b) in src.iter().zip(dst) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // 2x2 -> 3x3 corner-aligned closed form.
    let grid = PositionEmbedding::new(
        (2, 2),
        0,
        Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        PePlacement::FirstLayerOnly,
    )
    .unwrap();
    let up = interpolate_pe(&grid, (3, 3)).unwrap();
    let expected = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
    for (a, e) in up.values.data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-15);
    }
    println!("criterion 08 (PE interpolation): PASS (identity/constants exact, linearity {linearity:.2e})");
}

#[test]
fn criterion_09_learnability_run() {
    let fixture = &*TRAINED;
    let ap50 = fixture.report.ap50.expect("AP defined");
    assert!(
        fixture.wall <= Duration::from_secs(30 * 60),
        "training took {:?}",
        fixture.wall
    );
    assert!(ap50 >= 0.80, "AP@0.5 = {ap50:.4}");
    println!(
        "criterion 09 (learnability): PASS (AP@0.5 {:.4}, mean AP {:.4}, trained in {:?})",
        ap50,
        fixture.report.mean_ap.unwrap(),
        fixture.wall
    );
}

#[test]
fn criterion_10_detached_tokens_near_parity() {
    let learnable = &*TRAINED;
    let detached = &*DETACHED;

    // Detached embeddings stay bit-equal to initialization.
    for (a, b) in detached
        .model
        .params
        .det_tokens
        .data()
        .iter()
        .zip(detached.initial.det_tokens.data())
    {
        assert_eq!(a.to_bits(), b.to_bits(), "detached tokens moved");
    }

    let ap_l = learnable.report.ap50.expect("AP defined");
    let ap_d = detached.report.ap50.expect("AP defined");
    assert!(
        (ap_l - ap_d).abs() <= 0.05,
        "learnable {ap_l:.4} vs detached {ap_d:.4}"
    );
    println!(
        "criterion 10 (detaching experiment): PASS (learnable {ap_l:.4}, detached {ap_d:.4}, gap {:.4})",
        (ap_l - ap_d).abs()
    );
}

#[test]
fn criterion_11_token_statistics_sign_level() {
    // Exact trivial cases.
    let xs = [0.5, 1.5, 2.5, 4.0];
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 0.2).collect();
    let r = yolos_core::analysis::pearson(&xs, &ys).unwrap().unwrap();
    assert!((r - 1.0).abs() <= 1e-12);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    let r = yolos_core::analysis::pearson(&xs, &neg).unwrap().unwrap();
    assert!((r + 1.0).abs() <= 1e-12);

    // Constructed monotone fixture: rho <= -0.9.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut kept = yolos_core::analysis::KeptPredictions::default();
    for t in 0..32 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
        kept.token_indices.push(t);
        kept.embeddings.push(vec![theta.cos(), theta.sin()]);
        kept.logits.push(vec![1.0, 0.0]);
        kept.centers.push((0.5 + 0.4 * theta.cos(), 0.5 + 0.4 * theta.sin()));
        kept.areas.push(0.02);
        kept.classes.push(0);
    }
    let pairs = yolos_core::analysis::token_pairs(&kept);
    let xs: Vec<f64> = pairs.iter().map(|p| p.cos_sim).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.center_dist).collect();
    let fixture_rho = yolos_core::analysis::pearson(&xs, &ys).unwrap().unwrap();
    assert!(fixture_rho <= -0.9, "fixture rho {fixture_rho}");

    // Toy-trained model: negative sign (magnitudes are full-scale numbers).
    let fixture = &*TRAINED;
    let cfg = RunConfig::default();
    let data = train::build_eval_dataset(&cfg).expect("eval data");
    let rho = yolos_core::analysis::geometry_correlation(&fixture.model, &data)
        .expect("correlation")
        .expect("enough prediction pairs");
    assert!(rho < 0.0, "geometry rho {rho}");
    println!(
        "criterion 11 (token statistics): PASS (trained rho {rho:.3}, fixture rho {fixture_rho:.3})"
    );
}

#[test]
fn criterion_12_determinism_and_persistence() {
    let _slot = train_slot();
    let mut cfg = RunConfig::default();
    cfg.optimizer.total_steps = 40;
    cfg.data.train_images = 64;
    cfg.optimizer.batch_size = 4;

    // Bit-identical loss logs for identical config + seed.
    let dir_a = TempDir::new().unwrap();
    cfg.out = dir_a.path().display().to_string();
    let ckpt_a = commands::run_train(&cfg, None).expect("train a");
    let dir_b = TempDir::new().unwrap();
    cfg.out = dir_b.path().display().to_string();
    let ckpt_b = commands::run_train(&cfg, None).expect("train b");
    let log_a = std::fs::read(dir_a.path().join("loss_log.jsonl")).unwrap();
    let log_b = std::fs::read(dir_b.path().join("loss_log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "loss logs differ");
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap(),
        "checkpoints differ"
    );

    // Round-trip preserves evaluation metrics exactly.
    let before = commands::run_eval(&cfg, &ckpt_b, None).expect("eval");
    let (mc, params) = checkpoint::load(&ckpt_b).expect("load");
    let resaved = dir_b.path().join("resaved.ckpt");
    checkpoint::save(&resaved, &mc, &params).expect("resave");
    let after = commands::run_eval(&cfg, &resaved, None).expect("eval resaved");
    assert_eq!(before.ap_per_iou, after.ap_per_iou);
    assert_eq!(before.mean_ap, after.mean_ap);

    // CRC corruption detected.
    let mut bytes = std::fs::read(&ckpt_b).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&resaved, &bytes).unwrap();
    let err = checkpoint::load(&resaved).unwrap_err().to_string();
    assert!(err.contains("CRC"), "{err}");

    println!("criterion 12 (determinism & persistence): PASS (bit-identical logs, exact metric round-trip, CRC detected)");
}
