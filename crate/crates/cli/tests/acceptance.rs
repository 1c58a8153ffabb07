//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL ...` line.
//!
//! Run with `cargo test -p dcsd-cli --release --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use dcsd_core::clustering::{kmeans_objective, spherical_kmeans, PseudoLabelTable};
use dcsd_core::config::{ProbeConfig, TrainConfig};
use dcsd_core::data::{make_synthetic_blobs, BlobSpec};
use dcsd_core::evaluation::{clustering_diagnostics, linear_probe};
use dcsd_core::gradcheck::check_objective_gradient;
use dcsd_core::losses::{ce_loss, hints_loss, kl_loss, total_loss};
use dcsd_core::model::{init_model, ModelConfig};
use dcsd_core::optim::lr_at;
use dcsd_core::tensor::{normalize_in_place, Tensor};
use dcsd_core::trainer::{train, MetricsRecord, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

// --- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_1_loss_oracles() {
    let tol = 1e-6;
    let mut failures = Vec::new();
    let mut closeness: Vec<(&str, f64, f64)> = Vec::new();
    let mut check = |name: &'static str, got: f64, want: f64| closeness.push((name, got, want));
    check(
        "ce uniform K=60",
        ce_loss(&[0.25; 60], 7).unwrap(),
        60f64.ln(),
    );
    check(
        "ce [2,0]",
        ce_loss(&[2.0, 0.0], 0).unwrap(),
        (1.0 + (-2.0f64).exp()).ln(),
    );
    let mut sat = vec![0.0; 10];
    sat[3] = 1000.0;
    let v = ce_loss(&sat, 3).unwrap();
    if v > 1e-6 {
        failures.push(format!("saturated ce {v}"));
    }
    check(
        "kl identical",
        kl_loss(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(),
        0.0,
    );
    // softmax([0, ln 3]) = [0.25, 0.75]
    check(
        "kl hand",
        kl_loss(&[0.0, 0.0], &[0.0, 3f64.ln()]).unwrap(),
        0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..8)
            .map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        for v in [kl_loss(&a, &b).unwrap(), kl_loss(&b, &a).unwrap()] {
            if v < -1e-9 {
                failures.push(format!("negative kl {v}"));
            }
        }
    }
    let t = |shape: &[usize], d: Vec<f64>| Tensor::from_vec(shape, d).unwrap();
    check(
        "hints identity",
        hints_loss(&t(&[1, 2], vec![1.0, 2.0]), &t(&[1, 2], vec![1.0, 2.0])).unwrap(),
        0.0,
    );
    check(
        "hints (1,1)",
        hints_loss(&t(&[1, 2], vec![1.0, 1.0]), &t(&[1, 2], vec![0.0, 0.0])).unwrap(),
        2.0,
    );
    check(
        "hints batch",
        hints_loss(
            &t(&[2, 2], vec![1.0, 1.0, 2.0, 0.0]),
            &t(&[2, 2], vec![0.0; 4]),
        )
        .unwrap(),
        3.0,
    );
    check(
        "total",
        total_loss(1.0, &[1.0, 1.0, 1.0], 0.6, 100.0, 0.9, 1e-5)
            .unwrap()
            .total,
        1.841,
    );
    let a = total_loss(1.0, &[5.0], 0.6, 100.0, 1.0, 1e-5)
        .unwrap()
        .total;
    let b = total_loss(1.0, &[50.0], 0.6, 100.0, 1.0, 1e-5)
        .unwrap()
        .total;
    check("alpha=1 ignores student ce", a, b);
    check(
        "reduces to L_c",
        total_loss(1.7, &[], 0.0, 0.0, 0.4, 0.0).unwrap().total,
        1.7,
    );
    for (name, got, want) in closeness {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    }
    let pass = failures.is_empty();
    report(
        1,
        pass,
        &format!("loss oracles within {tol:e} {failures:?}"),
    );
    assert!(pass);
}

// --- criterion 2 -----------------------------------------------------------

fn random_unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let row = t.row_mut(r);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        normalize_in_place(row);
    }
    t
}

/// Best objective over every partition into two nonempty clusters; for a
/// fixed partition the optimal centroid is the normalized member sum.
fn exhaustive_two_cluster_optimum(z: &Tensor) -> f64 {
    let n = z.rows();
    let d = z.row_len();
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut sums = vec![vec![0.0; d]; 2];
        for i in 0..n {
            let c = ((mask >> i) & 1) as usize;
            for (s, v) in sums[c].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        let obj: f64 = sums
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        best = best.max(obj);
    }
    best
}

#[test]
fn criterion_2_kmeans_matches_exhaustive_optimum() {
    let mut matches = 0;
    let mut never_above = true;
    let mut monotone = true;
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let z = random_unit_rows(8, 3, 100 + seed);
        let opt = exhaustive_two_cluster_optimum(&z);
        let km = spherical_kmeans(&z, 2, 100, seed).unwrap();
        let obj = kmeans_objective(&z, &km.centroids, &km.labels);
        never_above &= obj <= opt + 1e-9;
        gaps.push(format!("{:.3}", opt - obj));
        if (obj - opt).abs() <= 1e-9 {
            matches += 1;
        }
        monotone &= km.objective_history.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    }
    let pass = matches >= 8 && never_above && monotone;
    report(
        2,
        pass,
        &format!("optimum matched on {matches}/10 seeds, never above optimum: {never_above}, monotone: {monotone}, optimum minus objective per seed: {}", gaps.join(" ")),
    );
    assert!(pass);
}

// --- criterion 3 -----------------------------------------------------------

#[test]
fn criterion_3_gradient_check() {
    let cfg = TrainConfig {
        alpha: 0.9,
        lambda: 1e-5,
        model: ModelConfig {
            hidden_dim: 8,
            feature_dim: 4,
            backbone_width: 6,
            num_prototypes: 4,
            ..ModelConfig::tiny_mlp(3)
        },
        ..TrainConfig::default()
    };
    let (model, banks) = init_model(&cfg.model, 4).unwrap();
    let ds = make_synthetic_blobs(3, 2, 3, 3.0, 9).unwrap();
    let batch = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
    let labels: Vec<usize> = (0..ds.len()).map(|i| (i * 7 + 1) % 4).collect();
    let r = check_objective_gradient(&model, &banks, &batch, &labels, &cfg, 1e-5).unwrap();
    let size_ok = r.entries <= 500;
    let pass = size_ok && r.max_relative_error <= 1e-4;
    report(
        3,
        pass,
        &format!(
            "{} entries, max relative error {:.2e} (in {})",
            r.entries, r.max_relative_error, r.worst_tensor
        ),
    );
    assert!(pass);
}

// --- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_4_frozen_prototypes_stay_bit_identical() {
    let spec = BlobSpec::default();
    let train = spec.generate(0).unwrap();
    let mut cfg = TrainConfig::desk_scale(spec.dim);
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.frozen_proto_iters = 2 * train.len().div_ceil(cfg.batch_size) + 1;
    let mut t = Trainer::new(cfg, &train).unwrap();
    let mut identical = true;
    let mut encoder_moved = true;
    for _ in 0..2 {
        let table = t.assign().unwrap();
        let init: Vec<Tensor> = t.banks().iter().map(|b| b.prototypes().clone()).collect();
        let before = t.model().checksum();
        t.run_epoch(&table).unwrap();
        identical &= t.banks().iter().zip(&init).all(|(b, i)| {
            b.prototypes()
                .data()
                .iter()
                .zip(i.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        encoder_moved &= t.model().checksum() != before;
    }
    let pass = identical && encoder_moved;
    report(
        4,
        pass,
        &format!(
            "banks bit-identical to epoch centroids: {identical}, encoder updated: {encoder_moved}"
        ),
    );
    assert!(pass);
}

// --- shared desk-scale runs ------------------------------------------------

struct DeskRun {
    metrics: Vec<MetricsRecord>,
    table: PseudoLabelTable,
    test_accuracy: f64,
    nmi: f64,
}

fn desk_run(seed: u64, distill: bool) -> DeskRun {
    let spec = BlobSpec::default();
    let (train_set, test_set) = (spec.generate(0).unwrap(), spec.generate(1).unwrap());
    let mut cfg = TrainConfig::desk_scale(spec.dim);
    cfg.seed = seed;
    if !distill {
        cfg = cfg.without_distillation();
    }
    let out = train(cfg, &train_set, None).unwrap();
    let (model, banks) = out.checkpoint.restore().unwrap();
    let probe = linear_probe(
        &model,
        &banks,
        &train_set,
        &test_set,
        &ProbeConfig::default(),
    )
    .unwrap();
    let table = out.last_table.unwrap();
    let nmi = clustering_diagnostics(&table, train_set.labels().unwrap())
        .unwrap()
        .nmi;
    DeskRun {
        metrics: out.metrics,
        table,
        test_accuracy: probe.test_accuracy,
        nmi,
    }
}

fn desk_runs(distill: bool) -> &'static [DeskRun] {
    static DISTILLED: OnceLock<Vec<DeskRun>> = OnceLock::new();
    static BASELINE: OnceLock<Vec<DeskRun>> = OnceLock::new();
    let cell = if distill { &DISTILLED } else { &BASELINE };
    cell.get_or_init(|| SEEDS.iter().map(|&s| desk_run(s, distill)).collect())
}

/// First 1-based epoch whose value is at or below `threshold`, else `len + 1`.
fn epochs_to_threshold(values: &[f64], threshold: f64) -> usize {
    values
        .iter()
        .position(|&v| v <= threshold)
        .map_or(values.len() + 1, |i| i + 1)
}

fn column(run: &DeskRun, f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
    run.metrics.iter().map(f).collect()
}

// --- criterion 5 -----------------------------------------------------------

#[test]
fn criterion_5_desk_scale_end_to_end() {
    let runs = desk_runs(true);
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let ok = r.test_accuracy >= 0.95 && r.nmi >= 0.8;
        pass &= ok;
        details.push(format!(
            "seed {seed}: probe {:.3} nmi {:.3} sizes {:?}",
            r.test_accuracy, r.nmi, r.table.cluster_sizes
        ));
    }
    report(
        5,
        pass,
        &format!(
            "(probe >= 0.95 and NMI >= 0.8 on 3/3 seeds) {}",
            details.join("; ")
        ),
    );
    assert!(pass);
}

// --- criterion 6 -----------------------------------------------------------

#[test]
fn criterion_6_distillation_converges_no_slower() {
    let (dist, base) = (desk_runs(true), desk_runs(false));
    let mut e_dist = Vec::new();
    let mut e_base = Vec::new();
    let mut e_dist_teacher = Vec::new();
    for (d, b) in dist.iter().zip(base) {
        let base_total = column(b, |m| m.loss_total);
        let threshold = *base_total.last().unwrap();
        e_base.push(epochs_to_threshold(&base_total, threshold));
        e_dist.push(epochs_to_threshold(&column(d, |m| m.loss_total), threshold));
        e_dist_teacher.push(epochs_to_threshold(
            &column(d, |m| m.loss_teacher_ce),
            threshold,
        ));
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let pass = mean(&e_dist) <= mean(&e_base);
    report(
        6,
        pass,
        &format!(
            "mean epochs to baseline's final loss_total: distilled {:.2} {:?} vs baseline {:.2} {:?} (distilled teacher cross-entropy alone: {:.2} {:?})",
            mean(&e_dist),
            e_dist,
            mean(&e_base),
            e_base,
            mean(&e_dist_teacher),
            e_dist_teacher
        ),
    );
    assert!(pass);
}

#[test]
fn loss_trend_decreases_for_every_seed() {
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut ok = true;
    let mut details = Vec::new();
    for (name, runs) in [
        ("distilled", desk_runs(true)),
        ("baseline", desk_runs(false)),
    ] {
        for (seed, r) in SEEDS.iter().zip(runs) {
            let total = column(r, |m| m.loss_total);
            let (early, late) = (median(&total[..10]), median(&total[20..]));
            ok &= late < early;
            details.push(format!("{name} seed {seed}: {early:.3} -> {late:.3}"));
        }
    }
    println!(
        "property monotone-trend: {} median loss_total epochs 1-10 vs 21-30: {}",
        if ok { "PASS" } else { "FAIL" },
        details.join("; ")
    );
    assert!(ok);
}

#[test]
fn plotted_distilled_curve_at_or_below_baseline_late() {
    let (dist, base) = (desk_runs(true), desk_runs(false));
    let mut ok = true;
    let mut gaps = Vec::new();
    for (d, b) in dist.iter().zip(base) {
        let worst = (19..30)
            .map(|i| d.metrics[i].loss_total - b.metrics[i].loss_total)
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= worst <= 0.0;
        gaps.push(format!("{worst:+.4}"));
    }
    println!(
        "property plot-late-epochs: {} largest distilled-minus-baseline loss_total over epochs 20-30 per seed: {}",
        if ok { "PASS" } else { "FAIL" },
        gaps.join(", ")
    );
    assert!(ok);
}

// --- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_7_documented_long_run() {
    println!(
        "criterion 7: NOT RUN full CIFAR-10 reproduction (150 epochs, resnet18-style) is excluded from the suite; \
         run `criterion_7_cifar10_full_run` with --ignored and DCSD_CIFAR10_DIR set"
    );
}

/// Full reproduction: 38.00% +- 1.5 with distillation, 33.27% +- 1.5 without, distilled strictly higher.
#[test]
#[ignore]
fn criterion_7_cifar10_full_run() {
    let dir = std::env::var_os("DCSD_CIFAR10_DIR")
        .expect("set DCSD_CIFAR10_DIR to the CIFAR-10 binary directory");
    let splits = dcsd_core::data::load_data_dir(Path::new(&dir), None).unwrap();
    let test = splits.test.expect("test_batch.bin");
    let mut acc = Vec::new();
    for distill in [true, false] {
        let mut cfg = TrainConfig::default();
        if !distill {
            cfg = cfg.without_distillation();
        }
        let out = train(cfg, &splits.train, None).unwrap();
        let (model, banks) = out.checkpoint.restore().unwrap();
        acc.push(
            linear_probe(
                &model,
                &banks,
                &splits.train,
                &test,
                &ProbeConfig::default(),
            )
            .unwrap()
            .test_accuracy,
        );
    }
    let pass =
        (acc[0] - 0.38).abs() <= 0.015 && (acc[1] - 0.3327).abs() <= 0.015 && acc[0] > acc[1];
    report(
        7,
        pass,
        &format!("distilled {:.4}, baseline {:.4}", acc[0], acc[1]),
    );
    assert!(pass);
}

// --- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_8_cmd_train_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs");
    let bin = env!("CARGO_BIN_EXE_dcsd");
    let status = Command::new(bin)
        .args(["gen-blobs", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let cfg = dir.path().join("blobs.cfg");
    std::fs::write(
        &cfg,
        "backbone = tiny-mlp\nnum_prototypes = 6\nepochs = 30\n",
    )
    .unwrap();
    for run in ["a", "b"] {
        let out = Command::new(bin)
            .args(["train", "--seed", "7", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join(run))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let read = |run: &str, file: &str| std::fs::read(dir.path().join(run).join(file)).unwrap();
    let metrics_same = read("a", "metrics.csv") == read("b", "metrics.csv");
    let ckpt_same = read("a", "checkpoints/final.ckpt") == read("b", "checkpoints/final.ckpt");
    let pass = metrics_same && ckpt_same;
    report(
        8,
        pass,
        &format!("two cmd_train runs: metrics identical {metrics_same}, final checkpoints identical {ckpt_same}"),
    );
    assert!(pass);
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_9_lr_schedule_pins() {
    let cfg = TrainConfig::default();
    let spe = 50_000usize.div_ceil(cfg.batch_size);
    let warm = cfg.warmup_epochs * spe;
    let last = cfg.epochs * spe - 1;
    let start = lr_at(0, spe, &cfg);
    let peak = lr_at(warm, spe, &cfg);
    let end = lr_at(last, spe, &cfg);
    // Warmup line extended to the boundary step versus the cosine branch there.
    let slope = (cfg.base_lr - cfg.warmup_start_lr) / warm as f64;
    let left = lr_at(warm - 1, spe, &cfg) + slope;
    let pass = (start - 1e-6).abs() <= 1e-12
        && (peak - 6e-2).abs() <= 1e-12
        && (end - 3e-4).abs() <= 1e-9
        && (left - peak).abs() <= 1e-9;
    report(
        9,
        pass,
        &format!(
            "step 0 {start:e}, warmup end {peak:e}, last step {end:e}, boundary gap {:e}",
            (left - peak).abs()
        ),
    );
    assert!(pass);
}
