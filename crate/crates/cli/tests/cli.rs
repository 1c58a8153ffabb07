use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcsd_core::config::TrainConfig;
use tempfile::TempDir;

fn dcsd() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dcsd"));
    c.env_remove("DCSD_DATA").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn dcsd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small blob dataset and a short tiny-mlp config.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs");
    let o = run(dcsd()
        .args([
            "gen-blobs",
            "--n-per-class",
            "40",
            "--test-per-class",
            "20",
            "--out",
        ])
        .arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "# short run\nbackbone = tiny-mlp\nnum_prototypes = 6\nepochs = 4\nwarmup_epochs = 1\nbatch_size = 32\n",
    )
    .unwrap();
    (dir, data, cfg)
}

fn train(cfg: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    run(dcsd()
        .args(["train", "--config"])
        .arg(cfg)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .args(extra))
}

fn metrics_rows(run: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_data_is_a_usage_error() {
    let (dir, _, cfg) = fixture();
    let o = run(dcsd()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r")));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("--data") && err.contains("DCSD_DATA") && err.contains("Usage"),
        "{err}"
    );
}

#[test]
fn data_directory_from_environment() {
    let (dir, data, cfg) = fixture();
    let out = dir.path().join("r");
    let o = run(dcsd()
        .env("DCSD_DATA", &data)
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("checkpoints/final.ckpt").is_file());
}

#[test]
fn bad_flag_and_unknown_key_exit_1() {
    let (dir, data, cfg) = fixture();
    assert_eq!(
        run(dcsd().args(["train", "--bogus"])).status.code(),
        Some(1)
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 2\nwarp_factor = 9\n").unwrap();
    let o = train(&bad, &data, &dir.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warp_factor"), "{}", stderr(&o));
    let o = train(&cfg, &data, &dir.path().join("r2"), &["--set", "alpha=2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_directory_is_complete_and_precedence_holds() {
    let (dir, data, cfg) = fixture();
    let out = dir.path().join("r");
    let o = train(
        &cfg,
        &data,
        &out,
        &[
            "--set",
            "epochs=3",
            "--set",
            "seed=5",
            "--seed",
            "9",
            "--dump-assignments",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = TrainConfig::from_kv_str(&std::fs::read_to_string(out.join("config.cfg")).unwrap())
        .unwrap();
    assert_eq!(snap.epochs, 3);
    assert_eq!(snap.seed, 9);
    assert_eq!(snap.batch_size, 32);
    assert!(snap.dump_assignments);
    assert_eq!(metrics_rows(&out).len(), 3);
    for f in [
        "run_meta.json",
        "timings.csv",
        "checkpoints/final.ckpt",
        "checkpoints/epoch_002.ckpt",
        "checkpoints/epoch_003.ckpt",
        "assignments/epoch_001.csv",
        "reports/diagnostics.txt",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join("checkpoints/epoch_001.ckpt").exists());
    assert_eq!(
        String::from_utf8_lossy(&o.stdout).trim(),
        out.join("checkpoints/final.ckpt").display().to_string()
    );
}

#[test]
fn repeated_runs_are_identical() {
    let (dir, data, cfg) = fixture();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &data, &a, &["--seed", "3"]).status.success());
    assert!(train(&cfg, &data, &b, &["--seed", "3"]).status.success());
    for f in ["metrics.csv", "checkpoints/final.ckpt", "config.cfg"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn no_distill_zeroes_distillation_columns() {
    let (dir, data, cfg) = fixture();
    let out = dir.path().join("base");
    assert!(train(&cfg, &data, &out, &["--no-distill"]).status.success());
    for row in metrics_rows(&out) {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        // loss_total, loss_teacher_ce, loss_student_ce_sum, loss_kl, loss_hints
        assert_eq!(v[3], v[4]);
        assert_eq!((v[5], v[6], v[7]), (0.0, 0.0, 0.0));
    }
}

#[test]
fn probe_reports_accuracy_in_unit_interval() {
    let (dir, data, cfg) = fixture();
    let out = dir.path().join("r");
    assert!(train(&cfg, &data, &out, &[]).status.success());
    let reports = out.join("reports");
    let o = run(dcsd()
        .args(["probe", "--epochs", "20", "--checkpoint"])
        .arg(out.join("checkpoints/final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&reports));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(reports.join("probe.txt")).unwrap();
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("test_accuracy = "))
        .expect("test_accuracy line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(reports.join("probe.csv").is_file());
}

#[test]
fn missing_checkpoint_exits_2_naming_path() {
    let (dir, data, _) = fixture();
    let ck = dir.path().join("nope.ckpt");
    let o = run(dcsd()
        .args(["probe", "--checkpoint"])
        .arg(&ck)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("p")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
}

#[test]
fn plot_two_runs_and_reject_bad_files() {
    let (dir, data, cfg) = fixture();
    let (a, b) = (dir.path().join("distill"), dir.path().join("base"));
    assert!(train(&cfg, &data, &a, &[]).status.success());
    assert!(train(&cfg, &data, &b, &["--no-distill"]).status.success());
    let svg = dir.path().join("plots/loss.svg");
    let o = run(dcsd()
        .args(["plot", "--metrics"])
        .arg(a.join("metrics.csv"))
        .arg(b.join("metrics.csv"))
        .arg("--out")
        .arg(&svg));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    let table = std::fs::read_to_string(svg.with_extension("csv")).unwrap();
    assert!(table.starts_with("run,epoch,loss_total\n"));
    assert_eq!(
        table.lines().filter(|l| l.starts_with("distill,")).count(),
        4
    );
    assert_eq!(table.lines().filter(|l| l.starts_with("base,")).count(), 4);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = run(dcsd()
        .args(["plot", "--metrics"])
        .arg(&empty)
        .arg("--out")
        .arg(dir.path().join("e.svg")));
    assert_eq!(o.status.code(), Some(2));

    let mut text = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    text.push_str("5,oops\n");
    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, text).unwrap();
    let o = run(dcsd()
        .args(["plot", "--metrics"])
        .arg(&broken)
        .arg("--out")
        .arg(dir.path().join("b.svg")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
}
