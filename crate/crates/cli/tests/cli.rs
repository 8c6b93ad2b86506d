use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use npt_core::evaluation::{distractor_embeddings, evaluate, EvalConfig};
use npt_core::training::load_checkpoint;
use npt_core::{Dataset, LossKind};

fn npt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", s(dir)];
    args.extend_from_slice(extra);
    npt(&args)
}

/// Small dataset plus a 2-epoch checkpoint in `dir`.
fn trained(dir: &Path) {
    let o = gen(
        dir,
        &[
            "--classes",
            "4",
            "--samples-per-class",
            "30",
            "--input-dim",
            "6",
        ],
    );
    assert_eq!(code(&o), 0);
    let ds = dir.join("dataset.csv");
    let o = npt(&[
        "train",
        "--dataset",
        s(&ds),
        "--epochs",
        "2",
        "--out",
        s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_defaults_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(a.path(), &[])), 0);
    assert_eq!(code(&gen(b.path(), &[])), 0);
    let bytes = fs::read(a.path().join("dataset.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.path().join("dataset.csv")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.starts_with("label,x0,"));
    assert_eq!(text.lines().count(), 1 + 10 * 100);
    let manifest = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = gen-data\n"));
    assert!(manifest.contains("dataset.csv\n"));
    assert!(manifest.contains("classes = 10\n"));
}

#[test]
fn gen_data_single_class_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = gen(d.path(), &["--classes", "1"]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("dataset.csv").exists());
}

#[test]
fn manifest_reproduces_run() {
    let a = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(a.path(), &["--seed", "5", "--sigma", "0.25"])), 0);
    let b = tempfile::tempdir().unwrap();
    let manifest = a.path().join("manifest.txt");
    let o = npt(&["gen-data", "--config", s(&manifest), "--out", s(b.path())]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(a.path().join("dataset.csv")).unwrap(),
        fs::read(b.path().join("dataset.csv")).unwrap()
    );
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    fs::write(&cfg, "classes = 3\nsamples-per-class = 4\n").unwrap();
    let o = npt(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--classes",
        "5",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(d.path().join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 4);
    fs::write(&cfg, "clases = 3\n").unwrap();
    assert_eq!(
        code(&npt(&[
            "gen-data",
            "--config",
            s(&cfg),
            "--out",
            s(d.path())
        ])),
        2
    );
}

#[test]
fn train_smoke_and_outputs() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(d.path(), &[])), 0);
    let ds = d.path().join("dataset.csv");
    let t = Instant::now();
    let o = npt(&[
        "train",
        "--dataset",
        s(&ds),
        "--epochs",
        "2",
        "--out",
        s(d.path()),
    ]);
    assert!(t.elapsed().as_secs_f64() < 10.0);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.path().join("epochs.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_loss,min_proxy_dist,seconds\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(d.path().join("checkpoint.nptc").exists());
}

#[test]
fn every_loss_name_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&gen(
            d.path(),
            &["--classes", "3", "--samples-per-class", "10"]
        )),
        0
    );
    let ds = d.path().join("dataset.csv");
    for kind in LossKind::ALL {
        let o = npt(&[
            "train",
            "--dataset",
            s(&ds),
            "--epochs",
            "1",
            "--loss",
            kind.name(),
            "--out",
            s(d.path()),
        ]);
        assert_eq!(
            code(&o),
            0,
            "{kind}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = npt(&[
        "train",
        "--dataset",
        s(&ds),
        "--loss",
        "contrastive",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_failure_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&gen(
            d.path(),
            &["--classes", "3", "--samples-per-class", "10"]
        )),
        0
    );
    let ds = d.path().join("dataset.csv");
    let out = s(d.path());
    let blowup = npt(&[
        "train",
        "--dataset",
        s(&ds),
        "--epochs",
        "2",
        "--lr",
        "1e300",
        "--momentum",
        "0",
        "--out",
        out,
    ]);
    assert_eq!(code(&blowup), 4);
    let bad_delta = npt(&["train", "--dataset", s(&ds), "--delta", "9", "--out", out]);
    assert_eq!(code(&bad_delta), 2);
    let missing = npt(&["train", "--dataset", "/nonexistent/data.csv", "--out", out]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn eval_matches_library_and_reports_rank1() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let ckpt = d.path().join("checkpoint.nptc");
    let ds_path = d.path().join("dataset.csv");
    let out = d.path().join("eval");
    let o = npt(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&ds_path),
        "--distractors",
        "50",
        "--pairs",
        "200",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.contains("\nrank1,"));

    let (model, bank) = load_checkpoint::<f64>(&ckpt).unwrap();
    let ds = Dataset::read_csv(&ds_path).unwrap();
    let report = evaluate(
        &model,
        bank.radius(),
        &ds.inputs,
        &ds.labels,
        &distractor_embeddings(50, model.output_dim(), bank.radius(), 3),
        &EvalConfig {
            pairs_per_kind: 200,
            seed: 3,
        },
    )
    .unwrap();
    assert_eq!(
        fs::read_to_string(out.join("report.csv")).unwrap(),
        report.report_csv()
    );
    assert_eq!(
        fs::read_to_string(out.join("roc.csv")).unwrap(),
        report.roc_csv()
    );

    let zero = npt(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&ds_path),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&zero), 0);
    assert!(String::from_utf8(zero.stdout)
        .unwrap()
        .contains("n_distractors,0\n"));
}

#[test]
fn eval_missing_checkpoint_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&gen(
            d.path(),
            &["--classes", "3", "--samples-per-class", "10"]
        )),
        0
    );
    let o = npt(&[
        "eval",
        "--checkpoint",
        s(&d.path().join("nope.nptc")),
        "--dataset",
        s(&d.path().join("dataset.csv")),
        "--out",
        s(d.path()),
    ]);
    assert_eq!(code(&o), 3);
    let corrupt = d.path().join("bad.nptc");
    fs::write(&corrupt, b"NPTC\x01\x00").unwrap();
    let o = npt(&[
        "eval",
        "--checkpoint",
        s(&corrupt),
        "--dataset",
        s(&d.path().join("dataset.csv")),
        "--out",
        s(d.path()),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn diagnose_writes_report() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    let o = npt(&[
        "diagnose",
        "--checkpoint",
        s(&d.path().join("checkpoint.nptc")),
        "--dataset",
        s(&d.path().join("dataset.csv")),
        "--min-samples",
        "5",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.path().join("diagnostics.csv")).unwrap();
    for key in [
        "gamma_bar",
        "d_n",
        "d_k",
        "min_proxy_pair_distance",
        "property1_violations",
    ] {
        assert!(text.contains(&format!("\n{key},")), "{key}");
    }
}

#[test]
fn sweep_rows_and_repeatability() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        npt(&[
            "sweep-delta",
            "--epochs",
            "2",
            "--seeds",
            "4",
            "--distractors",
            "100",
            "--pairs",
            "300",
            "--out",
            s(out),
        ])
    };
    assert_eq!(code(&args(a.path())), 0);
    assert_eq!(code(&args(b.path())), 0);
    let text = fs::read_to_string(a.path().join("sweep.csv")).unwrap();
    assert_eq!(
        text,
        fs::read_to_string(b.path().join("sweep.csv")).unwrap()
    );
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "delta,seed,rank1,final_loss,min_proxy_dist");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("0.0,4,"));
    assert!(lines[4].starts_with("1.5,4,"));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let o = npt(&["gradcheck", "--out", s(a.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let first = String::from_utf8(o.stdout).unwrap();
    assert_eq!(first.lines().count(), 5);
    assert!(first.lines().all(|l| l.ends_with(",pass")));

    let again = npt(&[
        "gradcheck",
        "--loss",
        "npt",
        "--trials",
        "20",
        "--seed",
        "7",
        "--out",
        s(a.path()),
    ]);
    let twice = npt(&[
        "gradcheck",
        "--loss",
        "npt",
        "--trials",
        "20",
        "--seed",
        "7",
        "--out",
        s(a.path()),
    ]);
    assert_eq!(again.stdout, twice.stdout);

    assert_eq!(
        code(&npt(&["gradcheck", "--trials", "0", "--out", s(a.path())])),
        2
    );
}
