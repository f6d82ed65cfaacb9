//! End-to-end runs of the `mlcnet` binary on a tiny synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mlcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlcnet"))
        .args(args)
        .output()
        .expect("failed to launch mlcnet")
}

fn code(args: &[&str]) -> i32 {
    mlcnet(args).status.code().expect("terminated by signal")
}

fn ok(args: &[&str]) -> String {
    let out = mlcnet(args);
    assert!(
        out.status.success(),
        "mlcnet {args:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["generate-data", "--out", s(&data), "--size", "64", "--samples-per-class", "3"]);
    data
}

/// Quick recipe shared by the tests: two epochs at 32 pixels.
fn train(data: &Path, out: &Path) {
    ok(&[
        "train", "--data", s(data), "--out", s(out), "--epochs", "2", "--batch-size", "4", "--image-size", "32",
        "--lr", "1e-3", "--seed", "5",
    ]);
}

#[test]
fn pipeline_from_generation_to_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    assert!(data.join("manifest.csv").is_file());

    let run = dir.path().join("run");
    train(&data, &run);
    for f in ["history.csv", "weights.mlcw", "metrics.csv", "eval.conf"] {
        assert!(run.join(f).is_file(), "train did not write {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");

    // eval.conf carries everything eval needs besides the data.
    let eval_out = dir.path().join("eval");
    let stdout = ok(&["eval", "--config", s(&run.join("eval.conf")), "--data", s(&data), "--out", s(&eval_out)]);
    assert!(stdout.contains("Acc"), "{stdout}");
    assert_eq!(
        fs::read(eval_out.join("metrics.csv")).unwrap(),
        fs::read(run.join("metrics.csv")).unwrap(),
        "eval must reproduce the metrics written after training"
    );
    let confusion = fs::read_to_string(eval_out.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 5);

    let fused = dir.path().join("fused.mlcw");
    let stdout = ok(&["fuse", "--weights", s(&run.join("weights.mlcw")), "--out", s(&fused), "--verify", "8", "--size", "32"]);
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(fs::metadata(&fused).unwrap().len() < fs::metadata(run.join("weights.mlcw")).unwrap().len());

    // The fused model classifies the test split exactly like the original.
    let fused_eval = dir.path().join("fused_eval");
    ok(&[
        "eval", "--weights", s(&fused), "--data", s(&data), "--image-size", "32", "--out", s(&fused_eval),
    ]);
    assert_eq!(
        fs::read(fused_eval.join("confusion.csv")).unwrap(),
        fs::read(eval_out.join("confusion.csv")).unwrap()
    );

    let analysis = dir.path().join("analysis");
    let stdout = ok(&["analyze", "--weights", s(&run.join("weights.mlcw")), "--input", "1x64x64", "--out", s(&analysis)]);
    assert!(stdout.contains("params"), "{stdout}");
    let cost = fs::read_to_string(analysis.join("cost.csv")).unwrap();
    assert!(cost.starts_with("layer,params,flops,output_shape"));
    assert!(cost.lines().last().unwrap().starts_with("total,"));

    let cams = dir.path().join("cam");
    ok(&["cam", "--weights", s(&run.join("weights.mlcw")), "--data", s(&data), "--out", s(&cams), "--image-size", "32"]);
    let mut files: Vec<String> = fs::read_dir(&cams)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files.len(), 6, "{files:?}");
    assert_eq!(files.iter().filter(|f| f.ends_with(".ppm")).count(), 3);

    let stdout = ok(&["bench", "--weights", s(&fused), "--input", "1x32x32", "--warmup", "1", "--runs", "10"]);
    assert!(stdout.contains("p95"), "{stdout}");
}

#[test]
fn same_seed_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let again = dir.path().join("again");
    ok(&["generate-data", "--out", s(&again), "--size", "64", "--samples-per-class", "3"]);
    assert_eq!(
        fs::read(data.join("manifest.csv")).unwrap(),
        fs::read(again.join("manifest.csv")).unwrap()
    );

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a);
    train(&data, &b);
    for f in ["history.csv", "weights.mlcw", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let ablate = |out: &Path| {
        ok(&[
            "ablation", "--data", s(&data), "--out", s(out), "--epochs", "1", "--batch-size", "4", "--image-size", "32",
            "--fusions", "add,concat", "--wavelength-sets", "557.7;427.8+630.0", "--latency-runs", "0",
        ])
    };
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    ablate(&x);
    ablate(&y);
    let results = fs::read_to_string(x.join("results.csv")).unwrap();
    assert_eq!(results, fs::read_to_string(y.join("results.csv")).unwrap());
    assert_eq!(results.lines().count(), 5, "{results}");
    assert!(results.lines().skip(1).all(|l| l.ends_with(",ok")), "{results}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["train", "--epochs", "1"]), 1, "missing --data and --out");
    assert_eq!(code(&["generate-data", "--out", s(dir.path()), "--size", "16"]), 1);
    assert_eq!(code(&["analyze", "--fusion", "mean"]), 1);

    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "# comment\nepochs = 2\nunknown-key = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&conf)]), 1);

    assert_eq!(code(&["eval", "--weights", s(&dir.path().join("none.mlcw")), "--data", s(dir.path())]), 2);
    let garbage = dir.path().join("garbage.mlcw");
    fs::write(&garbage, b"not a weight file").unwrap();
    assert_eq!(code(&["analyze", "--weights", s(&garbage)]), 2);

    // A zero tolerance cannot be met: verification fails with code 3.
    let data = generate(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--batch-size", "4", "--image-size", "32",
    ]);
    let w = run.join("weights.mlcw");
    let fused = dir.path().join("fused.mlcw");
    let args = ["fuse", "--weights", s(&w), "--out", s(&fused), "--verify", "4", "--size", "32", "--tolerance", "0"];
    assert_eq!(code(&args), 3);
    // Fusing already fused weights is a runtime error.
    assert_eq!(code(&["fuse", "--weights", s(&fused), "--out", s(&dir.path().join("twice.mlcw"))]), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("analyze.conf");
    fs::write(&conf, "# LCTNet on one view\narch = lctnet\nviews = 1\ninput = 1x64x64\n").unwrap();
    let from_file = ok(&["analyze", "--config", s(&conf)]);
    assert!(from_file.contains("lctnet with 1 view(s)"), "{from_file}");
    let overridden = ok(&["analyze", "--config", s(&conf), "--views", "2"]);
    assert!(overridden.contains("lctnet with 2 view(s)"), "{overridden}");
}
