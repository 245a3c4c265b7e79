//! End-to-end tests of the `fine` binary: exit codes, file outputs, and a
//! small full pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fine"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("fine-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(
        &p,
        r#"
dataset = "shapes-A"
n_samples = 256
seed = 11
steps = 60
batch_size = 4
learning_rate = 1e-3
log_every = 0
t_diff = 20

[model]
image_size = 8
channels = 1
patch_size = 2
width = 16
heads = 2
depth = 2
num_classes = 2

[model.backing]
kind = "factorized"
rank = 8
group_size = 2
"#,
    )
    .unwrap();
    p
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["condense"]).status.code(), Some(2)); // missing flags
    assert_eq!(run(&["condense", "--config"]).status.code(), Some(2)); // dangling value
    assert_eq!(run(&["init", "--learngene", "x", "--depth", "2", "--dataset", "mnist", "--out", "y"])
        .status
        .code(), Some(2)); // unknown dataset
    assert_eq!(
        run(&["bench", "--recipes", "bogus", "--depths", "2", "--seeds", "1", "--out", "o.csv"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn file_errors_exit_3() {
    let out = run(&["inspect", "/nonexistent/path.fine"]);
    assert_eq!(out.status.code(), Some(3));
    let dir = tmpdir("badfile");
    let junk = dir.join("junk.lgne");
    std::fs::write(&junk, b"not a container at all........").unwrap();
    let out = run(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn full_tiny_pipeline_through_the_binary() {
    let started = Instant::now();
    let dir = tmpdir("pipeline");
    let cfg = write_tiny_config(&dir);
    let lg = dir.join("lg.lgne");
    let aux = dir.join("aux.fine");

    let out = run(&[
        "condense",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        lg.to_str().unwrap(),
        "--aux-out",
        aux.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(lg.exists() && aux.exists());

    // inspect on a learngene lists exactly 8 tensors.
    let out = run(&["inspect", lg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("tensors: 8"), "{text}");
    for name in ["u.qkv", "v.qkv", "u.o", "v.o", "u.in", "v.in", "u.out", "v.out"] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }

    // init with a mismatched width fails with exit 3 naming both widths.
    let bad = run(&[
        "init",
        "--learngene",
        lg.to_str().unwrap(),
        "--depth",
        "3",
        "--dataset",
        "shapes-B",
        "--out",
        dir.join("bad.fine").to_str().unwrap(),
        "--width",
        "32",
        "--heads",
        "2",
        "--t-diff",
        "20",
        "--data-n",
        "256",
    ]);
    assert_eq!(bad.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("16") && msg.contains("32"), "{msg}");

    let init = dir.join("init.fine");
    let out = run(&[
        "init",
        "--learngene",
        lg.to_str().unwrap(),
        "--depth",
        "3",
        "--dataset",
        "shapes-B",
        "--out",
        init.to_str().unwrap(),
        "--fit-steps",
        "10",
        "--heads",
        "2",
        "--t-diff",
        "20",
        "--data-n",
        "256",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let final_ckpt = dir.join("final.fine");
    let curve = dir.join("curve.csv");
    let out = run(&[
        "train",
        "--from",
        init.to_str().unwrap(),
        "--steps",
        "20",
        "--out",
        final_ckpt.to_str().unwrap(),
        "--log",
        curve.to_str().unwrap(),
        "--batch",
        "4",
        "--data-n",
        "256",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(curve.exists());

    let grid = dir.join("grid.imgr");
    let out = run(&[
        "sample",
        "--from",
        final_ckpt.to_str().unwrap(),
        "--n",
        "4",
        "--out",
        grid.to_str().unwrap(),
        "--ema",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&grid).unwrap();
    assert_eq!(&bytes[0..4], b"IMGR");

    // Every artifact carries a replay sidecar.
    for artifact in [&lg, &aux, &init, &final_ckpt, &grid] {
        let sidecar = fine_core::io::sidecar_path(artifact);
        assert!(sidecar.exists(), "missing sidecar for {}", artifact.display());
    }

    let out = run(&[
        "bench",
        "--recipes",
        "he,fine",
        "--depths",
        "2",
        "--seeds",
        "1",
        "--out",
        dir.join("bench.csv").to_str().unwrap(),
        "--dataset",
        "shapes-A",
        "--steps",
        "30",
        "--batch",
        "4",
        "--t-diff",
        "10",
        "--eval-samples",
        "8",
        "--fit-steps",
        "5",
        "--data-n",
        "256",
        "--learngene",
        lg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert!(summary.starts_with("recipe,depth,seed,steps_to_target,frechet,params_transferred"));
    assert!(dir.join("bench.curves.csv").exists());
    assert!(dir.join("bench.md").exists());

    eprintln!("tiny pipeline wall time: {:.1}s", started.elapsed().as_secs_f64());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sample_without_ema_tensors_is_a_file_error() {
    let dir = tmpdir("noema");
    let cfg = write_tiny_config(&dir);
    let lg = dir.join("lg.lgne");
    assert_eq!(
        run(&["condense", "--config", cfg.to_str().unwrap(), "--out", lg.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let init = dir.join("init.fine");
    let out = run(&[
        "init",
        "--learngene",
        lg.to_str().unwrap(),
        "--depth",
        "2",
        "--dataset",
        "shapes-B",
        "--out",
        init.to_str().unwrap(),
        "--fit-steps",
        "2",
        "--heads",
        "2",
        "--t-diff",
        "20",
        "--data-n",
        "256",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // The init checkpoint carries no EMA tensors, so --ema is refused.
    let out = run(&[
        "sample",
        "--from",
        init.to_str().unwrap(),
        "--n",
        "1",
        "--out",
        dir.join("g.imgr").to_str().unwrap(),
        "--ema",
    ]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).unwrap();
}
