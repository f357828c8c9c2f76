//! End-to-end tests against the compiled binary. Everything runs in
//! temp dirs; the binary path comes from Cargo.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use amcnn::data::load_dataset;
use amcnn::density::{read_dmap, write_dmap, DensityMap};
use tempfile::TempDir;

fn amcnn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_amcnn"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn amcnn")
}

fn run_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

#[test]
fn train_help_lists_published_defaults() {
    let help = run_ok(amcnn().args(["train", "--help"]));
    for needle in ["1e-5", "1e-7", "[default: 1]", "knn:0.3", "σ=4"] {
        assert!(help.contains(needle), "train --help missing `{needle}`:\n{help}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(amcnn().arg("--definitely-not-a-flag"));
    assert_eq!(exit_code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_requires_an_explicit_init_mode() {
    let out = run(amcnn().args(["train", "--data", "x", "--out", "y"]));
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--from-pretrained") && err.contains("--from-scratch"), "{err}");
}

#[test]
fn missing_input_file_is_a_data_error() {
    let out = run(amcnn().args([
        "gen-density",
        "--annotations",
        "/definitely/not/here.csv",
        "--height",
        "64",
        "--width",
        "64",
    ]));
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("here.csv"));
}

#[test]
fn missing_pretrain_checkpoints_are_a_data_error() {
    let dir = TempDir::new().unwrap();
    let scenes = dir.path().join("scenes");
    run_ok(amcnn().args(["synth", "--out"]).arg(&scenes).args(["--count", "1", "--size", "64", "--heads-min", "3", "--heads-max", "6", "--radius-max", "4"]));
    let out = run(amcnn()
        .args(["train", "--data"])
        .arg(&scenes)
        .arg("--out")
        .arg(dir.path().join("run"))
        .args(["--from-pretrained"])
        .arg(dir.path().join("nonexistent")));
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn gen_density_conserves_count_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("heads.csv");
    fs::write(&ann, "10.5,12\n30,20.25\n50,40\n").unwrap();
    let out_a = dir.path().join("a.dmap");
    let out_b = dir.path().join("b.dmap");
    for out in [&out_a, &out_b] {
        run_ok(
            amcnn()
                .args(["gen-density", "--annotations"])
                .arg(&ann)
                .args(["--height", "64", "--width", "64", "--sigma", "fixed:4", "--out"])
                .arg(out),
        );
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let map = read_dmap::<f64>(&out_a).unwrap();
    assert_eq!((map.height(), map.width(), map.scale()), (16, 16, 4));
    assert!((map.sum() - 3.0).abs() <= 1e-9, "sum {}", map.sum());
}

#[test]
fn synth_runs_are_byte_identical_and_loadable() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(
            amcnn()
                .args(["synth", "--out"])
                .arg(out)
                .args(["--count", "2", "--size", "64", "--heads-min", "3", "--heads-max", "6", "--radius-max", "4", "--seed", "7"]),
        );
    }
    for name in ["synth-0000.pgm", "synth-0000.csv", "synth-0001.pgm", "synth-0001.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    let (samples, dropped) = load_dataset::<f64>(&a).unwrap();
    assert_eq!((samples.len(), dropped), (2, 0));
    assert!(samples.iter().all(|s| !s.annotations.points().is_empty()));
}

/// Feeding the ground truth back as the prediction must score a clean
/// zero. The maps are built here with exact integer sums so the MAE
/// and MSE are bitwise 0.0 and print as plain `0`.
#[test]
fn eval_against_ground_truth_maps_reports_zero_error() {
    let dir = TempDir::new().unwrap();
    let scenes = dir.path().join("scenes");
    run_ok(
        amcnn()
            .args(["synth", "--out"])
            .arg(&scenes)
            .args(["--count", "3", "--size", "64", "--heads-min", "3", "--heads-max", "6", "--radius-max", "4", "--seed", "11"]),
    );
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    let (samples, _) = load_dataset::<f64>(&scenes).unwrap();
    for s in &samples {
        let mut grid = vec![0.0f64; 16 * 16];
        grid[0] = s.annotations.len() as f64;
        let map = DensityMap::from_grid(grid, 16, 16, 4).unwrap();
        write_dmap(&map, preds.join(format!("{}.dmap", s.id))).unwrap();
    }
    let stdout = run_ok(
        amcnn().args(["eval", "--data"]).arg(&scenes).arg("--pred-dir").arg(&preds),
    );
    assert!(stdout.starts_with("image_id,gt_count,pred_count\n"), "{stdout}");
    assert!(stdout.ends_with("MAE,0\nMSE,0\n"), "{stdout}");
}

#[test]
fn grad_check_passes_and_exits_zero() {
    let stdout = run_ok(amcnn().args(["grad-check", "--seed", "2"]));
    assert!(stdout.contains("end_to_end.combined_loss"));
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn pretrain_train_predict_pipeline_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let scenes = dir.path().join("scenes");
    run_ok(
        amcnn()
            .args(["synth", "--out"])
            .arg(&scenes)
            .args(["--count", "2", "--size", "64", "--heads-min", "3", "--heads-max", "6", "--radius-max", "4", "--seed", "4"]),
    );
    let pre = dir.path().join("pre");
    run_ok(
        amcnn()
            .args(["pretrain", "--data"])
            .arg(&scenes)
            .arg("--out")
            .arg(&pre)
            .args(["--branch", "all", "--iterations", "1", "--sigma", "fixed:2"]),
    );
    for label in ["L", "M", "S"] {
        assert!(pre.join(format!("pretrain-{label}.amcnn")).exists());
        assert!(pre.join(format!("pretrain-{label}-log.csv")).exists());
    }

    let train_into = |out: &Path| {
        run_ok(
            amcnn()
                .args(["train", "--data"])
                .arg(&scenes)
                .arg("--out")
                .arg(out)
                .arg("--from-pretrained")
                .arg(&pre)
                .args(["--iterations", "2", "--sigma", "fixed:2", "--seed", "5"])
                .args(["--set", "c_f=2"]),
        );
    };
    let (run_a, run_b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    train_into(&run_a);
    train_into(&run_b);
    let model_a = fs::read(run_a.join("model.amcnn")).unwrap();
    assert_eq!(model_a, fs::read(run_b.join("model.amcnn")).unwrap());
    assert_eq!(
        fs::read(run_a.join("train-log.csv")).unwrap(),
        fs::read(run_b.join("train-log.csv")).unwrap()
    );

    let predict_into = |prefix: &Path| {
        run_ok(
            amcnn()
                .args(["predict", "--checkpoint"])
                .arg(run_a.join("model.amcnn"))
                .arg("--image")
                .arg(scenes.join("synth-0000.pgm"))
                .arg("--out-prefix")
                .arg(prefix),
        )
    };
    let p = dir.path().join("maps").join("p");
    let line_a = predict_into(&p);
    for name in ["p.dmap", "p-attn.dmap", "p-attn.pgm"] {
        assert!(dir.path().join("maps").join(name).exists(), "missing {name}");
    }
    let first = fs::read(dir.path().join("maps/p.dmap")).unwrap();
    let q = dir.path().join("maps").join("q");
    let line_b = predict_into(&q);
    assert_eq!(first, fs::read(dir.path().join("maps/q.dmap")).unwrap());
    assert_eq!(
        line_a.split("predicted count").nth(1),
        line_b.split("predicted count").nth(1)
    );

    let report = run_ok(
        amcnn()
            .args(["eval", "--data"])
            .arg(&scenes)
            .arg("--checkpoint")
            .arg(run_a.join("model.amcnn")),
    );
    assert!(report.starts_with("image_id,gt_count,pred_count\n"), "{report}");
    assert!(report.contains("synth-0000,") && report.contains("synth-0001,"));
    assert!(report.contains("\nMAE,") && report.contains("\nMSE,"));
}
