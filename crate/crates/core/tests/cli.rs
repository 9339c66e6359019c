//! The `conrad` binary end to end on tiny inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conrad::checkpoint::Checkpoint;
use conrad::eval::{EvalReport, FeatureSet};
use conrad::field::HashGridConfig;
use conrad::imaging::RgbImage;
use conrad::scene::{canonical_rig, format_poses};
use conrad::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conrad")).args(args).env_remove("CONRAD_PROVIDER_URL").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16×16 toy sphere and a config small enough for a few seconds of
/// training.
fn toy_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let out = conrad(&["make-toy", "--shape", "sphere", "--out", s(dir), "--size", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut cfg = TrainConfig::toy(50);
    cfg.resolution = 16;
    cfg.preview_resolution = 16;
    cfg.field.grid = HashGridConfig { n_levels: 3, table_size_log2: 10, finest_resolution: 32, ..Default::default() };
    cfg.march.n_samples = 16;
    cfg.regularizer_rays = 32;
    cfg.checkpoint_every = 25;
    cfg.preview_every = 25;
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    (dir.to_path_buf(), config)
}

fn train(inputs: &Path, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let image = inputs.join("image.png");
    let mask = inputs.join("mask.png");
    let depth = inputs.join("depth.raw");
    let mut args = vec![
        "train",
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--depth",
        s(&depth),
        "--config",
        s(config),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    conrad(&args)
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&conrad(&["train", "--image", "x.png", "--out", s(dir.path())])), 2);
    assert_eq!(code(&conrad(&["make-toy", "--shape", "torus", "--out", s(dir.path())])), 2);
    let (inputs, config) = toy_inputs(dir.path());
    let out = train(&inputs, &config, &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 2, "no provider configured");
    let out = train(&inputs, &config, &dir.path().join("run"), &["--provider", "magic:x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_and_dead_servers_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (inputs, config) = toy_inputs(dir.path());
    let out = conrad(&[
        "train",
        "--image",
        "/nonexistent.png",
        "--mask",
        "/nonexistent.png",
        "--out",
        s(dir.path()),
        "--provider",
        "oracle:sphere",
    ]);
    assert_eq!(code(&out), 3);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("remote:http://{}", dead.local_addr().unwrap());
    drop(dead);
    assert_eq!(code(&train(&inputs, &config, &dir.path().join("run"), &["--provider", &url])), 5);
}

#[test]
fn training_is_reproducible_and_renders_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (inputs, config) = toy_inputs(&dir.path().join("toy"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = train(&inputs, &config, out, &["--provider", "oracle:sphere", "--seed", "7"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let log_a = std::fs::read_to_string(a.join("loss.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), 50);
    assert_eq!(log_a, std::fs::read_to_string(b.join("loss.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.crad")).unwrap(), std::fs::read(b.join("checkpoint.crad")).unwrap());
    assert_eq!(Checkpoint::load(&a.join("ckpt_000025.crad")).unwrap().step, 25);
    assert!(a.join("preview_000050.png").exists());

    let poses = dir.path().join("rig.txt");
    std::fs::write(&poses, format_poses(&canonical_rig())).unwrap();
    let ckpt = a.join("checkpoint.crad");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for out in [&r1, &r2] {
        let run = conrad(&["render", "--ckpt", s(&ckpt), "--poses", s(&poses), "--out", s(out), "--resolution", "16"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let pngs = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        v.sort();
        v
    };
    let first = pngs(&r1);
    assert_eq!(first.len(), 68);
    assert_eq!(RgbImage::load_png(&first[0]).unwrap().width, 16);
    for (x, y) in first.iter().zip(pngs(&r2)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing here\n").unwrap();
    let run = conrad(&["render", "--ckpt", s(&ckpt), "--poses", s(&empty), "--out", s(&r1)]);
    assert_eq!(code(&run), 2);

    let resumed = dir.path().join("resumed");
    let run = conrad(&[
        "train",
        "--image",
        s(&inputs.join("image.png")),
        "--mask",
        s(&inputs.join("mask.png")),
        "--depth",
        s(&inputs.join("depth.raw")),
        "--out",
        s(&resumed),
        "--provider",
        "oracle:sphere",
        "--resume",
        s(&a.join("ckpt_000025.crad")),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(std::fs::read(resumed.join("checkpoint.crad")).unwrap(), std::fs::read(&ckpt).unwrap());
}

#[test]
fn eval_of_identical_features_has_zero_oracle_distance() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<f64> = (0..68 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = dir.path().join("f.crdf");
    FeatureSet::from_rows(8, rows).unwrap().save(&features).unwrap();
    let poses = dir.path().join("rig.txt");
    std::fs::write(&poses, format_poses(&canonical_rig())).unwrap();
    let report_path = dir.path().join("out/report.json");
    let run = conrad(&[
        "eval",
        "--gt-features",
        s(&features),
        "--rendered-features",
        s(&features),
        "--poses",
        s(&poses),
        "--out",
        s(&report_path),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!((report.all_views.n_poses, report.near_reference.n_poses), (68, 15));
    for m in [&report.all_views, &report.near_reference] {
        // The identity matching is optimal; the all-pairs mean stays positive.
        assert!(m.d_oracle.abs() < 1e-12 && m.d_all > 0.1, "{m:?}");
    }

    std::fs::write(dir.path().join("bad.crdf"), b"nope").unwrap();
    let run = conrad(&[
        "eval",
        "--gt-features",
        s(&dir.path().join("bad.crdf")),
        "--rendered-features",
        s(&features),
        "--poses",
        s(&poses),
        "--out",
        s(&report_path),
    ]);
    assert_eq!(code(&run), 3);
}
