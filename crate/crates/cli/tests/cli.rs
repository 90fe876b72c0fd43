use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentlab::autograd::Mat;
use latentlab::fidelity::{write_feature_set, FeatureSet};
use latentlab::image::GrayImage;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small enough to train and sample in a few seconds.
const TINY: &str = r#"
seed = 3
presets = []

[corpus]
train_size = 240
test_size = 60

[pretrain]
general_pairs = 40
general_steps = 0

[pretrain.vae]
steps = 40
batch_size = 16

[sampler]
num_inference_steps = 10

[[finetune]]
name = "tiny"
train_steps = 6
batch_size = 8
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn report_render_matches_golden() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["report", "render", "--input", p(&fixtures().join("report")), "--out", p(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = std::fs::read(out.path().join("report.md")).unwrap();
    let want = std::fs::read(fixtures().join("report.golden.md")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
    let manifest = std::fs::read_to_string(out.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest, "report.md\nrnd-unet-60k.loss.png\n");
    assert!(out.path().join("rnd-unet-60k.loss.png").is_file());
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[sampler]\nguidance_scal = 2.0\n").unwrap();
    let o = run(&["--config", p(&cfg), "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("guidance_scal"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "fid", "--real", "x"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.safetensors");
    let o = run(&["sample", "--checkpoint", p(&missing), "--prompt", "no acute process", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.safetensors"));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.feat");
    std::fs::write(&junk, b"not features").unwrap();
    let o = run(&["eval", "fid", "--real", p(&junk), "--generated", p(&junk)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fid_of_identical_feature_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let m = Mat::from_shape_fn((50, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 + (i as f64).sin());
    let a = dir.path().join("a.feat");
    let b = dir.path().join("b.feat");
    write_feature_set(&a, &FeatureSet::new(m.clone(), "toy").unwrap()).unwrap();
    write_feature_set(&b, &FeatureSet::new(m, "toy").unwrap()).unwrap();
    let o = run(&["eval", "fid", "--real", p(&a), "--generated", p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!(v.abs() < 1e-9, "{v}");
}

#[test]
fn extract_then_fid_and_msssim() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    for k in 0..12 {
        GrayImage::from_fn(32, 32, |(y, x)| ((x * (k + 1) + y * 3) % 17) as f64 / 16.0)
            .save_png(&imgs.join(format!("{k:02}.png")))
            .unwrap();
    }
    let feat = dir.path().join("f.feat");
    let o = run(&["eval", "extract", "--images", p(&imgs), "--out", p(&feat), "--dim", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "fid", "--real", p(&feat), "--generated", p(&feat)]);
    assert!(stdout(&o).trim().parse::<f64>().unwrap().abs() < 1e-9);

    let a = imgs.join("00.png");
    let o = run(&["eval", "msssim", p(&a), p(&a), "--scales", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((stdout(&o).trim().parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn text_metrics_from_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pairs.csv");
    std::fs::write(
        &csv,
        "generated,reference\nsmall left pleural effusion,small left pleural effusion\n",
    )
    .unwrap();
    let o = run(&["eval", "text-metrics", "--pairs", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("metric.fact_ent=1\n"), "{out}");
    assert!(out.contains("metric.rouge_l=1\n"), "{out}");
}

#[test]
fn seed_flag_overrides_config() {
    let o = run(&["--seed", "17", "config"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "seed = 17"), "{}", stdout(&o));
}

#[test]
fn corpus_build_writes_manifest_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("corpus");
    let o = run(&["--config", p(&cfg), "--output-dir", p(dir.path()), "corpus", "build", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let n = manifest.lines().count();
    assert!(n > 0);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), n);
    let counts = std::fs::read_to_string(out.join("counts.csv")).unwrap();
    assert!(counts.starts_with("class,train,test\n"));
}

#[test]
fn train_is_reproducible_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut hashes = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = run(&["--config", p(&cfg), "--output-dir", p(&out), "train"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let line = stdout(&o);
        let hash = line.split_whitespace().last().unwrap().to_string();
        assert!(out.join("tiny.safetensors").is_file());
        assert!(out.join("tiny.loss.csv").is_file());
        hashes.push(hash);
    }
    assert_eq!(hashes[0], hashes[1]);

    let ckpt = dir.path().join("a/tiny.safetensors");
    let samples = dir.path().join("samples");
    let o = run(&[
        "--config",
        p(&cfg),
        "sample",
        "--checkpoint",
        p(&ckpt),
        "--prompt",
        "small left pleural effusion",
        "--n",
        "2",
        "--out",
        p(&samples),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = GrayImage::load_png(&samples.join("sample_000.png")).unwrap();
    let b = GrayImage::load_png(&samples.join("sample_001.png")).unwrap();
    assert_eq!(a.dims(), (32, 32));
    assert_ne!(a, b);
}
