//! End-to-end acceptance checks. Each test prints one line per criterion.
//!
//! Criteria 5, 6, 10, 11 and 12 train real models; run with
//! `cargo test --release -p latentlab-core --test acceptance -- --nocapture`
//! to see the lines.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use latentlab::adaptation::{batch_loss, presets, run, FineTuneConfig, StepDraw, Strategy, TrainingItem, TrainingSet, UNetMode};
use latentlab::autograd::Mat;
use latentlab::checkpoint::{load_checkpoint, pipeline_tensors, save_checkpoint};
use latentlab::correctness::probe::forgetting_csv;
use latentlab::correctness::{
    auroc, chexpert_at_10, fact_ent, fact_entnli, label_f1, retrieval_precision_at_k, rouge_l, toy_class_names,
    toy_truth_matrix, ClassifierConfig, EntityExtractor, FitLog, MultiLabelClassifier, OracleClassifier, RetrievalPool,
    TokenJaccard, ToyNer, ToyNli,
};
use latentlab::data::{cap_no_finding, filter_reports, label_extract, ReportRecord, Split, View};
use latentlab::diffusion::{LatentTensor, SamplerConfig};
use latentlab::experiment::report::{render_dir, FORGETTING_SUFFIX};
use latentlab::experiment::{
    run_augmentation_study, run_finetune_grid, run_forgetting_probe, AugSplit, AugmentationPlan, ExperimentConfig, GridRow,
    Lab, Suite,
};
use latentlab::fidelity::{fid, frechet_distance, ms_ssim, ms_ssim_with, FeatureSet, GaussianStats, MsSsimConfig};
use latentlab::image::GrayImage;
use latentlab::nn::text_encoder::token_table_name;
use latentlab::nn::{TextEncoderConfig, Tokenizer, UNetConfig, VaeConfig};
use latentlab::params::{bitwise_eq, grad_check};
use latentlab::pipeline::{Pipeline, PipelineConfig};
use latentlab::Result;
use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} ({name}): {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- 1

fn gauss1(mu: f64, var: f64) -> GaussianStats {
    GaussianStats {
        mu: Array1::from_vec(vec![mu]),
        sigma: Mat::from_elem((1, 1), var),
    }
}

#[test]
fn c01_frechet_closed_form() {
    let shift = frechet_distance(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap();
    let spread = frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = GaussianStats {
        mu: Array1::from_vec(vec![0.3, -1.0, 2.0]),
        sigma: Mat::from_shape_vec((3, 3), vec![2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.7]).unwrap(),
    };
    let b = GaussianStats {
        mu: Array1::from_vec(vec![1.0, 0.5, -0.5]),
        sigma: Mat::from_shape_vec((3, 3), vec![1.0, -0.1, 0.0, -0.1, 3.0, 0.4, 0.0, 0.4, 0.5]).unwrap(),
    };
    let identity = frechet_distance(&a, &a).unwrap();
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());

    // Diagonal covariances: the trace term is a sum of per-axis squared
    // differences of standard deviations.
    let (mu1, s1): ([f64; 3], [f64; 3]) = ([0.0, 0.0, 0.0], [1.0, 2.0, 0.5]);
    let (mu2, s2): ([f64; 3], [f64; 3]) = ([1.0, 2.0, -1.0], [4.0, 1.0, 2.0]);
    let closed: f64 = (0..3)
        .map(|i| (mu1[i] - mu2[i]).powi(2) + s1[i] + s2[i] - 2.0 * (s1[i] * s2[i]).sqrt())
        .sum();
    let draw = |rng: &mut ChaCha8Rng, mu: [f64; 3], s: [f64; 3]| {
        Mat::from_shape_fn((10_000, 3), |(_, j)| Normal::new(mu[j], s[j].sqrt()).unwrap().sample(rng))
    };
    let x = FeatureSet::new(draw(&mut rng, mu1, s1), "mc").unwrap();
    let y = FeatureSet::new(draw(&mut rng, mu2, s2), "mc").unwrap();
    let mc = fid(&x, &y).unwrap();

    let ok = (shift - 1.0).abs() < 1e-8
        && (spread - 1.0).abs() < 1e-8
        && identity.abs() < 1e-8
        && (ab - ba).abs() < 1e-10 * ab.max(1.0)
        && ((mc - closed) / closed).abs() < 0.05;
    verdict(
        1,
        "Frechet closed form",
        ok,
        &format!("shift {shift:.12} spread {spread:.12} identity {identity:.2e} |ab-ba| {:.2e} monte-carlo {mc:.4} vs {closed:.4}", (ab - ba).abs()),
    );
}

// ---------------------------------------------------------------- 2

/// Single-scale SSIM written directly: 2-D Gaussian kernel over a
/// mirror-padded copy, per-pixel index map, mean, clamp.
fn ssim_oracle(a: &GrayImage, b: &GrayImage) -> f64 {
    let (h, w) = a.dims();
    let r = 5isize;
    let sigma = 1.5f64;
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if i < 0 {
            (-i - 1) as usize
        } else if i >= n {
            (2 * n - 1 - i) as usize
        } else {
            i as usize
        }
    };
    let at = |img: &GrayImage, y: isize, x: isize| img.pixels[[mirror(y, h), mirror(x, w)]];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let g = k[(dy + r) as usize][(dx + r) as usize] / total;
                    let (p, q) = (at(a, y + dy, x + dx), at(b, y + dy, x + dx));
                    ma += g * p;
                    mb += g * q;
                    saa += g * p * p;
                    sbb += g * q * q;
                    sab += g * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    (sum / (h * w) as f64).clamp(0.0, 1.0)
}

#[test]
fn c02_ms_ssim() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = MsSsimConfig::with_scales(1).unwrap();
    let mut worst: f64 = 0.0;
    let mut self_worst: f64 = 0.0;
    for i in 0..20 {
        let (h, w) = if i % 2 == 0 { (32, 32) } else { (24, 20) };
        let a = GrayImage::from_fn(h, w, |_| rng.gen_range(0.0..1.0));
        let mix = rng.gen_range(0.2..0.9);
        let b = GrayImage::from_fn(h, w, |(y, x)| mix * a.pixels[[y, x]] + (1.0 - mix) * rng.gen_range(0.0..1.0));
        worst = worst.max((ms_ssim_with(&a, &b, &one).unwrap() - ssim_oracle(&a, &b)).abs());
        if h == 32 {
            self_worst = self_worst.max((ms_ssim(&a, &a).unwrap() - 1.0).abs());
        }
    }
    verdict(
        2,
        "MS-SSIM",
        worst < 1e-6 && self_worst < 1e-6,
        &format!("single-scale max diff {worst:.2e}, self-similarity max |1 - s| {self_worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 3

fn tiny_pipeline() -> Pipeline {
    let config = PipelineConfig {
        vae: VaeConfig {
            image_size: 8,
            latent_channels: 2,
            latent_side: 2,
            hidden: [16, 8],
        },
        text_encoder: TextEncoderConfig { d_model: 8, d_ff: 8 },
        unet: UNetConfig {
            latent_channels: 2,
            channels: [4, 8],
            context_dim: 8,
            attn_dim: 4,
            time_dim: 4,
            zero_init_out: false,
        },
        ..Default::default()
    };
    Pipeline::new(config, 5).unwrap()
}

#[test]
fn c03_gradients() {
    let p = tiny_pipeline();
    let prompts = ["Small left pleural effusion.", "No acute cardiopulmonary process."];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = TrainingSet {
        items: prompts
            .iter()
            .map(|q| TrainingItem {
                prompt: q.to_string(),
                latent: LatentTensor::new(2, 2, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                view: View::PA,
            })
            .collect(),
    };
    let texts: Vec<String> = prompts.iter().map(|s| s.to_string()).collect();
    let draw = StepDraw::sample(&mut rng, vec![0, 1], p.latent_shape(), 1000, 0.0).unwrap();
    let (_, grads) = batch_loss(&p, &set, &texts, &draw).unwrap();

    let unet = grad_check(&p.unet.params, &grads, 30, 1e-5, &mut ChaCha8Rng::seed_from_u64(4), |ps| {
        let mut q = p.clone();
        q.unet.params = ps.clone();
        batch_loss(&q, &set, &texts, &draw).unwrap().0
    });
    let te = grad_check(&p.text_encoder.params, &grads, 30, 1e-5, &mut ChaCha8Rng::seed_from_u64(5), |ps| {
        let mut q = p.clone();
        q.text_encoder.params = ps.clone();
        batch_loss(&q, &set, &texts, &draw).unwrap().0
    });
    let max = |c: &[latentlab::params::GradCheck]| c.iter().map(|g| g.rel_err).fold(0.0, f64::max);
    let nonzero = te.iter().chain(&unet).filter(|c| c.analytic != 0.0).count();
    verdict(
        3,
        "gradient correctness",
        max(&unet) < 1e-3 && max(&te) < 1e-3 && nonzero > 0,
        &format!(
            "{} U-Net samples max rel err {:.2e}; {} text-encoder samples max rel err {:.2e}",
            unet.len(),
            max(&unet),
            te.len(),
            max(&te)
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_freeze_contracts() {
    let base = Pipeline::new(PipelineConfig::default(), 1).unwrap();
    let spec = latentlab::data::CorpusSpec {
        train_size: 120,
        test_size: 0,
        ..Default::default()
    };
    let corpus = latentlab::data::toy_corpus_generate(&spec).unwrap();
    let splits = corpus.curated(&Tokenizer::default()).unwrap();
    let data = TrainingSet::from_records(&corpus, &splits.train, &base.vae).unwrap();
    let pairs: Vec<_> = latentlab::data::general_corpus(20, 32, 1).into_iter().map(|(_, p)| p).collect();
    let prior = TrainingSet::from_pairs(&pairs, &vec![View::PA; 20], &base.vae).unwrap();
    let before = pipeline_tensors(&base);
    let mut problems = Vec::new();
    let mut checked = 0usize;
    let all = presets();
    for preset in &all {
        let cfg = FineTuneConfig {
            train_steps: 50,
            batch_size: 4,
            ..preset.config.clone()
        };
        let mut p = base.clone();
        let rec = run(&mut p, &cfg, &data, Some(&prior)).unwrap();
        let after = pipeline_tensors(&p);
        let declared: BTreeSet<&str> = rec.trainable.iter().map(String::as_str).collect();
        for name in before.names() {
            if declared.contains(name) {
                continue;
            }
            if cfg.unet_mode == UNetMode::TrainFromRandom && name.starts_with("unet.") {
                problems.push(format!("{}: {name} not declared although re-initialised", cfg.name));
                continue;
            }
            checked += 1;
            if !after.contains(name) || !bitwise_eq(before.get(name), after.get(name)) {
                problems.push(format!("{}: {name} changed", cfg.name));
            }
        }
        if cfg.strategy == Strategy::TextualInversion {
            let table = token_table_name();
            let (old, new) = (before.get(&table), after.get(&table));
            let vocab = old.nrows();
            for r in 0..vocab {
                checked += 1;
                let a = old.row(r).to_owned().insert_axis(Axis(0));
                let b = new.row(r).to_owned().insert_axis(Axis(0));
                if !bitwise_eq(&a, &b) {
                    problems.push(format!("{}: token row {r} changed", cfg.name));
                }
            }
            if new.nrows() != vocab + 1 {
                problems.push(format!("{}: no new token row", cfg.name));
            }
        }
    }
    verdict(
        4,
        "freeze contracts",
        problems.is_empty(),
        &format!("{} presets x 50 steps, {checked} frozen tensors/rows checked; {problems:?}", all.len()),
    );
}

// ---------------------------------------------------------------- 5, 6 (shared run)

struct Shared {
    lab: Lab,
    base: Pipeline,
    rows: Vec<GridRow>,
    generator: PathBuf,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = work_dir("trend");
        let mut cfg = ExperimentConfig::default();
        cfg.output_dir = dir.clone();
        cfg.pretrain.general_steps = 0;
        cfg.presets = vec!["original".into(), "rnd-unet-60k".into()];
        let lab = Lab::new(cfg).unwrap();
        let base = lab.base_pipeline().unwrap();
        let cls = Arc::new(lab.oracle_classifier().unwrap());
        let suite = Suite::new(&lab, Some(cls)).unwrap();
        let generator = dir.join("generator.safetensors");
        let rows = run_finetune_grid(
            &lab,
            &base,
            &lab.config.grid_configs().unwrap(),
            &suite,
            &mut |c, p, r| {
                assert!(c.train_steps <= 2000);
                save_checkpoint(&generator, p, Some(r))?;
                Ok(())
            },
        )
        .unwrap();
        Shared {
            lab,
            base,
            rows,
            generator,
        }
    })
}

fn row<'a>(s: &'a Shared, name: &str) -> &'a GridRow {
    s.rows
        .iter()
        .find(|r| r.report.task == format!("finetune:{name}"))
        .unwrap_or_else(|| panic!("no grid row {name}"))
}

#[test]
fn c05_end_to_end_fid_trend() {
    let s = shared();
    let (orig, tuned) = (&row(s, "original").report, &row(s, "rnd-unet-60k").report);
    let key = orig
        .metrics
        .keys()
        .find(|k| k.starts_with("fid.random-projection"))
        .expect("projection FID")
        .clone();
    let (a, b) = (orig.metrics[&key], tuned.metrics[&key]);
    let others: Vec<String> = orig
        .metrics
        .keys()
        .filter(|k| k.starts_with("fid.") && **k != key)
        .map(|k| format!("{k} {:.3} -> {:.3}", orig.metrics[k], tuned.metrics[k]))
        .collect();
    verdict(
        5,
        "end-to-end FID trend",
        b * 5.0 <= a,
        &format!("{key}: untrained {a:.4}, fine-tuned {b:.4}, ratio {:.1}x; also {}", a / b, others.join(", ")),
    );
}

#[test]
fn c06_conditioning_trend() {
    let s = shared();
    let a = row(s, "original").report.get("auroc.macro").unwrap();
    let b = row(s, "rnd-unet-60k").report.get("auroc.macro").unwrap();
    verdict(
        6,
        "conditioning trend",
        b >= 0.80 && (a - 0.5).abs() <= 0.05,
        &format!("macro AUROC untrained {a:.3}, fine-tuned {b:.3}"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_retrieval_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = Mat::from_shape_fn((200, 16), |_| rng.gen_range(-1.0..1.0));
    let c = Mat::from_shape_fn((400, 16), |_| rng.gen_range(-1.0..1.0));
    let ql: Vec<usize> = (0..200).map(|_| rng.gen_range(0..6)).collect();
    let cl: Vec<usize> = (0..400).map(|_| rng.gen_range(0..6)).collect();
    let pool = RetrievalPool::new(q.clone(), ql.clone(), c.clone(), cl.clone()).unwrap();
    let mut detail = Vec::new();
    let mut ok = true;
    for k in [5, 10, 50] {
        let got = retrieval_precision_at_k(&pool, k).unwrap();
        let want = common::brute_force_precision(&q, &ql, &c, &cl, k);
        ok &= got == want;
        detail.push(format!("p@{k} {got:.4}/{want:.4}"));
    }
    verdict(7, "retrieval precision", ok, &detail.join(", "));
}

// ---------------------------------------------------------------- 8

struct Words;

impl EntityExtractor for Words {
    fn entities(&self, sentence: &str) -> BTreeSet<String> {
        sentence
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

#[test]
fn c08_text_metrics() {
    let ent = fact_ent("a b.", "b c.", &Words).value;
    let f1 = label_f1("Cardiomegaly.", "Cardiomegaly. Pulmonary edema.").value;
    let rl = rouge_l("a b c d", "a b x d");
    let au = auroc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let g = common::random_report(&mut rng);
        let r = common::random_report(&mut rng);
        if fact_entnli(&g, &r, &ToyNer, &ToyNli, &TokenJaccard).value > fact_ent(&g, &r, &ToyNer).value {
            violations += 1;
        }
    }
    verdict(
        8,
        "text metrics",
        ent == 0.5 && f1 == 2.0 / 3.0 && rl == 0.75 && au == 0.75 && violations == 0,
        &format!("fact_ent {ent}, label_f1 {f1}, rouge_l {rl}, auroc {au}, entnli > ent in {violations}/1000 pairs"),
    );
}

// ---------------------------------------------------------------- 9

fn record(id: &str, text: &str) -> ReportRecord {
    ReportRecord {
        record_id: id.into(),
        impression: text.into(),
        view: View::PA,
        labels: label_extract(text),
        split: Split::Train,
        subgroup: 10,
    }
}

#[test]
fn c09_data_boundaries() {
    let t = Tokenizer::default();
    let body = |n: usize| vec!["no"; n].join(" ");
    let (fits, over) = (body(75), body(76));
    let token_counts = (t.count(&fits), t.count(&over));
    let rs = vec![
        record("six", "Slight"),
        record("seven", "Slight."),
        record("t77", &fits),
        record("t78", &over),
    ];
    let (kept, _) = filter_reports(&rs, &t);
    let ids: Vec<&str> = kept.iter().map(|r| r.record_id.as_str()).collect();

    let mut pool: Vec<ReportRecord> = (0..100).map(|i| record(&format!("nf{i}"), "No acute cardiopulmonary process.")).collect();
    pool.extend((0..50).map(|i| record(&format!("f{i}"), "Cardiomegaly.")));
    let capped = cap_no_finding(&pool, 40, 9);
    let nf = capped.iter().filter(|r| r.is_no_finding()).count();
    let stable = capped == cap_no_finding(&pool, 40, 9);
    let ok = ids == ["seven", "t77"] && token_counts == (77, 78) && nf == 40 && capped.len() == 90 && stable;
    verdict(
        9,
        "data boundaries",
        ok,
        &format!("kept {ids:?} (token counts {token_counts:?}); no-finding after cap {nf}, rerun identical {stable}"),
    );
}

// ---------------------------------------------------------------- 10

const SMALL: &str = r#"
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
"#;

fn train_and_sample(dir: &Path) -> (String, Vec<f64>, Vec<GrayImage>) {
    let lab = Lab::new(ExperimentConfig::from_toml_str(SMALL).unwrap()).unwrap();
    let mut p = lab.base_pipeline().unwrap();
    let data = lab.training_set(&p).unwrap();
    let cfg = FineTuneConfig {
        train_steps: 20,
        batch_size: 8,
        ..FineTuneConfig::preset("rnd-unet-60k").unwrap()
    };
    let rec = run(&mut p, &cfg, &data, None).unwrap();
    let path = dir.join("model.safetensors");
    let hash = save_checkpoint(&path, &p, Some(&rec)).unwrap();
    let (q, _) = load_checkpoint(&path).unwrap();
    let sampler = SamplerConfig {
        num_inference_steps: 10,
        seed: 5,
        ..Default::default()
    };
    let prompts = vec!["Small left pleural effusion.".to_string(); 3];
    let images = q.generate_many(&prompts, &sampler, 2).unwrap();
    (hash, rec.losses, images)
}

#[test]
fn c10_determinism() {
    let a = train_and_sample(&work_dir("determinism-a"));
    let b = train_and_sample(&work_dir("determinism-b"));
    let bits = |v: &[GrayImage]| -> Vec<u64> { v.iter().flat_map(|i| i.pixels.iter().map(|x| x.to_bits())).collect() };
    let ok = a.0 == b.0 && a.1 == b.1 && bits(&a.2) == bits(&b.2) && a.2[0] != a.2[1];
    verdict(
        10,
        "determinism",
        ok,
        &format!("hashes {} / {}, loss curves equal {}, {} images bitwise equal {}", a.0, b.0, a.1 == b.1, a.2.len(), bits(&a.2) == bits(&b.2)),
    );
}

// ---------------------------------------------------------------- 11

/// Scores each class by the mean brightness of one horizontal band.
struct BandStub;

impl MultiLabelClassifier for BandStub {
    fn fit(&mut self, _: &[GrayImage], _: &Mat, _: Option<(&[GrayImage], &Mat)>) -> Result<FitLog> {
        Ok(FitLog::default())
    }

    fn predict_proba(&self, images: &[GrayImage]) -> Result<Mat> {
        let classes = toy_class_names().len();
        Ok(Mat::from_shape_fn((images.len(), classes), |(i, c)| {
            let img = &images[i].pixels;
            let band = img.nrows() / classes;
            img.slice(ndarray::s![c * band..(c + 1) * band, ..]).mean().unwrap()
        }))
    }
}

#[test]
fn c11_augmentation_harness() {
    let s = shared();
    let lab = &s.lab;
    let test = lab.test_pa();
    let probs = BandStub.predict_proba(&lab.images(&test).unwrap()).unwrap();
    let truth = toy_truth_matrix(&test.iter().map(|r| r.labels).collect::<Vec<_>>());
    let mut defined = Vec::new();
    for c in 0..probs.ncols() {
        let t: Vec<bool> = truth.column(c).iter().map(|v| *v > 0.5).collect();
        if let Ok(v) = auroc(&probs.column(c).to_vec(), &t) {
            defined.push(v);
        }
    }
    let direct = defined.iter().sum::<f64>() / defined.len() as f64;

    let stub_plan = AugmentationPlan {
        splits: vec![
            AugSplit {
                name: "R".into(),
                real: 100,
                synth: 0,
                checkpoint: None,
            },
            AugSplit {
                name: "R/S".into(),
                real: 50,
                synth: 20,
                checkpoint: Some(s.generator.clone()),
            },
        ],
        ..Default::default()
    };
    let quick = SamplerConfig {
        num_inference_steps: 10,
        ..lab.config.sampler
    };
    let load = |path: &Path| load_checkpoint(path).map(|(p, _)| p);
    let stub = run_augmentation_study(lab, &stub_plan, &quick, &mut |_, _| Ok(Box::new(BandStub)), &mut |p| load(p)).unwrap();
    let stub_ok = stub.rows.iter().all(|r| r.auroc == direct);

    let plan = &lab.config.augmentation;
    let mut seen = HashMap::new();
    let full = run_augmentation_study(
        lab,
        plan,
        &lab.config.sampler,
        &mut |_, c: &ClassifierConfig| Ok(Box::new(OracleClassifier::new(c.clone())?) as Box<dyn MultiLabelClassifier>),
        &mut |p| {
            *seen.entry(p.to_path_buf()).or_insert(0) += 1;
            load(p)
        },
    )
    .unwrap();
    let names: Vec<&str> = full.rows.iter().map(|r| r.name.as_str()).collect();
    let want: Vec<&str> = plan.splits.iter().map(|r| r.name.as_str()).collect();
    let ok = stub_ok && toy_class_names().len() == 6 && names == want && full.reports.len() == want.len() && seen.len() == 1;
    let summary: Vec<String> = full.rows.iter().map(|r| format!("{} {:.3}", r.name, r.auroc)).collect();
    verdict(
        11,
        "augmentation harness",
        ok,
        &format!("stub AUROC {:?} vs direct {direct}; full study rows: {}", stub.rows.iter().map(|r| r.auroc).collect::<Vec<_>>(), summary.join(", ")),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn c12_chexpert_probe() {
    let n_cls = 4;
    let n = 15 * n_cls;
    let emb = Mat::from_shape_fn((n, n_cls), |(i, c)| f64::from(u8::from(i % n_cls == c)));
    let perfect = chexpert_at_10(&emb, &emb).unwrap();
    let perfect_ok = perfect.per_class.iter().all(|v| *v == Some(100.0));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prevalence = [0.1, 0.3, 0.5];
    let n = 1000;
    let emb = Mat::from_shape_fn((n, 24), |_| rng.gen_range(-1.0..1.0));
    let mut labels = Mat::zeros((n, prevalence.len()));
    for (c, p) in prevalence.iter().enumerate() {
        let pos = (p * n as f64).round() as usize;
        let mut col: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i < pos))).collect();
        col.shuffle(&mut rng);
        for (i, v) in col.into_iter().enumerate() {
            labels[[i, c]] = v;
        }
    }
    let shuffled = chexpert_at_10(&emb, &labels).unwrap();
    let gaps: Vec<f64> = shuffled
        .per_class
        .iter()
        .zip(prevalence)
        .map(|(v, p)| (v.unwrap() - 100.0 * p).abs())
        .collect();

    let s = shared();
    let (points, _) = run_forgetting_probe(&s.lab, &s.base).unwrap();
    let dir = work_dir("probe");
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join(format!("probe{FORGETTING_SUFFIX}")), forgetting_csv(&points).unwrap()).unwrap();
    let produced = render_dir(&data, &dir.join("out")).unwrap();
    let plot = produced.iter().any(|p| p.extension().is_some_and(|e| e == "png") && p.is_file());

    let ok = perfect_ok && gaps.iter().all(|g| *g <= 5.0) && points.len() >= 3 && plot;
    verdict(
        12,
        "CheXpert@10 probe",
        ok,
        &format!(
            "perfect {:?}; shuffled gaps {gaps:.2?}; forgetting series over {} checkpoints, plot written {plot}",
            perfect.per_class,
            points.len()
        ),
    );
}
