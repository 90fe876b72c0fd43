//! `latentlab` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use latentlab::adaptation::{self, FineTuneConfig};
use latentlab::checkpoint::{load_checkpoint, save_checkpoint};
use latentlab::correctness::{reports_csv, ClassifierConfig, EvalReport, MultiLabelClassifier, OracleClassifier};
use latentlab::data::manifest::write_manifest;
use latentlab::data::CountTable;
use latentlab::error::{Error, Result};
use latentlab::experiment::report::{file_stem, render_dir, write_report, FORGETTING_SUFFIX, LOSS_SUFFIX};
use latentlab::experiment::{self as exp, ExperimentConfig, ExperimentKind, Lab, Suite};
use latentlab::fidelity::{
    extract_features, fid, ms_ssim_with, read_feature_set, write_feature_set, ExtractorRegistry, MsSsimConfig,
    RandomProjection,
};
use latentlab::image::GrayImage;
use latentlab::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "latentlab", version, about = "Latent diffusion domain adaptation experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment named by the config's `kind`.
    Run,
    /// Toy corpus generation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Trains grid entries from the base pipeline and saves checkpoints.
    Train(TrainArgs),
    /// Draws images from a checkpoint.
    Sample(SampleArgs),
    /// Fidelity and correctness metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Classifier training on real and generated mixes.
    AugmentStudy,
    /// Text-encoder probe across fine-tuning checkpoints.
    ProbeForgetting,
    /// Tables and plots from result files.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Prints the effective config as TOML.
    Config,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Writes the curated corpus as a manifest, PNGs and a count table.
    Build {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name; repeatable. Defaults to the config's grid.
    #[arg(long)]
    preset: Vec<String>,
    /// Checkpoint path (single preset only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Fréchet distance between two feature files.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Writes a feature file for a directory of PNGs.
    Extract {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// MS-SSIM between two PNGs.
    Msssim {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 5)]
        scales: usize,
    },
    /// Classifier AUROC on images generated from test prompts.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Image-image and image-text retrieval with generated queries.
    Retrieval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Text metrics for captions of generated images, or for a CSV of pairs.
    TextMetrics {
        #[arg(long, required_unless_present = "pairs")]
        checkpoint: Option<PathBuf>,
        /// CSV with `generated,reference` columns.
        #[arg(long, conflicts_with = "checkpoint")]
        pairs: Option<PathBuf>,
    },
    /// Nearest-neighbour label agreement of text embeddings.
    Chexpert10 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Collects result files into markdown tables and plots.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_checkpoint(path: &Path) -> Result<Pipeline> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?.0)
}

fn save_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let path = write_report(dir, report)?;
    print!("{}", report.to_kv()?);
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn corpus_build(lab: &Lab, out: &Path) -> Result<()> {
    let mut records = lab.splits.train.clone();
    records.extend(lab.splits.test.iter().cloned());
    let manifest = write_manifest(out, &records, |r| lab.corpus.image(r))?;
    let csv = CountTable::to_csv(&[("train", &lab.splits.train_table), ("test", &lab.splits.test_table)]);
    std::fs::write(out.join("counts.csv"), csv)?;
    println!("{} records -> {}", records.len(), manifest.display());
    Ok(())
}

fn save_trained(dir: &Path, path: Option<&Path>, cfg: &FineTuneConfig, p: &Pipeline, run: &adaptation::TrainingRunRecord) -> Result<()> {
    let ckpt = path.map_or_else(|| dir.join(format!("{}.safetensors", file_stem(&cfg.name))), Path::to_path_buf);
    let hash = save_checkpoint(&ckpt, p, Some(run))?;
    std::fs::write(dir.join(format!("{}{LOSS_SUFFIX}", file_stem(&cfg.name))), run.loss_csv()?)?;
    println!("{} {} {hash}", cfg.name, ckpt.display());
    Ok(())
}

fn train_cmd(lab: &Lab, dir: &Path, args: &TrainArgs) -> Result<()> {
    let configs = if args.preset.is_empty() {
        lab.config.grid_configs()?
    } else {
        args.preset.iter().map(|n| FineTuneConfig::preset(n)).collect::<Result<_>>()?
    };
    if args.out.is_some() && configs.len() != 1 {
        return Err(Error::Config("--out needs exactly one preset".into()));
    }
    let base = lab.base_pipeline()?;
    let data = lab.training_set(&base)?;
    let prior = if configs.iter().any(|c| c.strategy == adaptation::Strategy::Dreambooth) {
        Some(lab.general_set(&base)?)
    } else {
        None
    };
    for cfg in &configs {
        let mut p = base.clone();
        let run = adaptation::run(&mut p, cfg, &data, prior.as_ref())?;
        save_trained(dir, args.out.as_deref(), cfg, &p, &run)?;
    }
    Ok(())
}

fn grid(lab: &Lab, dir: &Path) -> Result<()> {
    let base = lab.base_pipeline()?;
    let cls = (lab.config.eval.classify || lab.config.eval.classifier_features)
        .then(|| lab.oracle_classifier().map(Arc::new))
        .transpose()?;
    let suite = Suite::new(lab, cls)?;
    let rows = exp::run_finetune_grid(lab, &base, &lab.config.grid_configs()?, &suite, &mut |cfg, p, run| {
        save_trained(dir, None, cfg, p, run)
    })?;
    let reports: Vec<EvalReport> = rows.into_iter().map(|r| r.report).collect();
    for r in &reports {
        write_report(dir, r)?;
    }
    let mut cols: Vec<String> = reports.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    cols.sort();
    cols.dedup();
    std::fs::write(dir.join("grid.csv"), reports_csv(&reports, &cols)?)?;
    println!("{}", latentlab::experiment::report::render_markdown(&reports));
    Ok(())
}

fn augment(lab: &Lab, dir: &Path) -> Result<()> {
    let cfg = &lab.config;
    let table = exp::run_augmentation_study(
        lab,
        &cfg.augmentation,
        &cfg.sampler,
        &mut |_, c: &ClassifierConfig| Ok(Box::new(OracleClassifier::new(c.clone())?) as Box<dyn MultiLabelClassifier>),
        &mut |path: &Path| open_checkpoint(path),
    )?;
    for r in &table.reports {
        write_report(dir, r)?;
    }
    std::fs::write(dir.join("augmentation.csv"), table.to_csv()?)?;
    print!("{}", table.to_csv()?);
    println!(
        "reference auroc: baseline {} best {}",
        table.reference_baseline_auroc, table.reference_best_auroc
    );
    Ok(())
}

fn probe(lab: &Lab, dir: &Path) -> Result<()> {
    let base = lab.base_pipeline()?;
    let (points, report) = exp::run_forgetting_probe(lab, &base)?;
    let csv = latentlab::correctness::probe::forgetting_csv(&points)?;
    std::fs::write(dir.join(format!("probe{FORGETTING_SUFFIX}")), &csv)?;
    print!("{csv}");
    write_report(dir, &report)?;
    Ok(())
}

fn read_pngs(dir: &Path) -> Result<Vec<GrayImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("png"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", dir.display())));
    }
    paths.iter().map(|p| GrayImage::load_png(p)).collect()
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name:?}", path.display())))
    };
    let (g, r) = (col("generated")?, col("reference")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push((rec[g].to_string(), rec[r].to_string()));
    }
    Ok(out)
}

fn eval_cmd(cli: &Cli, cmd: &EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Fid { real, generated } => {
            println!("{}", fid(&read_feature_set(real)?, &read_feature_set(generated)?)?);
            return Ok(());
        }
        EvalCmd::Extract { images, out, dim } => {
            let cfg = load_config(cli)?;
            let imgs = read_pngs(images)?;
            let proj = RandomProjection::new(cfg.corpus.image_size, *dim, cfg.seed);
            let mut reg = ExtractorRegistry::new();
            reg.register(Arc::new(proj));
            let id = reg.ids().remove(0);
            let fs = extract_features(&imgs, &reg, &id)?;
            write_feature_set(out, &fs)?;
            println!("{} {}x{} {}", id, fs.n(), fs.d(), out.display());
            return Ok(());
        }
        EvalCmd::Msssim { a, b, scales } => {
            let cfg = MsSsimConfig::with_scales(*scales)?;
            println!("{}", ms_ssim_with(&GrayImage::load_png(a)?, &GrayImage::load_png(b)?, &cfg)?);
            return Ok(());
        }
        EvalCmd::TextMetrics { pairs: Some(p), .. } => {
            print!("{}", exp::eval_text_pairs(&read_pairs(p)?)?.to_kv()?);
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    let dir = cfg.prepare_output()?;
    let lab = Lab::new(cfg)?;
    let report = match cmd {
        EvalCmd::Classify { checkpoint } => {
            let p = open_checkpoint(checkpoint)?;
            exp::eval_classify(&lab, &p, &lab.oracle_classifier()?)?
        }
        EvalCmd::Retrieval { checkpoint } => {
            let p = open_checkpoint(checkpoint)?;
            exp::eval_retrieval(&lab, &p, &lab.oracle_classifier()?)?
        }
        EvalCmd::TextMetrics {
            checkpoint: Some(c), ..
        } => {
            let p = open_checkpoint(c)?;
            exp::eval_text_metrics(&lab, &p, &lab.oracle_classifier()?)?
        }
        EvalCmd::Chexpert10 { checkpoint } => {
            let p = match checkpoint {
                Some(c) => open_checkpoint(c)?,
                None => lab.base_pipeline()?,
            };
            exp::eval_chexpert10(&lab, &p.text_encoder)?
        }
        _ => unreachable!("handled above"),
    };
    save_report(&dir, &report)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Report(ReportCmd::Render { input, out }) => {
            for p in render_dir(input, out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval(cmd) => eval_cmd(cli, cmd),
        Command::Config => {
            print!("{}", load_config(cli)?.to_toml());
            Ok(())
        }
        Command::Sample(a) => {
            let cfg = load_config(cli)?;
            let p = open_checkpoint(&a.checkpoint)?;
            let mut sampler = cfg.sampler;
            sampler.seed = cli.seed.unwrap_or(sampler.seed);
            if let Some(s) = a.steps {
                sampler.num_inference_steps = s;
            }
            if let Some(g) = a.guidance {
                sampler.guidance_scale = g;
            }
            let images = p.generate_many(&vec![a.prompt.clone(); a.n], &sampler, 16)?;
            std::fs::create_dir_all(&a.out)?;
            for (i, img) in images.iter().enumerate() {
                let path = a.out.join(format!("sample_{i:03}.png"));
                img.save_png(&path)?;
                println!("{}", path.display());
            }
            Ok(())
        }
        cmd => {
            let cfg = load_config(cli)?;
            let dir = cfg.prepare_output()?;
            let kind = match cmd {
                Command::Run => cfg.kind,
                Command::Corpus(_) => ExperimentKind::CorpusBuild,
                Command::AugmentStudy => ExperimentKind::AugmentationStudy,
                Command::ProbeForgetting => ExperimentKind::ForgettingProbe,
                _ => ExperimentKind::FinetuneGrid,
            };
            let lab = Lab::new(cfg)?;
            match (cmd, kind) {
                (Command::Train(a), _) => train_cmd(&lab, &dir, a),
                (Command::Corpus(CorpusCmd::Build { out }), _) => {
                    corpus_build(&lab, &out.clone().unwrap_or_else(|| dir.join("corpus")))
                }
                (_, ExperimentKind::CorpusBuild) => corpus_build(&lab, &dir.join("corpus")),
                (_, ExperimentKind::FinetuneGrid | ExperimentKind::EvalSuite) => grid(&lab, &dir),
                (_, ExperimentKind::AugmentationStudy) => augment(&lab, &dir),
                (_, ExperimentKind::ForgettingProbe) => probe(&lab, &dir),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
