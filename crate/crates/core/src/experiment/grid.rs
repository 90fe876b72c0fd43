//! The fine-tuning grid: one trained and evaluated generator per config.

use crate::adaptation::{run, FineTuneConfig, Strategy, TrainingRunRecord};
use crate::correctness::EvalReport;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;

use super::{Lab, Suite};

pub const ORIGINAL: &str = "original";

/// One grid cell.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub report: EvalReport,
    pub run: Option<TrainingRunRecord>,
}

/// Trains every config from a clone of `base` and evaluates it with `suite`.
/// The untrained "original" row is always first. A diverged run yields a
/// flagged row and the grid continues. `on_trained` sees each trained
/// pipeline (for saving checkpoints).
pub fn run_finetune_grid(
    lab: &Lab,
    base: &Pipeline,
    configs: &[FineTuneConfig],
    suite: &Suite,
    on_trained: &mut dyn FnMut(&FineTuneConfig, &Pipeline, &TrainingRunRecord) -> Result<()>,
) -> Result<Vec<GridRow>> {
    let mut all: Vec<FineTuneConfig> = Vec::with_capacity(configs.len() + 1);
    if !configs.iter().any(|c| c.name == ORIGINAL) {
        all.push(FineTuneConfig::preset(ORIGINAL)?);
    }
    all.extend(configs.iter().cloned());
    if let Some(i) = all.iter().position(|c| c.name == ORIGINAL) {
        all[..=i].rotate_right(1);
    }
    let need_prior = all.iter().any(|c| c.strategy == Strategy::Dreambooth);
    let data = lab.training_set(base)?;
    let prior = if need_prior { Some(lab.general_set(base)?) } else { None };
    let mut rows = Vec::with_capacity(all.len());
    for cfg in &all {
        let mut report = EvalReport::new(
            format!("finetune:{}", cfg.name),
            lab.config_fingerprint(cfg),
            lab.corpus_fingerprint.clone(),
        );
        let mut p = base.clone();
        let run_rec = match run(&mut p, cfg, &data, prior.as_ref()) {
            Ok(r) => r,
            Err(Error::TrainingDiverged { step, loss }) => {
                report.flags.push(format!("diverged at step {step} (loss {loss})"));
                rows.push(GridRow { report, run: None });
                continue;
            }
            Err(e) => return Err(e),
        };
        on_trained(cfg, &p, &run_rec)?;
        let n = run_rec.losses.len();
        if n > 0 {
            let tail = (n / 10).max(1);
            report.insert("final_loss", run_rec.mean_loss(n - tail..n));
        }
        report.insert("train_steps", cfg.train_steps as f64);
        suite.evaluate(&p, &mut report)?;
        rows.push(GridRow {
            report,
            run: Some(run_rec),
        });
    }
    Ok(rows)
}
