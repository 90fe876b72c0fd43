//! Markdown tables and plots from collected result files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::correctness::EvalReport;
use crate::error::{Error, Result};

use super::plot::{save_plot, Series, PALETTE_NAMES};

pub const REPORT_EXT: &str = "kv";
pub const LOSS_SUFFIX: &str = ".loss.csv";
pub const DIVERSITY_SUFFIX: &str = ".diversity.csv";
pub const FORGETTING_SUFFIX: &str = ".forgetting.csv";

/// File-name-safe form of a task id.
pub fn file_stem(task: &str) -> String {
    task.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<PathBuf> {
    let path = dir.join(format!("{}.{REPORT_EXT}", file_stem(&report.task)));
    std::fs::write(&path, report.to_kv()?)?;
    Ok(path)
}

fn split_task(task: &str) -> (&str, &str) {
    task.split_once(':').unwrap_or((task, task))
}

/// One table per task family (`family:row`), rows in input order, metric
/// columns sorted, fingerprints last, then any flags.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let mut families: Vec<&str> = Vec::new();
    let mut by_family: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let (fam, _) = split_task(&r.task);
        if !by_family.contains_key(fam) {
            families.push(fam);
        }
        by_family.entry(fam).or_default().push(r);
    }
    let mut out = String::from("# Results\n");
    for fam in families {
        let rows = &by_family[fam];
        let cols: BTreeSet<&str> = rows.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
        out.push_str(&format!("\n## {fam}\n\n| row |"));
        for c in &cols {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str(" config | corpus |\n|---|");
        out.push_str(&"---|".repeat(cols.len() + 2));
        out.push('\n');
        for r in rows {
            out.push_str(&format!("| {} |", split_task(&r.task).1));
            for c in &cols {
                match r.get(c) {
                    Some(v) => out.push_str(&format!(" {v:.4} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push_str(&format!(" {} | {} |\n", r.config_fingerprint, r.corpus_fingerprint));
        }
        let flagged: Vec<String> = rows
            .iter()
            .flat_map(|r| r.flags.iter().map(move |f| format!("- {}: {f}\n", split_task(&r.task).1)))
            .collect();
        if !flagged.is_empty() {
            out.push_str("\nFlags:\n\n");
            out.extend(flagged);
        }
    }
    out
}

#[derive(Deserialize)]
struct LossRow {
    step: f64,
    loss: f64,
}

#[derive(Deserialize)]
struct BinRow {
    bin_lo: f64,
    bin_hi: f64,
    mean: f64,
    ci_lo: f64,
    ci_hi: f64,
}

#[derive(Deserialize)]
struct ForgetRow {
    step: f64,
    in_domain_macro: f64,
    general_macro: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn plot_series(path: &Path, name: &str) -> Result<Option<Vec<Series>>> {
    let series = |label: &str, points: Vec<(f64, f64)>| Series {
        name: label.to_string(),
        points,
    };
    Ok(Some(if name.ends_with(LOSS_SUFFIX) {
        let rows: Vec<LossRow> = read_rows(path)?;
        vec![series("loss", rows.iter().map(|r| (r.step, r.loss)).collect())]
    } else if name.ends_with(DIVERSITY_SUFFIX) {
        let rows: Vec<BinRow> = read_rows(path)?;
        let mid = |r: &BinRow| (r.bin_lo + r.bin_hi) / 2.0;
        vec![
            series("mean", rows.iter().map(|r| (mid(r), r.mean)).collect()),
            series("ci_lo", rows.iter().map(|r| (mid(r), r.ci_lo)).collect()),
            series("ci_hi", rows.iter().map(|r| (mid(r), r.ci_hi)).collect()),
        ]
    } else if name.ends_with(FORGETTING_SUFFIX) {
        let rows: Vec<ForgetRow> = read_rows(path)?;
        vec![
            series("in-domain", rows.iter().map(|r| (r.step, r.in_domain_macro)).collect()),
            series("general", rows.iter().map(|r| (r.step, r.general_macro)).collect()),
        ]
    } else {
        return Ok(None);
    }))
}

/// Reads every `*.kv` report and recognised CSV in `input`, writes
/// `report.md`, one PNG per CSV and `manifest.txt` into `output`. Returns the
/// produced paths.
pub fn render_dir(input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    std::fs::create_dir_all(output)?;
    let mut reports = Vec::new();
    let mut plots = Vec::new();
    let mut produced = Vec::new();
    for path in &entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.extension().and_then(|e| e.to_str()) == Some(REPORT_EXT) {
            let text = std::fs::read_to_string(path)?;
            reports.push(EvalReport::from_kv(&text).map_err(|e| Error::Format(format!("{name}: {e}")))?);
        } else if let Some(series) = plot_series(path, &name)? {
            let png = output.join(format!("{}.png", name.trim_end_matches(".csv")));
            save_plot(&series, &png)?;
            let legend: Vec<String> = series
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}: {}", PALETTE_NAMES[i % PALETTE_NAMES.len()], s.name))
                .collect();
            plots.push(format!(
                "- `{}` ({})\n",
                png.file_name().unwrap().to_string_lossy(),
                legend.join(", ")
            ));
            produced.push(png);
        }
    }
    if reports.is_empty() && plots.is_empty() {
        return Err(Error::invalid(format!("no reports or plot data in {}", input.display())));
    }
    let mut md = render_markdown(&reports);
    if !plots.is_empty() {
        md.push_str("\n## Plots\n\n");
        md.extend(plots);
    }
    let md_path = output.join("report.md");
    std::fs::write(&md_path, md)?;
    produced.insert(0, md_path);
    let manifest = output.join("manifest.txt");
    let listing: String = produced
        .iter()
        .map(|p| format!("{}\n", p.file_name().unwrap().to_string_lossy()))
        .collect();
    std::fs::write(&manifest, listing)?;
    produced.push(manifest);
    Ok(produced)
}
