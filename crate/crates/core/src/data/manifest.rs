//! Line-delimited corpus manifest with 8-bit PNG images alongside.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVector, ReportRecord, Split, View};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub schema_version: u32,
    pub record_id: String,
    pub image_path: String,
    pub impression: String,
    pub view: View,
    pub labels: String,
    pub split: Split,
    pub subgroup: u8,
}

impl ManifestLine {
    pub fn record(&self) -> Result<ReportRecord> {
        let labels = LabelVector::decode(&self.labels)
            .ok_or_else(|| Error::Format(format!("bad label string {:?}", self.labels)))?;
        Ok(ReportRecord {
            record_id: self.record_id.clone(),
            impression: self.impression.clone(),
            view: self.view,
            labels,
            split: self.split,
            subgroup: self.subgroup,
        })
    }
}

/// Writes `images/<record_id>.png` under `dir` and a `manifest.jsonl` listing them.
pub fn write_manifest<F>(dir: &Path, records: &[ReportRecord], mut image: F) -> Result<PathBuf>
where
    F: FnMut(&ReportRecord) -> Result<GrayImage>,
{
    fs::create_dir_all(dir.join("images"))?;
    let path = dir.join("manifest.jsonl");
    let mut out = BufWriter::new(File::create(&path)?);
    for r in records {
        let rel = format!("images/{}.png", r.record_id);
        image(r)?.save_png(&dir.join(&rel))?;
        let line = ManifestLine {
            schema_version: MANIFEST_SCHEMA_VERSION,
            record_id: r.record_id.clone(),
            image_path: rel,
            impression: r.impression.clone(),
            view: r.view,
            labels: r.labels.encode(),
            split: r.split,
            subgroup: r.subgroup,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

/// Reads a manifest; image paths are resolved relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(ReportRecord, PathBuf)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}:{}: unsupported schema version {}",
                path.display(),
                i + 1,
                m.schema_version
            )));
        }
        out.push((m.record()?, base.join(&m.image_path)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_corpus_generate, CorpusSpec};

    #[test]
    fn manifest_round_trip() {
        let spec = CorpusSpec {
            train_size: 6,
            test_size: 2,
            ..Default::default()
        };
        let c = toy_corpus_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &c.records, |r| c.image(r)).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.len(), 8);
        for ((r, img), orig) in back.iter().zip(&c.records) {
            assert_eq!(r, orig);
            let loaded = GrayImage::load_png(img).unwrap();
            assert_eq!(loaded, c.image(orig).unwrap().quantized());
        }
    }
}
