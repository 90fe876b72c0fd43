//! Pipeline checkpoints: every parameter tensor in a safetensors container,
//! with configuration, tokenizer and run record in its JSON metadata.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::TrainingRunRecord;
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::text_encoder::token_table_name;
use crate::nn::Tokenizer;
use crate::params::ParamSet;
use crate::pipeline::{DomainBagEncoder, Pipeline, PipelineConfig, PluginConditioning, TextPlugin, PLUGIN_SEED};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "latentlab";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginRef {
    pub id: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub pipeline: PipelineConfig,
    pub tokenizer: Tokenizer,
    pub vae_scaling_factor: f64,
    pub plugin: Option<PluginRef>,
    pub content_hash: String,
    pub run: Option<TrainingRunRecord>,
}

/// All tensors of the pipeline in one set (names carry component prefixes).
pub fn pipeline_tensors(p: &Pipeline) -> ParamSet {
    let mut all = ParamSet::new();
    for ps in p.all_params().values() {
        all.extend((*ps).clone());
    }
    all
}

/// Hash of everything that determines the pipeline's outputs: tensors,
/// vocabulary, latent scaling and plugin identity.
pub fn checkpoint_hash(p: &Pipeline) -> String {
    let mut h = Sha256::new();
    h.update(pipeline_tensors(p).hash().as_bytes());
    h.update(serde_json::to_vec(&p.text_encoder.tokenizer).expect("tokenizer serialises"));
    h.update(p.vae.scaling_factor.to_le_bytes());
    if let Some(pc) = &p.plugin {
        h.update(pc.plugin.id().as_bytes());
        h.update(pc.plugin.fingerprint().as_bytes());
    }
    hex::encode(h.finalize())
}

fn meta_of(p: &Pipeline, run: Option<&TrainingRunRecord>) -> CheckpointMeta {
    CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        pipeline: p.config,
        tokenizer: p.text_encoder.tokenizer.clone(),
        vae_scaling_factor: p.vae.scaling_factor,
        plugin: p.plugin.as_ref().map(|pc| PluginRef {
            id: pc.plugin.id().to_string(),
            fingerprint: pc.plugin.fingerprint(),
        }),
        content_hash: checkpoint_hash(p),
        run: run.cloned(),
    }
}

/// Serialised checkpoint bytes.
pub fn to_bytes(p: &Pipeline, run: Option<&TrainingRunRecord>) -> Result<Vec<u8>> {
    let tensors = pipeline_tensors(p);
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, m)| {
            let bytes = m.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), vec![m.nrows(), m.ncols()], bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta_of(p, run))?)]);
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Format(e.to_string()))
}

/// Writes a checkpoint and returns its content hash.
pub fn save_checkpoint(path: &Path, p: &Pipeline, run: Option<&TrainingRunRecord>) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(p, run)?)?;
    Ok(checkpoint_hash(p))
}

pub fn load_checkpoint(path: &Path) -> Result<(Pipeline, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

/// Reads only the metadata block.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, md) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let json = md
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format("checkpoint lacks its metadata block".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json)?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    Ok(meta)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Pipeline, CheckpointMeta)> {
    let meta = read_meta(bytes)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut loaded = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(Error::Format(format!("tensor {name} is not a 2-D f64 array")));
        }
        let vals: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((view.shape()[0], view.shape()[1]), vals)
            .map_err(|e| Error::Format(e.to_string()))?;
        loaded.insert(name, m);
    }

    let mut p = Pipeline::new(meta.pipeline, 0)?;
    if meta.tokenizer.max_tokens != p.max_tokens() {
        return Err(Error::Integrity("tokenizer limit disagrees with pipeline config".into()));
    }
    p.text_encoder.tokenizer = meta.tokenizer.clone();
    p.vae.scaling_factor = meta.vae_scaling_factor;
    let vocab = p.text_encoder.tokenizer.vocab_size();
    fill(&mut p.vae.params, &mut loaded, None)?;
    fill(&mut p.text_encoder.params, &mut loaded, Some((token_table_name(), vocab)))?;
    fill(&mut p.unet.params, &mut loaded, None)?;
    if let Some(r) = &meta.plugin {
        let plugin: Arc<dyn TextPlugin> = Arc::new(DomainBagEncoder::from_id(&r.id, PLUGIN_SEED)?);
        if plugin.fingerprint() != r.fingerprint {
            return Err(Error::Integrity(format!("plugin {} does not match its recorded fingerprint", r.id)));
        }
        let mut pc = PluginConditioning::new(plugin, p.d_text(), 0)?;
        let mut head = ParamSet::new();
        for name in pc.head.names() {
            let m = loaded
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {name}")))?;
            head.insert(name, m);
        }
        pc.head = head;
        pc.check(p.d_text())?;
        p.plugin = Some(pc);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Integrity(format!("unexpected tensor {extra}")));
    }
    if checkpoint_hash(&p) != meta.content_hash {
        return Err(Error::Integrity("content hash mismatch".into()));
    }
    Ok((p, meta))
}

/// Replaces every tensor of `ps` with the loaded one of the same name and
/// shape; `grown` names a tensor whose row count comes from the vocabulary.
fn fill(ps: &mut ParamSet, loaded: &mut HashMap<String, Mat>, grown: Option<(String, usize)>) -> Result<()> {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let m = loaded
            .remove(&name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {name}")))?;
        let mut want = ps.get(&name).dim();
        if let Some((g, rows)) = &grown {
            if *g == name {
                want.0 = *rows;
            }
        }
        if m.dim() != want {
            return Err(Error::Integrity(format!("{name} has shape {:?}, expected {want:?}", m.dim())));
        }
        ps.insert(name, m);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{TextEncoderConfig, UNetConfig, VaeConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Pipeline {
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
    fn round_trip_preserves_every_tensor() {
        let mut p = tiny();
        p.text_encoder
            .add_token("<chest-xray>", &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        p.vae.scaling_factor = 0.37;
        let bytes = to_bytes(&p, None).unwrap();
        let (q, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_hash(&p), checkpoint_hash(&q));
        assert_eq!(meta.content_hash, checkpoint_hash(&p));
        assert!(pipeline_tensors(&p).diff(&pipeline_tensors(&q)).is_empty());
        assert_eq!(q.text_encoder.tokenizer.id("<chest-xray>"), p.text_encoder.tokenizer.id("<chest-xray>"));
    }

    #[test]
    fn plugin_head_round_trips() {
        let plugin = Arc::new(DomainBagEncoder::from_id("domain-bag-6", PLUGIN_SEED).unwrap());
        let mut p = tiny();
        p.set_plugin(plugin, 3).unwrap();
        let (q, _) = from_bytes(&to_bytes(&p, None).unwrap()).unwrap();
        assert_eq!(q.plugin.as_ref().unwrap().head, p.plugin.as_ref().unwrap().head);
        assert_eq!(checkpoint_hash(&p), checkpoint_hash(&q));
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Format(_))));
    }
}
