//! Single-block transformer text encoder with learned positions.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_linear, init_norm, linear, norm};
use super::tokenizer::Tokenizer;
use super::Context;
use crate::autograd::{AttnLayout, Graph, Mat};
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamSet};

pub const PREFIX: &str = "te";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ff: 128 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
}

pub fn token_table_name() -> String {
    format!("{PREFIX}.tok_emb")
}

impl TextEncoder {
    pub fn new<R: Rng>(config: TextEncoderConfig, tokenizer: Tokenizer, rng: &mut R) -> Self {
        let d = config.d_model;
        let mut ps = ParamSet::new();
        ps.insert(token_table_name(), init_normal(rng, tokenizer.vocab_size(), d, 0.5));
        ps.insert(format!("{PREFIX}.pos_emb"), init_normal(rng, tokenizer.max_tokens, d, 0.2));
        init_norm(&mut ps, &format!("{PREFIX}.ln1"), d);
        for n in ["q", "k", "v", "o"] {
            init_linear(&mut ps, rng, &format!("{PREFIX}.attn.{n}"), d, d, 1.0);
        }
        init_norm(&mut ps, &format!("{PREFIX}.ln2"), d);
        init_linear(&mut ps, rng, &format!("{PREFIX}.ff1"), d, config.d_ff, 1.0);
        init_linear(&mut ps, rng, &format!("{PREFIX}.ff2"), config.d_ff, d, 1.0);
        init_norm(&mut ps, &format!("{PREFIX}.ln_out"), d);
        Self {
            config,
            tokenizer,
            params: ps,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(&token_table_name()).nrows()
    }

    /// Registers a new token and appends an embedding row for it,
    /// initialised from the mean of the existing rows plus small noise.
    pub fn add_token<R: Rng>(&mut self, token: &str, rng: &mut R) -> Result<usize> {
        let id = self.tokenizer.add_token(token)?;
        let name = token_table_name();
        let table = self.params.get(&name);
        let d = table.ncols();
        let mean = table.mean_axis(ndarray::Axis(0)).expect("nonempty table");
        let noise = init_normal(rng, 1, d, 0.05);
        let mut grown = Mat::zeros((table.nrows() + 1, d));
        grown.slice_mut(ndarray::s![..table.nrows(), ..]).assign(table);
        grown.row_mut(id).assign(&(&mean + &noise.row(0)));
        self.params.insert(name, grown);
        Ok(id)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.tokenizer.encode(text)
    }

    /// Batched forward pass; sequences are right-padded to the longest one.
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Context> {
        if batch.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let vocab = self.vocab_size();
        let len = batch.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || len > self.tokenizer.max_tokens {
            return Err(Error::invalid(format!(
                "sequence length {len} outside 1..={}",
                self.tokenizer.max_tokens
            )));
        }
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut pos = Vec::with_capacity(batch.len() * len);
        for seq in batch {
            if let Some(&bad) = seq.iter().find(|&&i| i >= vocab) {
                return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
            }
            if seq.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            ids.extend(seq.iter().copied());
            ids.extend(std::iter::repeat(self.tokenizer.pad_id()).take(len - seq.len()));
            pos.extend(0..len);
        }
        let d = self.d_model();
        let ps = &self.params;
        let table = g.param(&token_table_name(), ps.get(&token_table_name()));
        let pos_name = format!("{PREFIX}.pos_emb");
        let pos_table = g.param(&pos_name, ps.get(&pos_name));
        let tok = g.gather_rows(table, Rc::new(ids));
        let p = g.gather_rows(pos_table, Rc::new(pos));
        let x = g.add(tok, p);

        let lens: Vec<usize> = batch.iter().map(Vec::len).collect();
        let layout = Rc::new(AttnLayout {
            batch: batch.len(),
            q_len: len,
            k_len: len,
            k_valid: lens.clone(),
            scale: 1.0 / (d as f64).sqrt(),
        });
        let h = norm(g, ps, &format!("{PREFIX}.ln1"), x);
        let q = linear(g, ps, &format!("{PREFIX}.attn.q"), h);
        let k = linear(g, ps, &format!("{PREFIX}.attn.k"), h);
        let v = linear(g, ps, &format!("{PREFIX}.attn.v"), h);
        let a = g.attention(q, k, v, layout);
        let a = linear(g, ps, &format!("{PREFIX}.attn.o"), a);
        let x = g.add(x, a);
        let h = norm(g, ps, &format!("{PREFIX}.ln2"), x);
        let h = linear(g, ps, &format!("{PREFIX}.ff1"), h);
        let h = g.silu(h);
        let h = linear(g, ps, &format!("{PREFIX}.ff2"), h);
        let x = g.add(x, h);
        let out = norm(g, ps, &format!("{PREFIX}.ln_out"), x);
        Ok(Context { var: out, lens, len })
    }

    /// `(token_count, d_model)` embedding of one id sequence.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let ctx = self.forward(&mut g, &[ids.to_vec()])?;
        Ok(g.value(ctx.var).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Mat> {
        self.encode_ids(&self.tokenize(text)?)
    }

    /// Mean-pooled embedding over real tokens, one row per text (for probes).
    pub fn pooled(&self, texts: &[String]) -> Result<Mat> {
        let mut out = Mat::zeros((texts.len(), self.d_model()));
        for (chunk_i, chunk) in texts.chunks(256).enumerate() {
            let ids = chunk
                .iter()
                .map(|t| self.tokenize(t))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let ctx = self.forward(&mut g, &ids)?;
            let v = g.value(ctx.var);
            for (b, l) in ctx.lens.iter().enumerate() {
                let rows = v.slice(ndarray::s![b * ctx.len..b * ctx.len + l, ..]);
                out.row_mut(chunk_i * 256 + b)
                    .assign(&rows.mean_axis(ndarray::Axis(0)).expect("nonempty"));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TextEncoder {
        let cfg = TextEncoderConfig { d_model: 8, d_ff: 12 };
        TextEncoder::new(cfg, Tokenizer::default(), &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn shape_and_position_sensitivity() {
        let te = small();
        let t = &te.tokenizer;
        let ids = vec![t.bos_id(), t.id("large").unwrap(), t.id("left").unwrap(), t.id("effusion").unwrap(), t.eos_id()];
        let a = te.encode_ids(&ids).unwrap();
        assert_eq!(a.dim(), (5, 8));
        let mut swapped = ids.clone();
        swapped.swap(1, 2);
        assert_ne!(a, te.encode_ids(&swapped).unwrap());
        assert!(te.encode_ids(&[te.vocab_size()]).is_err());
    }

    #[test]
    fn padding_does_not_leak_into_real_tokens() {
        let te = small();
        let short = te.tokenize("No edema.").unwrap();
        let long = te.tokenize("Large left-sided pleural effusion with small right-sided pneumonia.").unwrap();
        let alone = te.encode_ids(&short).unwrap();
        let mut g = Graph::new();
        let ctx = te.forward(&mut g, &[long.clone(), short.clone()]).unwrap();
        let v = g.value(ctx.var);
        let batched = v.slice(ndarray::s![ctx.len..ctx.len + short.len(), ..]);
        for (a, b) in alone.iter().zip(batched.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn readout(te: &TextEncoder, ps: &ParamSet) -> (f64, std::collections::HashMap<String, Mat>) {
        let probe = TextEncoder { params: ps.clone(), ..te.clone() };
        let ids = vec![
            probe.tokenize("Large left-sided effusion.").unwrap(),
            probe.tokenize("No edema.").unwrap(),
        ];
        let mut g = Graph::new();
        let ctx = probe.forward(&mut g, &ids).unwrap();
        let w = g.input(Mat::from_shape_fn(g.value(ctx.var).dim(), |(r, c)| ((r * 3 + c) as f64).sin()));
        let y = g.mul(ctx.var, w);
        let s = g.sum(y);
        (g.scalar(s), g.backward(s).into_param_map())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let te = small();
        let (_, grads) = readout(&te, &te.params);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let checks = grad_check(&te.params, &grads, 40, 1e-5, &mut rng, |p| readout(&te, p).0);
        for c in checks {
            assert!(c.rel_err < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn add_token_grows_table_by_one_row() {
        let mut te = small();
        let n = te.vocab_size();
        te.add_token("<chest-xray>", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(te.vocab_size(), n + 1);
        assert_eq!(te.encode_text("<chest-xray>").unwrap().nrows(), 3);
    }
}
