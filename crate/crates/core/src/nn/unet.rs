//! Two-resolution conditional U-Net predicting the noise in a latent.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv3x3, init_conv, init_linear, init_norm, linear, norm, timestep_embedding, upsample, Grid};
use super::Context;
use crate::autograd::{AttnLayout, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const PREFIX: &str = "unet";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Channels at the full and the half latent resolution.
    pub channels: [usize; 2],
    /// Cross-attention context dimension (the text embedding width).
    pub context_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    /// Zero-initialise the output convolution.
    pub zero_init_out: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: [32, 64],
            context_dim: 64,
            attn_dim: 32,
            time_dim: 32,
            zero_init_out: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet,
}

fn init_res<R: Rng>(ps: &mut ParamSet, rng: &mut R, n: &str, cin: usize, cout: usize, temb: usize) {
    init_norm(ps, &format!("{n}.norm1"), cin);
    init_conv(ps, rng, &format!("{n}.conv1"), cin, cout, 1.4);
    init_linear(ps, rng, &format!("{n}.temb"), temb, cout, 1.0);
    init_norm(ps, &format!("{n}.norm2"), cout);
    init_conv(ps, rng, &format!("{n}.conv2"), cout, cout, 0.5);
    if cin != cout {
        init_linear(ps, rng, &format!("{n}.skip"), cin, cout, 1.0);
    }
}

fn init_attn<R: Rng>(ps: &mut ParamSet, rng: &mut R, n: &str, c: usize, d_ctx: usize, d_attn: usize) {
    init_norm(ps, &format!("{n}.norm"), c);
    init_linear(ps, rng, &format!("{n}.q"), c, d_attn, 1.0);
    init_linear(ps, rng, &format!("{n}.k"), d_ctx, d_attn, 1.0);
    init_linear(ps, rng, &format!("{n}.v"), d_ctx, d_attn, 1.0);
    init_linear(ps, rng, &format!("{n}.o"), d_attn, c, 0.5);
}

impl UNet {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Self {
        let [c1, c2] = config.channels;
        let t = config.time_dim;
        let te = 2 * t;
        let (dc, da) = (config.context_dim, config.attn_dim);
        let mut ps = ParamSet::new();
        init_linear(&mut ps, rng, "unet.time1", t, te, 1.0);
        init_linear(&mut ps, rng, "unet.time2", te, te, 1.0);
        init_conv(&mut ps, rng, "unet.conv_in", config.latent_channels, c1, 1.0);
        init_res(&mut ps, rng, "unet.down.res", c1, c1, te);
        init_attn(&mut ps, rng, "unet.down.attn", c1, dc, da);
        init_conv(&mut ps, rng, "unet.downsample", c1, c2, 1.0);
        init_res(&mut ps, rng, "unet.mid.res1", c2, c2, te);
        init_attn(&mut ps, rng, "unet.mid.attn", c2, dc, da);
        init_res(&mut ps, rng, "unet.mid.res2", c2, c2, te);
        init_conv(&mut ps, rng, "unet.upsample", c2, c1, 1.0);
        init_res(&mut ps, rng, "unet.up.res", c1, c1, te);
        init_attn(&mut ps, rng, "unet.up.attn", c1, dc, da);
        init_norm(&mut ps, "unet.out_norm", c1);
        init_conv(&mut ps, rng, "unet.conv_out", c1, config.latent_channels, 0.3);
        if config.zero_init_out {
            ps.get_mut("unet.conv_out.w").expect("conv_out").fill(0.0);
        }
        Self { config, params: ps }
    }

    fn res(&self, g: &mut Graph, n: &str, x: Var, grid: Grid, temb: Var) -> Var {
        let ps = &self.params;
        let h = norm(g, ps, &format!("{n}.norm1"), x);
        let h = g.silu(h);
        let (h, _) = conv3x3(g, ps, &format!("{n}.conv1"), h, grid, 1);
        let t = linear(g, ps, &format!("{n}.temb"), temb);
        let h = g.add_block_rows(h, t, grid.positions());
        let h = norm(g, ps, &format!("{n}.norm2"), h);
        let h = g.silu(h);
        let (h, _) = conv3x3(g, ps, &format!("{n}.conv2"), h, grid, 1);
        let skip = if ps.contains(&format!("{n}.skip.w")) {
            linear(g, ps, &format!("{n}.skip"), x)
        } else {
            x
        };
        g.add(skip, h)
    }

    fn attn(&self, g: &mut Graph, n: &str, x: Var, grid: Grid, ctx: &Context) -> Var {
        let ps = &self.params;
        let h = norm(g, ps, &format!("{n}.norm"), x);
        let q = linear(g, ps, &format!("{n}.q"), h);
        let k = linear(g, ps, &format!("{n}.k"), ctx.var);
        let v = linear(g, ps, &format!("{n}.v"), ctx.var);
        let layout = Rc::new(AttnLayout {
            batch: grid.batch,
            q_len: grid.positions(),
            k_len: ctx.len,
            k_valid: ctx.lens.clone(),
            scale: 1.0 / (self.config.attn_dim as f64).sqrt(),
        });
        let a = g.attention(q, k, v, layout);
        let o = linear(g, ps, &format!("{n}.o"), a);
        g.add(x, o)
    }

    /// Noise prediction for a `[batch*h*w, latent_channels]` input.
    pub fn forward(&self, g: &mut Graph, x: Var, grid: Grid, timesteps: &[f64], ctx: &Context) -> Result<Var> {
        let cfg = &self.config;
        let xv = g.value(x);
        if xv.dim() != (grid.rows(), cfg.latent_channels) {
            return Err(Error::invalid(format!(
                "latent rows {:?} do not match grid {grid:?} with {} channels",
                xv.dim(),
                cfg.latent_channels
            )));
        }
        if timesteps.len() != grid.batch || ctx.lens.len() != grid.batch {
            return Err(Error::invalid("batch size mismatch between latents, timesteps and context"));
        }
        let cdim = g.value(ctx.var).ncols();
        if cdim != cfg.context_dim {
            return Err(Error::invalid(format!(
                "context dimension {cdim} differs from cross-attention dimension {}",
                cfg.context_dim
            )));
        }
        let ps = &self.params;
        let temb = g.input(timestep_embedding(timesteps, cfg.time_dim));
        let temb = linear(g, ps, "unet.time1", temb);
        let temb = g.silu(temb);
        let temb = linear(g, ps, "unet.time2", temb);
        let temb = g.silu(temb);

        let (h, _) = conv3x3(g, ps, "unet.conv_in", x, grid, 1);
        let h = self.res(g, "unet.down.res", h, grid, temb);
        let skip = self.attn(g, "unet.down.attn", h, grid, ctx);
        let (h, low) = conv3x3(g, ps, "unet.downsample", skip, grid, 2);
        let h = self.res(g, "unet.mid.res1", h, low, temb);
        let h = self.attn(g, "unet.mid.attn", h, low, ctx);
        let h = self.res(g, "unet.mid.res2", h, low, temb);
        let h = upsample(g, h, low, grid);
        let (h, _) = conv3x3(g, ps, "unet.upsample", h, grid, 1);
        let h = g.add(h, skip);
        let h = self.res(g, "unet.up.res", h, grid, temb);
        let h = self.attn(g, "unet.up.attn", h, grid, ctx);
        let h = norm(g, ps, "unet.out_norm", h);
        let h = g.silu(h);
        let (out, _) = conv3x3(g, ps, "unet.conv_out", h, grid, 1);
        Ok(out)
    }

    /// Inference-only convenience: predicted noise rows for given inputs.
    pub fn predict(&self, rows: &Mat, grid: Grid, timesteps: &[f64], context: &Mat, lens: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let x = g.input(rows.clone());
        let len = if lens.is_empty() { 0 } else { context.nrows() / lens.len() };
        let c = g.input(context.clone());
        let ctx = Context {
            var: c,
            lens: lens.to_vec(),
            len,
        };
        let out = self.forward(&mut g, x, grid, timesteps, &ctx)?;
        Ok(g.value(out).clone())
    }
}
