//! Parameter-initialisation and forward helpers shared by the networks.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Mat, Var, ZERO_PAD};
use crate::params::{init_weight, ParamSet};

pub const NORM_EPS: f64 = 1e-5;

/// Adds `{name}.w` (`[fan_in, fan_out]`) and a zero `{name}.b`.
pub fn init_linear<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    ps.insert(format!("{name}.w"), init_weight(rng, fan_in, fan_out, gain));
    ps.insert(format!("{name}.b"), Mat::zeros((1, fan_out)));
}

/// Adds a unit `{name}.g` and a zero `{name}.b`.
pub fn init_norm(ps: &mut ParamSet, name: &str, dim: usize) {
    ps.insert(format!("{name}.g"), Mat::ones((1, dim)));
    ps.insert(format!("{name}.b"), Mat::zeros((1, dim)));
}

pub fn linear(g: &mut Graph, ps: &ParamSet, name: &str, x: Var) -> Var {
    let w = g.param(&format!("{name}.w"), ps.get(&format!("{name}.w")));
    let b = g.param(&format!("{name}.b"), ps.get(&format!("{name}.b")));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Row-wise layer norm with affine gain and bias.
pub fn norm(g: &mut Graph, ps: &ParamSet, name: &str, x: Var) -> Var {
    let gain = g.param(&format!("{name}.g"), ps.get(&format!("{name}.g")));
    let bias = g.param(&format!("{name}.b"), ps.get(&format!("{name}.b")));
    let n = g.layer_norm(x, NORM_EPS);
    let s = g.mul_row(n, gain);
    g.add_row(s, bias)
}

/// Spatial layout of a `[batch*h*w, channels]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Output grid of a stride-2, padding-1, 3×3 convolution.
    pub fn halved(&self) -> Grid {
        Grid {
            batch: self.batch,
            h: self.h.div_ceil(2),
            w: self.w.div_ceil(2),
        }
    }
}

/// im2col index map for a 3×3 convolution with padding 1.
pub fn conv_index(grid: Grid, channels: usize, stride: usize) -> (Rc<Vec<usize>>, Grid) {
    let out = if stride == 1 { grid } else { grid.halved() };
    let cols = 9 * channels;
    let mut idx = Vec::with_capacity(out.rows() * cols);
    for b in 0..grid.batch {
        for oy in 0..out.h {
            for ox in 0..out.w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * stride + ky) as isize - 1;
                        let x = (ox * stride + kx) as isize - 1;
                        let inside = y >= 0 && x >= 0 && (y as usize) < grid.h && (x as usize) < grid.w;
                        for c in 0..channels {
                            idx.push(if inside {
                                ((b * grid.h + y as usize) * grid.w + x as usize) * channels + c
                            } else {
                                ZERO_PAD
                            });
                        }
                    }
                }
            }
        }
    }
    (Rc::new(idx), out)
}

/// Adds a 3×3 convolution `{name}` mapping `cin` to `cout` channels.
pub fn init_conv<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, gain: f64) {
    init_linear(ps, rng, name, 9 * cin, cout, gain);
}

/// 3×3 convolution, padding 1, over a `[rows, cin]` activation.
pub fn conv3x3(g: &mut Graph, ps: &ParamSet, name: &str, x: Var, grid: Grid, stride: usize) -> (Var, Grid) {
    let cin = g.value(x).ncols();
    let (idx, out) = conv_index(grid, cin, stride);
    let cols = g.gather(x, idx, out.rows(), 9 * cin);
    (linear(g, ps, name, cols), out)
}

/// Nearest-neighbour 2× upsampling to `target` (which must be the pre-halving grid).
pub fn upsample(g: &mut Graph, x: Var, from: Grid, target: Grid) -> Var {
    let mut ids = Vec::with_capacity(target.rows());
    for b in 0..target.batch {
        for y in 0..target.h {
            for xx in 0..target.w {
                ids.push((b * from.h + y / 2) * from.w + xx / 2);
            }
        }
    }
    g.gather_rows(x, Rc::new(ids))
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[len(t), dim]`.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Mat {
    let half = dim / 2;
    Mat::from_shape_fn((ts.len(), dim), |(r, c)| {
        let k = c % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = ts[r] * freq;
        if c < half {
            a.cos()
        } else {
            a.sin()
        }
    })
}
