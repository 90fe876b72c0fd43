//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Every tensor in the model zoo is stored as a row-major 2-D matrix: spatial
//! activations use one row per (sample, position) and one column per channel,
//! token sequences use one row per token. The tape is rebuilt for every forward
//! pass; parameters enter it as named leaves so their gradients can be read back
//! by name after [`Graph::backward`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Sentinel in gather index maps meaning "write zero".
pub const ZERO_PAD: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch geometry for the fused attention op.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Number of leading keys that are real (not padding) for each sample.
    pub k_valid: Vec<usize>,
    pub scale: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddBlockRows(Var, Var, usize),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm(Var, Mat),
    Gather(Var, Rc<Vec<usize>>),
    GatherRows(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    Reshape(Var),
    Attention(Var, Var, Var, Rc<AttnLayout>, Vec<Mat>),
    MeanSquare(Var),
    Sum(Var),
    BceWithLogits(Var, Mat, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(String, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every named parameter leaf reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }

    pub fn into_param_map(mut self) -> HashMap<String, Mat> {
        let mut out = HashMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; it receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named parameter leaf. Repeated requests for the same name reuse the leaf.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `x[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRow(x, b))
    }

    /// `x[m,n] * g[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let value = self.value(x) * self.value(g);
        self.push(value, Op::MulRow(x, g))
    }

    /// Adds row `e[r / block]` to row `r` of `x`.
    pub fn add_block_rows(&mut self, x: Var, e: Var, block: usize) -> Var {
        let mut value = self.value(x).clone();
        let ev = self.value(e);
        assert_eq!(value.nrows(), ev.nrows() * block, "add_block_rows geometry");
        for (r, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            row += &ev.row(r / block);
        }
        self.push(value, Op::AddBlockRows(x, e, block))
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(silu);
        self.push(value, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Mat::zeros((xv.nrows(), 1));
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[r, 0]] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        self.push(out, Op::LayerNorm(x, inv_std))
    }

    /// Flat gather: `out.flat[i] = src.flat[index[i]]`, or zero for [`ZERO_PAD`].
    pub fn gather(&mut self, src: Var, index: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let sv = self.value(src);
        let flat = sv.as_slice().expect("contiguous");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == ZERO_PAD { 0.0 } else { flat[i] })
            .collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("gather shape");
        self.push(value, Op::Gather(src, index))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let mut value = Mat::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&tv.row(id));
        }
        self.push(value, Op::GatherRows(table, ids))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("reshape size");
        self.push(value, Op::Reshape(x))
    }

    /// Scaled dot-product attention, batched over samples, with key padding.
    ///
    /// `q` is `[batch*q_len, d]`, `k` is `[batch*k_len, d]`, `v` is `[batch*k_len, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk) = (layout.q_len, layout.k_len);
        let mut out = Mat::zeros((layout.batch * lq, vv.ncols()));
        let mut probs = Vec::with_capacity(layout.batch);
        for b in 0..layout.batch {
            let qb = qv.slice(ndarray::s![b * lq..(b + 1) * lq, ..]);
            let kb = kv.slice(ndarray::s![b * lk..(b + 1) * lk, ..]);
            let vb = vv.slice(ndarray::s![b * lk..(b + 1) * lk, ..]);
            let valid = layout.k_valid[b];
            assert!(valid >= 1 && valid <= lk, "attention needs at least one key");
            let mut s = qb.dot(&kb.t()) * layout.scale;
            for mut row in s.axis_iter_mut(Axis(0)) {
                let max = row
                    .iter()
                    .take(valid)
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    if j < valid {
                        *x = (*x - max).exp();
                        total += *x;
                    } else {
                        *x = 0.0;
                    }
                }
                row.mapv_inplace(|x| x / total);
            }
            out.slice_mut(ndarray::s![b * lq..(b + 1) * lq, ..])
                .assign(&s.dot(&vb));
            probs.push(s);
        }
        self.push(out, Op::Attention(q, k, v, layout, probs))
    }

    /// Mean of squared entries, as a 1×1 scalar.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.iter().map(|v| v * v).sum::<f64>() / xv.len() as f64;
        self.push(Mat::from_elem((1, 1), m), Op::MeanSquare(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), s), Op::Sum(x))
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.mean_square(d)
    }

    /// Mean binary cross-entropy with logits. Entries whose weight is zero are ignored.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Mat, weights: &Mat) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let total_w: f64 = weights.sum().max(1e-12);
        let mut loss = 0.0;
        Zip::from(lv).and(targets).and(weights).for_each(|&z, &y, &w| {
            // log(1 + exp(-|z|)) + max(z, 0) - z*y
            loss += w * ((-z.abs()).exp().ln_1p() + z.max(0.0) - z * y);
        });
        let node = Mat::from_elem((1, 1), loss / total_w);
        self.push(node, Op::BceWithLogits(logits, targets.clone(), weights.clone()))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gout);
                    acc(&mut grads, *a, gout.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gout * self.value(*b));
                    acc(&mut grads, *b, &gout * self.value(*a));
                }
                Op::AddRow(x, b) => {
                    acc(&mut grads, *b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, gout.clone());
                }
                Op::MulRow(x, g) => {
                    let gg = (&gout * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *g, gg);
                    acc(&mut grads, *x, &gout * self.value(*g));
                }
                Op::AddBlockRows(x, e, block) => {
                    let ev = self.value(*e);
                    let mut ge = Mat::zeros(ev.dim());
                    for (r, row) in gout.axis_iter(Axis(0)).enumerate() {
                        let mut dst = ge.row_mut(r / block);
                        dst += &row;
                    }
                    acc(&mut grads, *e, ge);
                    acc(&mut grads, *x, gout.clone());
                }
                Op::Scale(x, c) => acc(&mut grads, *x, &gout * *c),
                Op::Silu(x) => {
                    let mut g = self.value(*x).mapv(|z| {
                        let s = sigmoid(z);
                        s * (1.0 + z * (1.0 - s))
                    });
                    g *= &gout;
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = node.value.mapv(|s| s * (1.0 - s));
                    g *= &gout;
                    acc(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let mut g = node.value.mapv(|t| 1.0 - t * t);
                    g *= &gout;
                    acc(&mut grads, *x, g);
                }
                Op::Exp(x) => acc(&mut grads, *x, &gout * &node.value),
                Op::LayerNorm(x, inv_std) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gy = gout.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.sum() / n;
                        let mean_gy = gy.dot(&yr) / n;
                        let is = inv_std[[r, 0]];
                        for c in 0..y.ncols() {
                            gx[[r, c]] = is * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(src, index) => {
                    let sv = self.value(*src);
                    let mut gs = vec![0.0; sv.len()];
                    for (&ix, &g) in index.iter().zip(gout.iter()) {
                        if ix != ZERO_PAD {
                            gs[ix] += g;
                        }
                    }
                    acc(
                        &mut grads,
                        *src,
                        Mat::from_shape_vec(sv.dim(), gs).expect("gather grad"),
                    );
                }
                Op::GatherRows(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &gout.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    gx.slice_mut(ndarray::s![.., *start..*start + gout.ncols()])
                        .assign(&gout);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let data: Vec<f64> = gout.iter().copied().collect();
                    let dim = self.value(*x).dim();
                    acc(&mut grads, *x, Mat::from_shape_vec(dim, data).expect("reshape grad"));
                }
                Op::Attention(q, k, v, layout, probs) => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (lq, lk) = (layout.q_len, layout.k_len);
                    let mut gq = Mat::zeros(qv.dim());
                    let mut gk = Mat::zeros(kv.dim());
                    let mut gv = Mat::zeros(vv.dim());
                    for (b, p) in probs.iter().enumerate() {
                        let go = gout.slice(ndarray::s![b * lq..(b + 1) * lq, ..]);
                        let qb = qv.slice(ndarray::s![b * lq..(b + 1) * lq, ..]);
                        let kb = kv.slice(ndarray::s![b * lk..(b + 1) * lk, ..]);
                        let vb = vv.slice(ndarray::s![b * lk..(b + 1) * lk, ..]);
                        gv.slice_mut(ndarray::s![b * lk..(b + 1) * lk, ..])
                            .assign(&p.t().dot(&go));
                        let gp = go.dot(&vb.t());
                        let mut gs = p * &gp;
                        for (mut row, prow) in gs.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                            let dot = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|g, &pp| *g -= pp * dot);
                        }
                        gs *= layout.scale;
                        gq.slice_mut(ndarray::s![b * lq..(b + 1) * lq, ..])
                            .assign(&gs.dot(&kb));
                        gk.slice_mut(ndarray::s![b * lk..(b + 1) * lk, ..])
                            .assign(&gs.t().dot(&qb));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x);
                    let c = 2.0 * gout[[0, 0]] / xv.len() as f64;
                    acc(&mut grads, *x, xv * c);
                }
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    acc(&mut grads, *x, Mat::from_elem(dim, gout[[0, 0]]));
                }
                Op::BceWithLogits(logits, targets, weights) => {
                    let lv = self.value(*logits);
                    let total_w: f64 = weights.sum().max(1e-12);
                    let scale = gout[[0, 0]] / total_w;
                    let mut g = Mat::zeros(lv.dim());
                    Zip::from(&mut g)
                        .and(lv)
                        .and(targets)
                        .and(weights)
                        .for_each(|g, &z, &y, &w| *g = scale * w * (sigmoid(z) - y));
                    acc(&mut grads, *logits, g);
                }
            }
            grads[i] = Some(gout);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4));
                assert!(err < 1e-5, "input {k} idx {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, c], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let s = g.silu(m);
            let t = g.tanh(s);
            let e = g.exp(t);
            let p = g.mul_row(e, v[2]);
            let q = g.sigmoid(p);
            g.mean_square(q)
        });
    }

    #[test]
    fn layer_norm_and_gather_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 5);
        let e = rand_mat(&mut rng, 2, 5);
        let w = rand_mat(&mut rng, 4, 5);
        check(vec![x, e, w], |g, v| {
            let n = g.layer_norm(v[0], 1e-5);
            let n = g.add_block_rows(n, v[1], 2);
            let idx = Rc::new(vec![0, 3, ZERO_PAD, 7, 7, 19, 2, 11]);
            let gth = g.gather(n, idx, 2, 4);
            let rows = g.gather_rows(v[2], Rc::new(vec![1, 1, 3]));
            let r = g.reshape(rows, 5, 3);
            let sl = g.slice_cols(r, 1, 2);
            let a = g.mean_square(gth);
            let b = g.sum(sl);
            let b = g.scale(b, 0.3);
            let prod = g.mul(a, b);
            g.add(a, prod)
        });
    }

    #[test]
    fn attention_grads_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_mat(&mut rng, 2 * 3, 4);
        let k = rand_mat(&mut rng, 2 * 5, 4);
        let v = rand_mat(&mut rng, 2 * 5, 3);
        let target = rand_mat(&mut rng, 6, 3);
        check(vec![q, k, v, target], |g, vs| {
            let layout = Rc::new(AttnLayout {
                batch: 2,
                q_len: 3,
                k_len: 5,
                k_valid: vec![5, 2],
                scale: 0.5,
            });
            let o = g.attention(vs[0], vs[1], vs[2], layout);
            g.mse(o, vs[3])
        });
    }

    #[test]
    fn padded_keys_receive_no_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 2, 4);
        let k = rand_mat(&mut rng, 3, 4);
        let v = rand_mat(&mut rng, 3, 2);
        let mut k2 = k.clone();
        k2.row_mut(2).fill(100.0);
        let mut outs = Vec::new();
        for kk in [k, k2] {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(kk), g.input(v.clone()));
            let layout = Rc::new(AttnLayout { batch: 1, q_len: 2, k_len: 3, k_valid: vec![2], scale: 1.0 });
            let o = g.attention(qv, kv, vv, layout);
            outs.push(g.value(o).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn bce_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_mat(&mut rng, 3, 2) * 3.0;
        let y = Mat::from_shape_vec((3, 2), vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let w = Mat::from_shape_vec((3, 2), vec![1., 1., 0., 1., 1., 1.]).unwrap();
        check(vec![z], move |g, v| g.bce_with_logits(v[0], &y, &w));
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let w = Mat::from_elem((1, 1), 3.0);
        let mut g = Graph::new();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        let map = grads.into_param_map();
        assert_eq!(map["w"][[0, 0]], 6.0);
    }
}
