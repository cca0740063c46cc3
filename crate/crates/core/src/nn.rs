//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are row-major `[rows, width]` slices. A "batch" of equal-length
//! sequences is stored as `rows = batch * seq_len`; attention and rotary
//! positions are applied per sequence.

use crate::rng::SplitMix64;
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b_acc, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

/// Affine map `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut SplitMix64) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, d_out]),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Tensor::zeros(self.w.shape()),
            b: self.b.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.d_in(), self.d_out());
        let mut y = match &self.b {
            Some(b) => b.data().repeat(rows),
            None => vec![0.0; rows * o],
        };
        gemm(rows, i, o, x, self.w.data(), 1.0, &mut y);
        y
    }

    /// Returns `dx`; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: Option<&mut Linear>) -> Vec<f64> {
        let (i, o) = (self.d_in(), self.d_out());
        if let Some(g) = grad {
            gemm_at_b_acc(rows, i, o, x, dy, g.w.data_mut());
            if let Some(gb) = g.b.as_mut() {
                let gb = gb.data_mut();
                for r in dy.chunks_exact(o) {
                    for (a, b) in gb.iter_mut().zip(r) {
                        *a += b;
                    }
                }
            }
        }
        let mut dx = vec![0.0; rows * i];
        gemm_a_bt(rows, o, i, dy, self.w.data(), 0.0, &mut dx);
        dx
    }
}

/// RMS normalisation with learned gain; returns output and per-row `1/rms`.
pub fn rmsnorm(x: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = g.len();
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        for ((yv, xv), gv) in yr.iter_mut().zip(xr).zip(g) {
            *yv = xv * s * gv;
        }
        inv.push(s);
    }
    (y, inv)
}

pub fn rmsnorm_backward(x: &[f64], g: &[f64], inv: &[f64], dy: &[f64], dg: Option<&mut [f64]>) -> Vec<f64> {
    let d = g.len();
    let mut dx = vec![0.0; x.len()];
    if let Some(dg) = dg {
        for ((xr, dyr), &s) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(inv) {
            for ((a, xv), dv) in dg.iter_mut().zip(xr).zip(dyr) {
                *a += dv * xv * s;
            }
        }
    }
    for (((xr, dyr), dxr), &s) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(inv) {
        let dot: f64 = xr.iter().zip(dyr).zip(g).map(|((xv, dv), gv)| xv * dv * gv).sum();
        let c = s * s * s * dot / d as f64;
        for (((o, xv), dv), gv) in dxr.iter_mut().zip(xr).zip(dyr).zip(g) {
            *o = s * dv * gv - xv * c;
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Rotary position tables for `max_len` positions and head width `hd`.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(max_len: usize, hd: usize) -> Self {
        let half = hd / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for t in 0..max_len {
            for i in 0..half {
                let theta = t as f64 * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { half, cos, sin }
    }

    pub fn max_len(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }

    /// Rotates every head of one row in place (`sign = -1` inverts).
    pub fn rotate_row(&self, row: &mut [f64], pos: usize, n_heads: usize, sign: f64) {
        if self.half == 0 {
            return;
        }
        let hd = row.len() / n_heads;
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for h in row.chunks_exact_mut(hd) {
            for i in 0..self.half {
                let (a, b) = (h[2 * i], h[2 * i + 1]);
                let (c, s) = (cs[i], sign * sn[i]);
                h[2 * i] = a * c - b * s;
                h[2 * i + 1] = a * s + b * c;
            }
        }
    }

    fn apply(&self, x: &mut [f64], d: usize, seq_len: usize, n_heads: usize, sign: f64) {
        for (r, row) in x.chunks_exact_mut(d).enumerate() {
            self.rotate_row(row, r % seq_len, n_heads, sign);
        }
    }
}

/// Causal multi-head attention over a batch of sequences.
///
/// Returns the head outputs `[rows, d]` and probabilities
/// `[batch, heads, seq_len, seq_len]` (zero above the diagonal).
pub fn attention(q: &[f64], k: &[f64], v: &[f64], d: usize, seq_len: usize, n_heads: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let batch = rows / seq_len;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; batch * n_heads * seq_len * seq_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = &q[(b * seq_len + i) * d + h * hd..][..hd];
                let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(b * seq_len + j) * d + h * hd..][..hd];
                    let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for p in prow[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in prow[..=i].iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[(b * seq_len + i) * d + h * hd..][..hd];
                for (j, &p) in prow[..=i].iter().enumerate() {
                    let vj = &v[(b * seq_len + j) * d + h * hd..][..hd];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    seq_len: usize,
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let batch = rows / seq_len;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
    let mut dp = vec![0.0; seq_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let prow = &probs[pbase + i * seq_len..][..=i];
                let doi = &dout[(b * seq_len + i) * d + h * hd..][..hd];
                let mut dot = 0.0;
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[(b * seq_len + j) * d + h * hd..][..hd];
                    dp[j] = doi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    dot += p * dp[j];
                    let dvj = &mut dv[(b * seq_len + j) * d + h * hd..][..hd];
                    for (o, g) in dvj.iter_mut().zip(doi) {
                        *o += p * g;
                    }
                }
                let qi = &q[(b * seq_len + i) * d + h * hd..][..hd];
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(b * seq_len + j) * d + h * hd..][..hd];
                    let dqi = &mut dq[(b * seq_len + i) * d + h * hd..][..hd];
                    for (o, kk) in dqi.iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let dkj = &mut dk[(b * seq_len + j) * d + h * hd..][..hd];
                    for (o, qq) in dkj.iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

pub struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    rows: usize,
}

impl Ffn {
    pub fn new(d: usize, hidden: usize, out_std: f64, rng: &mut SplitMix64) -> Self {
        Self {
            up: Linear::new(d, hidden, true, 1.0 / (d as f64).sqrt(), rng),
            down: Linear::new(hidden, d, true, out_std, rng),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            up: Linear::zeros(d_in, hidden, true),
            down: Linear::zeros(hidden, d_out, true),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, FfnCache) {
        let pre = self.up.forward(x, rows);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(&act, rows);
        (
            y,
            FfnCache {
                x: x.to_vec(),
                pre,
                act,
                rows,
            },
        )
    }

    pub fn backward(&self, c: &FfnCache, dy: &[f64], mut grad: Option<&mut Ffn>) -> Vec<f64> {
        let mut da = self.down.backward(&c.act, dy, c.rows, grad.as_deref_mut().map(|g| &mut g.down));
        for (g, &p) in da.iter_mut().zip(&c.pre) {
            *g *= gelu_grad(p);
        }
        self.up.backward(&c.x, &da, c.rows, grad.map(|g| &mut g.up))
    }
}

/// Which expert a row is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expert {
    Text,
    Visual,
}

/// Pre-norm transformer block: rotary causal self-attention followed by a
/// feed-forward network with optional visual expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: Tensor,
    pub ffn_t: Ffn,
    pub ffn_v: Option<Ffn>,
}

/// Which parts of a block accumulate parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockTrainable {
    pub attn: bool,
    pub ffn_t: bool,
    pub ffn_v: bool,
}

/// Rotated keys and values of every row seen so far, `[t, d]` each.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct BlockCache {
    x: Vec<f64>,
    a: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    pub probs: Vec<f64>,
    att: Vec<f64>,
    x1: Vec<f64>,
    inv2: Vec<f64>,
    text_rows: Vec<usize>,
    vis_rows: Vec<usize>,
    ffn_t: Option<FfnCache>,
    ffn_v: Option<FfnCache>,
    rows: usize,
    seq_len: usize,
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn scatter_add(dst: &mut [f64], d: usize, rows: &[usize], src: &[f64]) {
    for (i, &r) in rows.iter().enumerate() {
        for (a, b) in dst[r * d..(r + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
            *a += b;
        }
    }
}

impl Block {
    pub fn new(d: usize, ffn_hidden: usize, n_layers: usize, with_visual: bool, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / (2.0 * n_layers as f64).sqrt();
        let ffn_t = Ffn::new(d, ffn_hidden, 1.0 / (ffn_hidden as f64).sqrt() / (2.0 * n_layers as f64).sqrt(), rng);
        Self {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: Linear::new(d, d, false, std, rng),
            wk: Linear::new(d, d, false, std, rng),
            wv: Linear::new(d, d, false, std, rng),
            wo: Linear::new(d, d, false, out_std, rng),
            ffn_norm: Tensor::filled(&[d], 1.0),
            ffn_v: with_visual.then(|| ffn_t.clone()),
            ffn_t,
        }
    }

    pub fn zeros(d: usize, ffn_hidden: usize, with_visual: bool) -> Self {
        Self {
            attn_norm: Tensor::zeros(&[d]),
            wq: Linear::zeros(d, d, false),
            wk: Linear::zeros(d, d, false),
            wv: Linear::zeros(d, d, false),
            wo: Linear::zeros(d, d, false),
            ffn_norm: Tensor::zeros(&[d]),
            ffn_t: Ffn::zeros(d, ffn_hidden, d),
            ffn_v: with_visual.then(|| Ffn::zeros(d, ffn_hidden, d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            attn_norm: Tensor::zeros(self.attn_norm.shape()),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ffn_norm: Tensor::zeros(self.ffn_norm.shape()),
            ffn_t: self.ffn_t.zeros_like(),
            ffn_v: self.ffn_v.as_ref().map(Ffn::zeros_like),
        }
    }

    pub fn width(&self) -> usize {
        self.attn_norm.len()
    }

    /// `route[r]` selects the expert for row `r`; rows routed to `Visual`
    /// fall back to the text FFN when the block has no visual expert.
    pub fn forward(
        &self,
        x: &[f64],
        seq_len: usize,
        n_heads: usize,
        rope: &Rope,
        route: &[Expert],
    ) -> (Vec<f64>, BlockCache) {
        let d = self.width();
        let rows = x.len() / d;
        let (a, inv1) = rmsnorm(x, self.attn_norm.data());
        let mut q = self.wq.forward(&a, rows);
        let mut k = self.wk.forward(&a, rows);
        let v = self.wv.forward(&a, rows);
        rope.apply(&mut q, d, seq_len, n_heads, 1.0);
        rope.apply(&mut k, d, seq_len, n_heads, 1.0);
        let (att, probs) = attention(&q, &k, &v, d, seq_len, n_heads);
        let o = self.wo.forward(&att, rows);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (bn, inv2) = rmsnorm(&x1, self.ffn_norm.data());

        let (mut text_rows, mut vis_rows) = (Vec::new(), Vec::new());
        for (r, e) in route.iter().enumerate() {
            match (e, &self.ffn_v) {
                (Expert::Visual, Some(_)) => vis_rows.push(r),
                _ => text_rows.push(r),
            }
        }
        let mut out = x1.clone();
        let ffn_t = (!text_rows.is_empty()).then(|| {
            let (y, c) = self.ffn_t.forward(&gather(&bn, d, &text_rows), text_rows.len());
            scatter_add(&mut out, d, &text_rows, &y);
            c
        });
        let ffn_v = match (&self.ffn_v, vis_rows.is_empty()) {
            (Some(f), false) => {
                let (y, c) = f.forward(&gather(&bn, d, &vis_rows), vis_rows.len());
                scatter_add(&mut out, d, &vis_rows, &y);
                Some(c)
            }
            _ => None,
        };
        (
            out,
            BlockCache {
                x: x.to_vec(),
                a,
                inv1,
                q,
                k,
                v,
                probs,
                att,
                x1,
                inv2,
                text_rows,
                vis_rows,
                ffn_t,
                ffn_v,
                rows,
                seq_len,
            },
        )
    }

    /// One-row incremental forward at sequence position `pos`, appending this
    /// row's rotated key and value to `cache`.
    pub fn forward_step(
        &self,
        x: &[f64],
        pos: usize,
        n_heads: usize,
        rope: &Rope,
        expert: Expert,
        cache: &mut KvCache,
    ) -> Vec<f64> {
        let d = self.width();
        let hd = d / n_heads;
        let (a, _) = rmsnorm(x, self.attn_norm.data());
        let mut q = self.wq.forward(&a, 1);
        let mut k = self.wk.forward(&a, 1);
        let v = self.wv.forward(&a, 1);
        rope.rotate_row(&mut q, pos, n_heads, 1.0);
        rope.rotate_row(&mut k, pos, n_heads, 1.0);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
        let t = cache.k.len() / d;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut att = vec![0.0; d];
        let mut p = vec![0.0; t];
        for h in 0..n_heads {
            let qh = &q[h * hd..(h + 1) * hd];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &cache.k[j * d + h * hd..][..hd];
                *pj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*pj);
            }
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let oh = &mut att[h * hd..(h + 1) * hd];
            for (j, pj) in p.iter().enumerate() {
                let vj = &cache.v[j * d + h * hd..][..hd];
                for (o, vv) in oh.iter_mut().zip(vj) {
                    *o += pj / z * vv;
                }
            }
        }
        let o = self.wo.forward(&att, 1);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (bn, _) = rmsnorm(&x1, self.ffn_norm.data());
        let ffn = match (expert, &self.ffn_v) {
            (Expert::Visual, Some(f)) => f,
            _ => &self.ffn_t,
        };
        let (y, _) = ffn.forward(&bn, 1);
        x1.iter().zip(&y).map(|(a, b)| a + b).collect()
    }

    pub fn backward(
        &self,
        c: &BlockCache,
        dout: &[f64],
        n_heads: usize,
        rope: &Rope,
        mut grad: Option<&mut Block>,
        train: BlockTrainable,
    ) -> Vec<f64> {
        let d = self.width();
        let rows = c.rows;
        // FFN branch
        let mut dbn = vec![0.0; rows * d];
        if let Some(fc) = &c.ffn_t {
            let g = grad.as_deref_mut().filter(|_| train.ffn_t).map(|g| &mut g.ffn_t);
            let dx = self.ffn_t.backward(fc, &gather(dout, d, &c.text_rows), g);
            scatter_add(&mut dbn, d, &c.text_rows, &dx);
        }
        if let (Some(fc), Some(f)) = (&c.ffn_v, &self.ffn_v) {
            let g = grad
                .as_deref_mut()
                .filter(|_| train.ffn_v)
                .and_then(|g| g.ffn_v.as_mut());
            let dx = f.backward(fc, &gather(dout, d, &c.vis_rows), g);
            scatter_add(&mut dbn, d, &c.vis_rows, &dx);
        }
        let mut gattn = grad.filter(|_| train.attn);
        let dx1_norm = rmsnorm_backward(
            &c.x1,
            self.ffn_norm.data(),
            &c.inv2,
            &dbn,
            gattn.as_deref_mut().map(|g| g.ffn_norm.data_mut()),
        );
        let dx1: Vec<f64> = dout.iter().zip(&dx1_norm).map(|(a, b)| a + b).collect();
        // attention branch
        let datt = self.wo.backward(&c.att, &dx1, rows, gattn.as_deref_mut().map(|g| &mut g.wo));
        let (mut dq, mut dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &datt, d, c.seq_len, n_heads);
        rope.apply(&mut dq, d, c.seq_len, n_heads, -1.0);
        rope.apply(&mut dk, d, c.seq_len, n_heads, -1.0);
        let mut da = self.wq.backward(&c.a, &dq, rows, gattn.as_deref_mut().map(|g| &mut g.wq));
        let dak = self.wk.backward(&c.a, &dk, rows, gattn.as_deref_mut().map(|g| &mut g.wk));
        let dav = self.wv.backward(&c.a, &dv, rows, gattn.as_deref_mut().map(|g| &mut g.wv));
        for ((a, b), e) in da.iter_mut().zip(&dak).zip(&dav) {
            *a += b + e;
        }
        let dx_norm = rmsnorm_backward(
            &c.x,
            self.attn_norm.data(),
            &c.inv1,
            &da,
            gattn.map(|g| g.attn_norm.data_mut()),
        );
        dx1.iter().zip(&dx_norm).map(|(a, b)| a + b).collect()
    }
}
