//! Shallow autoregressive head that unfolds one folded position back into
//! its `m*n` codebook ids.
//!
//! Head sequence for patch `i`: slot 0 is `cond_proj(h_i)`, slot `j >= 1` is
//! the embedding of id `j-1`; every slot adds its learned position row. The
//! logits read at slot `j` predict id `j`, so the conditioning slot alone
//! predicts the first id.

use crate::error::{Error, Result};
use crate::nn::{rmsnorm, rmsnorm_backward, Block, BlockCache, BlockTrainable, Expert, Linear, Rope};
use crate::rng::SplitMix64;
use crate::sampler::{sample_logits, SamplingRule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cond_proj: Linear,
    /// `[K, d]`
    pub vq_embed: Tensor,
    /// `[m*n + 1, d]`
    pub pos: Tensor,
    pub layers: Vec<Block>,
    pub norm: Tensor,
    /// `d -> K`
    pub classifier: Linear,
}

pub struct HeadCache {
    cond_in: Vec<f64>,
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    pre_norm: Vec<f64>,
    inv: Vec<f64>,
    normed: Vec<f64>,
    patches: usize,
    mn: usize,
}

impl HeadParams {
    pub fn zeros(d: usize, k: usize, mn: usize, layers: usize, ffn_hidden: usize) -> Self {
        Self {
            cond_proj: Linear::zeros(d, d, true),
            vq_embed: Tensor::zeros(&[k, d]),
            pos: Tensor::zeros(&[mn + 1, d]),
            layers: (0..layers).map(|_| Block::zeros(d, ffn_hidden, false)).collect(),
            norm: Tensor::zeros(&[d]),
            classifier: Linear::zeros(d, k, true),
        }
    }

    pub fn width(&self) -> usize {
        self.norm.len()
    }

    pub fn k(&self) -> usize {
        self.vq_embed.rows()
    }

    /// Ids unfolded per position.
    pub fn patch_len(&self) -> usize {
        self.pos.rows() - 1
    }

    /// Builds the `[patches * len, d]` head input; `ids` holds `len - 1`
    /// prefix ids per patch.
    fn inputs(&self, cond: &[f64], ids: &[u32], patches: usize, len: usize) -> Result<Vec<f64>> {
        let d = self.width();
        let k = self.k() as u32;
        let mut x = Vec::with_capacity(patches * len * d);
        for p in 0..patches {
            x.extend(cond[p * d..(p + 1) * d].iter().zip(self.pos.row(0)).map(|(a, b)| a + b));
            for j in 1..len {
                let id = ids[p * (len - 1) + j - 1];
                if id >= k {
                    return Err(Error::data(format!("visual id {id} out of range for K={k}")));
                }
                x.extend(self.vq_embed.row(id as usize).iter().zip(self.pos.row(j)).map(|(a, b)| a + b));
            }
        }
        Ok(x)
    }

    fn run(&self, x: Vec<f64>, len: usize, n_heads: usize) -> (Vec<f64>, Vec<BlockCache>, Vec<f64>, Vec<f64>) {
        let rope = Rope::new(self.patch_len() + 1, self.width() / n_heads);
        let route = vec![Expert::Text; x.len() / self.width()];
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = x;
        for b in &self.layers {
            let (y, c) = b.forward(&x, len, n_heads, &rope, &route);
            caches.push(c);
            x = y;
        }
        let (normed, inv) = rmsnorm(&x, self.norm.data());
        (normed, caches, x, inv)
    }

    /// Teacher-forced logits `[patches * m*n, K]` for conditioning rows `h`
    /// (`[patches, d]`) and target ids (`[patches * m*n]`, within-patch order).
    pub fn forward(&self, h: &[f64], teacher: &[u32], n_heads: usize) -> Result<(Vec<f64>, HeadCache)> {
        let (d, mn) = (self.width(), self.patch_len());
        let patches = h.len() / d;
        if teacher.len() != patches * mn {
            return Err(Error::shape(format!("expected {} teacher ids, got {}", patches * mn, teacher.len())));
        }
        // prefixes: the first mn-1 ids of each patch
        let prefix: Vec<u32> = teacher.chunks(mn).flat_map(|c| c[..mn - 1].iter().copied()).collect();
        let cond = self.cond_proj.forward(h, patches);
        let x = self.inputs(&cond, &prefix, patches, mn)?;
        let (normed, blocks, pre_norm, inv) = self.run(x, mn, n_heads);
        let logits = self.classifier.forward(&normed, patches * mn);
        Ok((
            logits,
            HeadCache {
                cond_in: h.to_vec(),
                ids: prefix,
                blocks,
                pre_norm,
                inv,
                normed,
                patches,
                mn,
            },
        ))
    }

    /// Returns the gradient wrt the conditioning rows; parameter gradients
    /// accumulate into `grad` when given.
    pub fn backward(&self, c: &HeadCache, dlogits: &[f64], n_heads: usize, mut grad: Option<&mut HeadParams>) -> Vec<f64> {
        let d = self.width();
        let rows = c.patches * c.mn;
        let rope = Rope::new(self.patch_len() + 1, d / n_heads);
        let dn = self.classifier.backward(&c.normed, dlogits, rows, grad.as_deref_mut().map(|g| &mut g.classifier));
        let mut dx = rmsnorm_backward(&c.pre_norm, self.norm.data(), &c.inv, &dn, grad.as_deref_mut().map(|g| g.norm.data_mut()));
        let all = BlockTrainable {
            attn: true,
            ffn_t: true,
            ffn_v: false,
        };
        for (i, (b, bc)) in self.layers.iter().zip(&c.blocks).enumerate().rev() {
            dx = b.backward(bc, &dx, n_heads, &rope, grad.as_deref_mut().map(|g| &mut g.layers[i]), all);
        }
        let mut dcond = vec![0.0; c.patches * d];
        for p in 0..c.patches {
            for j in 0..c.mn {
                let g = &dx[(p * c.mn + j) * d..][..d];
                if j == 0 {
                    dcond[p * d..(p + 1) * d].copy_from_slice(g);
                }
                if let Some(gr) = grad.as_deref_mut() {
                    for (a, b) in gr.pos.row_mut(j).iter_mut().zip(g) {
                        *a += b;
                    }
                    if j > 0 {
                        let id = c.ids[p * (c.mn - 1) + j - 1] as usize;
                        for (a, b) in gr.vq_embed.row_mut(id).iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
            }
        }
        self.cond_proj.backward(&c.cond_in, &dcond, c.patches, grad.map(|g| &mut g.cond_proj))
    }

    /// Logits for the next id after `prefix`, conditioned on one row `h`.
    pub fn next_logits(&self, h: &[f64], prefix: &[u32], n_heads: usize) -> Result<Vec<f64>> {
        if prefix.len() >= self.patch_len() {
            return Err(Error::shape("head prefix already holds a full patch"));
        }
        let len = prefix.len() + 1;
        let cond = self.cond_proj.forward(h, 1);
        let x = self.inputs(&cond, prefix, 1, len)?;
        let (normed, _, _, _) = self.run(x, len, n_heads);
        let last = &normed[(len - 1) * self.width()..];
        Ok(self.classifier.forward(last, 1))
    }

    /// Samples the `m*n` ids of one patch.
    pub fn generate(&self, h: &[f64], n_heads: usize, rule: &SamplingRule, rng: &mut SplitMix64) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(self.patch_len());
        for _ in 0..self.patch_len() {
            let l = self.next_logits(h, &ids, n_heads)?;
            ids.push(sample_logits(&l, rule, rng) as u32);
        }
        Ok(ids)
    }

    /// Guided sampling: both contexts advance with the same sampled ids and
    /// the logits combine as `s*l_c + (1-s)*l_u`.
    pub fn generate_cfg(
        &self,
        h_cond: &[f64],
        h_uncond: &[f64],
        s: f64,
        n_heads: usize,
        rule: &SamplingRule,
        rng: &mut SplitMix64,
    ) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(self.patch_len());
        for _ in 0..self.patch_len() {
            let lc = self.next_logits(h_cond, &ids, n_heads)?;
            let lu = self.next_logits(h_uncond, &ids, n_heads)?;
            let lg = guide(&lc, &lu, s);
            ids.push(sample_logits(&lg, rule, rng) as u32);
        }
        Ok(ids)
    }
}

/// `l_u + s (l_c - l_u)`, evaluated as `s*l_c + (1-s)*l_u` so that `s = 1`
/// and `s = 0` reproduce `l_c` and `l_u` exactly.
pub fn guide(lc: &[f64], lu: &[f64], s: f64) -> Vec<f64> {
    lc.iter().zip(lu).map(|(c, u)| s * c + (1.0 - s) * u).collect()
}
