//! The causal multimodal transformer: sample embedding, routed blocks,
//! final norm and text classifier, with the matching backward pass.

use crate::error::{Error, Result};
use crate::folding::{embed_and_fold, embed_and_fold_backward, FoldCache};
use crate::nn::{rmsnorm, rmsnorm_backward, BlockCache, BlockTrainable, Expert, Rope};
use crate::params::{Group, GroupSet, ModelParams};
use crate::sequencer::{Position, TaskSample};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b_acc};
use crate::vocab::TokenId;

/// How visual positions pick their FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    ByModality,
    /// Every position uses the text FFN, as a plain single-FFN model would.
    TextOnly,
}

/// Input rows of one sample plus what the embedding backward needs.
pub struct Embedded {
    pub x: Vec<f64>,
    pub route: Vec<Expert>,
    /// `(position, table, row)` for token rows; table 0 is the text embedding,
    /// 1 the special embedding.
    rows: Vec<(usize, u8, usize)>,
    /// Per image block: fold cache and the sequence position of each patch.
    folds: Vec<(FoldCache, Vec<usize>)>,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.route.len()
    }

    pub fn is_empty(&self) -> bool {
        self.route.is_empty()
    }
}

/// Embedding row of a non-visual id: `(table, row)`.
fn token_row(params: &ModelParams, id: TokenId) -> Result<(u8, usize)> {
    let text_rows = params.text_embed.rows();
    let id = id as usize;
    if id < text_rows {
        Ok((0, id))
    } else if id < params.config.vocab {
        Ok((1, id - text_rows))
    } else {
        Err(Error::data(format!("token id {id} outside the vocabulary")))
    }
}

pub fn embed_tokens(params: &ModelParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let d = params.config.d;
    let mut x = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        x.extend_from_slice(token_embedding(params, id)?);
    }
    Ok(x)
}

pub fn token_embedding(params: &ModelParams, id: TokenId) -> Result<&[f64]> {
    Ok(match token_row(params, id)? {
        (0, r) => params.text_embed.row(r),
        (_, r) => params.special_embed.row(r),
    })
}

pub fn embed_sample(params: &ModelParams, sample: &TaskSample, routing: Routing) -> Result<Embedded> {
    let d = params.config.d;
    if sample.fold != params.config.fold {
        return Err(Error::config(format!(
            "sample folded {}x{} but the model expects {}x{}",
            sample.fold.m, sample.fold.n, params.config.fold.m, params.config.fold.n
        )));
    }
    let mut folded = Vec::with_capacity(sample.images.len());
    let mut folds = Vec::with_capacity(sample.images.len());
    for g in &sample.images {
        let (y, c) = embed_and_fold(g, &params.vis, sample.fold)?;
        folded.push(y);
        folds.push((c, Vec::new()));
    }
    let mut x = Vec::with_capacity(sample.len() * d);
    let mut route = Vec::with_capacity(sample.len());
    let mut rows = Vec::new();
    for (i, p) in sample.positions.iter().enumerate() {
        match *p {
            Position::Text(id) => {
                let (t, r) = token_row(params, id)?;
                x.extend_from_slice(if t == 0 { params.text_embed.row(r) } else { params.special_embed.row(r) });
                rows.push((i, t, r));
                route.push(Expert::Text);
            }
            Position::Visual { block, patch } => {
                let y = folded.get(block).ok_or_else(|| Error::data(format!("missing image block {block}")))?;
                x.extend_from_slice(&y[patch * d..(patch + 1) * d]);
                folds[block].1.push(i);
                route.push(match routing {
                    Routing::ByModality => Expert::Visual,
                    Routing::TextOnly => Expert::Text,
                });
            }
        }
    }
    Ok(Embedded { x, route, rows, folds })
}

/// Accumulates embedding-table gradients for trainable groups.
pub fn embed_backward(params: &ModelParams, emb: &Embedded, dx: &[f64], grad: &mut ModelParams, trainable: GroupSet) {
    let d = params.config.d;
    for &(i, t, r) in &emb.rows {
        let (dst, group) = if t == 0 {
            (&mut grad.text_embed, Group::TextCore)
        } else {
            (&mut grad.special_embed, Group::VisionSpecific)
        };
        if trainable.contains(group) {
            for (a, b) in dst.row_mut(r).iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
    }
    if trainable.contains(Group::VisionSpecific) {
        for (cache, positions) in &emb.folds {
            let mut dy = Vec::with_capacity(positions.len() * d);
            for &i in positions {
                dy.extend_from_slice(&dx[i * d..(i + 1) * d]);
            }
            embed_and_fold_backward(&params.vis, cache, &dy, &mut grad.vis);
        }
    }
}

pub struct ForwardTrace {
    pub len: usize,
    /// Block outputs (post-residual), one `[len, d]` buffer per layer.
    pub hidden: Vec<Vec<f64>>,
    /// Final hidden states after the output norm, `[len, d]`.
    pub final_hidden: Vec<f64>,
    retain_attn: bool,
    blocks: Vec<BlockCache>,
    pre_norm: Vec<f64>,
    inv: Vec<f64>,
}

impl ForwardTrace {
    /// Attention probabilities `[heads, len, len]` of `layer`, if retained.
    pub fn attention(&self, layer: usize) -> Option<&[f64]> {
        self.retain_attn.then(|| self.blocks[layer].probs.as_slice())
    }

    /// Text logits `[len, vocab]` at every position.
    pub fn text_logits(&self, params: &ModelParams) -> Vec<f64> {
        text_logits_rows(params, &self.final_hidden)
    }
}

/// Classifier applied to `[rows, d]` final hidden rows.
pub fn text_logits_rows(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    let (d, v) = (params.config.d, params.config.vocab);
    let rows = h.len() / d;
    let mut out = vec![0.0; rows * v];
    gemm(rows, d, v, h, params.classifier.data(), 0.0, &mut out);
    out
}

/// Gradient of the classifier input; accumulates the classifier gradient.
pub fn text_logits_backward(params: &ModelParams, h: &[f64], dlogits: &[f64], grad: Option<&mut ModelParams>) -> Vec<f64> {
    let (d, v) = (params.config.d, params.config.vocab);
    let rows = h.len() / d;
    if let Some(g) = grad {
        gemm_at_b_acc(rows, d, v, h, dlogits, g.classifier.data_mut());
    }
    let mut dh = vec![0.0; rows * d];
    gemm_a_bt(rows, v, d, dlogits, params.classifier.data(), 0.0, &mut dh);
    dh
}

pub fn rope_for(params: &ModelParams) -> Rope {
    Rope::new(params.config.max_seq, params.config.head_dim())
}

pub fn forward(params: &ModelParams, x: &[f64], route: &[Expert], retain_attn: bool) -> Result<ForwardTrace> {
    let c = &params.config;
    let len = route.len();
    if len > c.max_seq {
        return Err(Error::shape(format!("sequence of {len} exceeds max_seq {}", c.max_seq)));
    }
    if x.len() != len * c.d {
        return Err(Error::shape("embedding rows do not match the routing mask"));
    }
    let rope = rope_for(params);
    let mut h = x.to_vec();
    let mut hidden = Vec::with_capacity(c.n_layers);
    let mut blocks = Vec::with_capacity(c.n_layers);
    for b in &params.layers {
        let (y, cache) = b.forward(&h, len, c.n_heads, &rope, route);
        blocks.push(cache);
        hidden.push(y.clone());
        h = y;
    }
    let (final_hidden, inv) = rmsnorm(&h, params.final_norm.data());
    Ok(ForwardTrace {
        len,
        hidden,
        final_hidden,
        retain_attn,
        blocks,
        pre_norm: h,
        inv,
    })
}

/// Backpropagates `d_final` (gradient wrt the normed final hidden states)
/// to the input rows. Weight gradients of frozen groups are never formed.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_final: &[f64],
    mut grad: Option<&mut ModelParams>,
    trainable: GroupSet,
) -> Vec<f64> {
    let c = &params.config;
    let rope = rope_for(params);
    let norm_grad = grad
        .as_deref_mut()
        .filter(|_| trainable.contains(Group::Attention))
        .map(|g| g.final_norm.data_mut());
    let mut dx = rmsnorm_backward(&trace.pre_norm, params.final_norm.data(), &trace.inv, d_final, norm_grad);
    let train = BlockTrainable {
        attn: trainable.contains(Group::Attention),
        ffn_t: trainable.contains(Group::TextCore),
        ffn_v: trainable.contains(Group::VisionSpecific),
    };
    for (i, (b, bc)) in params.layers.iter().zip(&trace.blocks).enumerate().rev() {
        dx = b.backward(bc, &dx, c.n_heads, &rope, grad.as_deref_mut().map(|g| &mut g.layers[i]), train);
    }
    dx
}

/// Text-only path: text embeddings, blocks with text routing, classifier.
/// Reads no visual table, visual expert or head tensor.
pub fn text_only_forward(params: &ModelParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let text_rows = params.text_embed.rows();
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= text_rows) {
        return Err(Error::data(format!("token id {id} is not a text token")));
    }
    let x = embed_tokens(params, ids)?;
    let route = vec![Expert::Text; ids.len()];
    let trace = forward(params, &x, &route, false)?;
    Ok(trace.text_logits(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folding::FoldSpec;
    use crate::params::ModelConfig;
    use crate::quantizer::{encode, Codebook};
    use crate::sequencer::Sequencer;
    use crate::shapes::{caption_of, gen_scene, render};
    use crate::vocab::Vocab;

    fn cfg() -> ModelConfig {
        ModelConfig::small(16, 2)
    }

    fn sample(seed: u64, generate: bool) -> TaskSample {
        let cb = Codebook::palette(8);
        let scene = gen_scene(seed);
        let grid = encode(&render(&scene, 64).unwrap(), &cb).unwrap();
        let seq = Sequencer::new(Vocab::standard(), FoldSpec::new(2, 4));
        if generate {
            seq.build_generation(&caption_of(&scene), &grid, false).unwrap()
        } else {
            seq.build_understanding(&grid, &caption_of(&scene)).unwrap()
        }
    }

    fn run(p: &ModelParams, s: &TaskSample, routing: Routing) -> Vec<f64> {
        let e = embed_sample(p, s, routing).unwrap();
        forward(p, &e.x, &e.route, false).unwrap().text_logits(p)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = ModelParams::init(cfg(), 1).unwrap();
        let x = embed_tokens(&p, &[3]).unwrap();
        let t = forward(&p, &x, &[Expert::Text], true).unwrap();
        for l in 0..2 {
            assert!(t.attention(l).unwrap().iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = ModelParams::init(cfg(), 2).unwrap();
        let s = sample(3, false);
        let e = embed_sample(&p, &s, Routing::ByModality).unwrap();
        let t = forward(&p, &e.x, &e.route, true).unwrap();
        let l = t.len;
        for layer in 0..2 {
            for (r, row) in t.attention(layer).unwrap().chunks(l).enumerate() {
                let q = r % l;
                assert!((row[..=q].iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(row[q + 1..].iter().all(|&a| a == 0.0));
            }
        }
        assert!(t.final_hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let p = ModelParams::init(cfg(), 4).unwrap();
        let ids: Vec<u32> = vec![34, 18, 1, 5, 24, 9, 11, 35];
        let a = text_only_forward(&p, &ids).unwrap();
        let mut ids2 = ids.clone();
        ids2[6] = 2;
        ids2[7] = 0;
        let b = text_only_forward(&p, &ids2).unwrap();
        let v = p.config.vocab;
        assert_eq!(a[..6 * v], b[..6 * v]);
        assert_ne!(a[6 * v..], b[6 * v..]);
    }

    #[test]
    fn fresh_experts_match_single_ffn_model() {
        let p = ModelParams::init(cfg(), 5).unwrap();
        let mut plain_cfg = cfg();
        plain_cfg.visual_experts = false;
        let plain = ModelParams::init(plain_cfg, 5).unwrap();
        for seed in 0..3 {
            let s = sample(seed, seed % 2 == 0);
            let routed = run(&p, &s, Routing::ByModality);
            assert_eq!(routed, run(&plain, &s, Routing::ByModality));
            assert_eq!(routed, run(&p, &s, Routing::TextOnly));
        }
    }

    #[test]
    fn perturbing_visual_expert_leaves_text_rows_unchanged() {
        let p = ModelParams::init(cfg(), 6).unwrap();
        let mut q = p.clone();
        for b in &mut q.layers {
            let f = b.ffn_v.as_mut().unwrap();
            for x in f.up.w.data_mut() {
                *x += 0.3;
            }
        }
        // a text-only prefix never reaches a visual row
        let ids = [34u32, 20, 21, 19, 22];
        assert_eq!(text_only_forward(&p, &ids).unwrap(), text_only_forward(&q, &ids).unwrap());
        // in a mixed sequence, rows before the first visual position agree
        let s = sample(7, true);
        let first_visual = s.positions.iter().position(|p| matches!(p, Position::Visual { .. })).unwrap();
        let v = p.config.vocab;
        let a = run(&p, &s, Routing::ByModality);
        let b = run(&q, &s, Routing::ByModality);
        assert_eq!(a[..first_visual * v], b[..first_visual * v]);
        assert_ne!(a, b);
    }

    #[test]
    fn text_only_forward_ignores_visual_tensors() {
        let p = ModelParams::init(cfg(), 8).unwrap();
        let mut q = p.clone();
        let other = ModelParams::init(cfg(), 99).unwrap();
        q.vis = other.vis.clone();
        q.head = other.head.clone();
        q.special_embed = other.special_embed.clone();
        for (b, o) in q.layers.iter_mut().zip(&other.layers) {
            b.ffn_v = o.ffn_v.clone();
        }
        let ids = [34u32, 18, 4, 6, 24, 11, 8, 18, 2, 7, 35];
        assert_eq!(text_only_forward(&p, &ids).unwrap(), text_only_forward(&q, &ids).unwrap());
        // and agrees with the general forward on the same ids
        let x = embed_tokens(&p, &ids).unwrap();
        let t = forward(&p, &x, &[Expert::Text; 11], false).unwrap();
        assert_eq!(t.text_logits(&p), text_only_forward(&p, &ids).unwrap());
        assert!(text_only_forward(&p, &[36]).is_err());
    }

    #[test]
    fn overlength_is_an_error() {
        let mut c = cfg();
        c.max_seq = 4;
        let p = ModelParams::init(c, 1).unwrap();
        assert!(text_only_forward(&p, &[1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn fold_mismatch_is_rejected() {
        let mut c = cfg();
        c.fold = FoldSpec::new(2, 8);
        let p = ModelParams::init(c, 1).unwrap();
        assert!(embed_sample(&p, &sample(1, false), Routing::ByModality).is_err());
    }
}
