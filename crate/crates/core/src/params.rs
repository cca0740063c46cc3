//! Model configuration, the full parameter set and its group tags.

use std::fmt;

use crate::error::{Error, Result};
use crate::folding::{FoldSpec, VisualTables};
use crate::head::HeadParams;
use crate::nn::{Block, Linear};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Freezing unit; every tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    TextCore,
    Attention,
    VisionSpecific,
    UnfoldHead,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::TextCore, Group::Attention, Group::VisionSpecific, Group::UnfoldHead];

    pub fn name(self) -> &'static str {
        match self {
            Group::TextCore => "text_core",
            Group::Attention => "attention",
            Group::VisionSpecific => "vision_specific",
            Group::UnfoldHead => "unfold_head",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b1111);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(self, g: Group) -> Self {
        GroupSet(self.0 | g.bit())
    }

    pub fn groups(self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|&g| self.contains(g)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Size of the non-visual id space (words + specials).
    pub vocab: usize,
    /// Raw visual embedding width before folding.
    pub e: usize,
    /// Codebook size.
    pub k: usize,
    pub fold: FoldSpec,
    pub head_layers: usize,
    pub max_seq: usize,
    /// Side of the positional table for visual grids.
    pub max_grid: usize,
    /// Whether blocks carry a separate visual FFN expert.
    pub visual_experts: bool,
}

impl ModelConfig {
    pub fn small(d: usize, n_layers: usize) -> Self {
        Self {
            d,
            n_layers,
            n_heads: 4.min(d / 4).max(1),
            ffn_hidden: 2 * d,
            vocab: Vocab::standard().size(),
            e: 8,
            k: 8,
            fold: FoldSpec::new(2, 4),
            head_layers: 2,
            max_seq: 128,
            max_grid: 8,
            visual_experts: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d,
            self.n_layers,
            self.n_heads,
            self.ffn_hidden,
            self.vocab,
            self.e,
            self.k,
            self.fold.m,
            self.fold.n,
            self.head_layers,
            self.max_seq,
            self.max_grid,
        ];
        if sizes.contains(&0) {
            return Err(Error::config("all model sizes must be at least 1"));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(format!("d={} not divisible by n_heads={}", self.d, self.n_heads)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("head width must be even for rotary positions"));
        }
        if self.vocab != Vocab::standard().size() {
            return Err(Error::config(format!("vocab={} but the token space has {}", self.vocab, Vocab::standard().size())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Words plus `<s>` and `</s>`.
    pub text_embed: Tensor,
    /// `<boi>`, `<eoi>`, `<UNCOND>`.
    pub special_embed: Tensor,
    pub layers: Vec<Block>,
    pub final_norm: Tensor,
    /// `[d, vocab]`, no bias.
    pub classifier: Tensor,
    pub vis: VisualTables,
    pub head: HeadParams,
}

impl ModelParams {
    /// Zero-filled parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config;
        let mn = c.fold.patch_len();
        Self {
            config,
            text_embed: Tensor::zeros(&[Vocab::standard().text_embed_rows(), c.d]),
            special_embed: Tensor::zeros(&[3, c.d]),
            layers: (0..c.n_layers).map(|_| Block::zeros(c.d, c.ffn_hidden, c.visual_experts)).collect(),
            final_norm: Tensor::zeros(&[c.d]),
            classifier: Tensor::zeros(&[c.d, c.vocab]),
            vis: VisualTables::zeros(c.k, c.e, c.max_grid, mn, c.d),
            head: HeadParams::zeros(c.d, c.k, mn, c.head_layers, c.ffn_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Random initialisation; every tensor draws from its own stream keyed by
    /// its name, and each visual expert starts as a copy of its text FFN.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let (nl, hl) = (config.n_layers, config.head_layers);
        p.visit_mut(&mut |name, _, t| {
            let mut rng = SplitMix64::derive(seed, &[fnv1a(name.as_bytes())]);
            let last = name.rsplit('.').next().unwrap_or("");
            let depth = if name.starts_with("head.") { hl } else { nl };
            if last == "norm" || last == "ffn_norm" || name == "final_norm" {
                t.fill(1.0);
            } else if last == "b" || last == "b1" || last == "b2" {
                t.fill(0.0);
            } else if name.ends_with("embed") || name == "head.pos" {
                *t = Tensor::randn(t.shape(), 0.02, &mut rng);
            } else {
                let mut std = 1.0 / (t.shape()[0] as f64).sqrt();
                if last == "wo" || (last == "w2" && !name.starts_with("vis.")) {
                    std /= (2.0 * depth as f64).sqrt();
                }
                *t = Tensor::randn(t.shape(), std, &mut rng);
            }
        });
        p.sync_visual_experts();
        Ok(p)
    }

    /// Multimodal model initialised from a text-only model: text core and
    /// attention tensors are copied, visual experts duplicate the copied text
    /// FFNs and everything else is freshly initialised.
    pub fn from_pretrained(pretrained: &ModelParams, config: ModelConfig, seed: u64) -> Result<Self> {
        let src = pretrained.config;
        if (src.d, src.n_layers, src.n_heads, src.ffn_hidden, src.vocab) != (config.d, config.n_layers, config.n_heads, config.ffn_hidden, config.vocab) {
            return Err(Error::config("pretrained text model shape does not match the target config"));
        }
        let mut p = Self::init(config, seed)?;
        p.text_embed = pretrained.text_embed.clone();
        p.classifier = pretrained.classifier.clone();
        p.final_norm = pretrained.final_norm.clone();
        for (dst, s) in p.layers.iter_mut().zip(&pretrained.layers) {
            let ffn_v = dst.ffn_v.take();
            *dst = s.clone();
            dst.ffn_v = ffn_v.map(|_| s.ffn_t.clone());
        }
        Ok(p)
    }

    /// Copies every text FFN into its layer's visual expert.
    pub fn sync_visual_experts(&mut self) {
        for b in &mut self.layers {
            if b.ffn_v.is_some() {
                b.ffn_v = Some(b.ffn_t.clone());
            }
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, Group, &Tensor)) {
        for (n, g, t) in self.tensors() {
            f(&n, g, t);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Group, &mut Tensor)) {
        for (n, g, t) in self.tensors_mut() {
            f(&n, g, t);
        }
    }

    /// All tensors with names and groups, in canonical order.
    pub fn tensors(&self) -> Vec<(String, Group, &Tensor)> {
        let mut out = Vec::new();
        out.push(("text.embed".into(), Group::TextCore, &self.text_embed));
        out.push(("text.classifier".into(), Group::TextCore, &self.classifier));
        out.push(("final_norm".into(), Group::Attention, &self.final_norm));
        for (i, b) in self.layers.iter().enumerate() {
            block_refs(&mut out, &format!("layer{i}"), b, "ffn_t", Group::TextCore);
        }
        out.push(("vis.special_embed".into(), Group::VisionSpecific, &self.special_embed));
        out.push(("vis.token_embed".into(), Group::VisionSpecific, &self.vis.token_embed));
        out.push(("vis.pos_embed".into(), Group::VisionSpecific, &self.vis.pos_embed));
        ffn_refs(&mut out, "vis.mlp", &self.vis.mlp, Group::VisionSpecific);
        let h = &self.head;
        linear_refs(&mut out, "head.cond_proj", &h.cond_proj, Group::UnfoldHead);
        out.push(("head.vq_embed".into(), Group::UnfoldHead, &h.vq_embed));
        out.push(("head.pos".into(), Group::UnfoldHead, &h.pos));
        for (i, b) in h.layers.iter().enumerate() {
            let pre = format!("head.layer{i}");
            let start = out.len();
            block_refs(&mut out, &pre, b, "ffn", Group::UnfoldHead);
            for e in &mut out[start..] {
                e.1 = Group::UnfoldHead;
            }
        }
        out.push(("head.norm".into(), Group::UnfoldHead, &h.norm));
        linear_refs(&mut out, "head.classifier", &h.classifier, Group::UnfoldHead);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, Group, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("text.embed".into(), Group::TextCore, &mut self.text_embed));
        out.push(("text.classifier".into(), Group::TextCore, &mut self.classifier));
        out.push(("final_norm".into(), Group::Attention, &mut self.final_norm));
        for (i, b) in self.layers.iter_mut().enumerate() {
            block_muts(&mut out, &format!("layer{i}"), b, "ffn_t", Group::TextCore);
        }
        out.push(("vis.special_embed".into(), Group::VisionSpecific, &mut self.special_embed));
        out.push(("vis.token_embed".into(), Group::VisionSpecific, &mut self.vis.token_embed));
        out.push(("vis.pos_embed".into(), Group::VisionSpecific, &mut self.vis.pos_embed));
        ffn_muts(&mut out, "vis.mlp", &mut self.vis.mlp, Group::VisionSpecific);
        let h = &mut self.head;
        linear_muts(&mut out, "head.cond_proj", &mut h.cond_proj, Group::UnfoldHead);
        out.push(("head.vq_embed".into(), Group::UnfoldHead, &mut h.vq_embed));
        out.push(("head.pos".into(), Group::UnfoldHead, &mut h.pos));
        for (i, b) in h.layers.iter_mut().enumerate() {
            let pre = format!("head.layer{i}");
            let start = out.len();
            block_muts(&mut out, &pre, b, "ffn", Group::UnfoldHead);
            for e in &mut out[start..] {
                e.1 = Group::UnfoldHead;
            }
        }
        out.push(("head.norm".into(), Group::UnfoldHead, &mut h.norm));
        linear_muts(&mut out, "head.classifier", &mut h.classifier, Group::UnfoldHead);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.tensors().into_iter().find(|(n, _, _)| n == name).map(|(_, g, _)| g)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }

    /// `self += other` over every tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

type Refs<'a> = Vec<(String, Group, &'a Tensor)>;
type Muts<'a> = Vec<(String, Group, &'a mut Tensor)>;

fn linear_refs<'a>(out: &mut Refs<'a>, pre: &str, l: &'a Linear, g: Group) {
    out.push((format!("{pre}.w"), g, &l.w));
    if let Some(b) = &l.b {
        out.push((format!("{pre}.b"), g, b));
    }
}

fn linear_muts<'a>(out: &mut Muts<'a>, pre: &str, l: &'a mut Linear, g: Group) {
    out.push((format!("{pre}.w"), g, &mut l.w));
    if let Some(b) = &mut l.b {
        out.push((format!("{pre}.b"), g, b));
    }
}

fn ffn_refs<'a>(out: &mut Refs<'a>, pre: &str, f: &'a crate::nn::Ffn, g: Group) {
    out.push((format!("{pre}.w1"), g, &f.up.w));
    out.push((format!("{pre}.b1"), g, f.up.b.as_ref().expect("ffn bias")));
    out.push((format!("{pre}.w2"), g, &f.down.w));
    out.push((format!("{pre}.b2"), g, f.down.b.as_ref().expect("ffn bias")));
}

fn ffn_muts<'a>(out: &mut Muts<'a>, pre: &str, f: &'a mut crate::nn::Ffn, g: Group) {
    out.push((format!("{pre}.w1"), g, &mut f.up.w));
    out.push((format!("{pre}.b1"), g, f.up.b.as_mut().expect("ffn bias")));
    out.push((format!("{pre}.w2"), g, &mut f.down.w));
    out.push((format!("{pre}.b2"), g, f.down.b.as_mut().expect("ffn bias")));
}

fn block_refs<'a>(out: &mut Refs<'a>, pre: &str, b: &'a Block, ffn_name: &str, ffn_group: Group) {
    let a = Group::Attention;
    out.push((format!("{pre}.attn.norm"), a, &b.attn_norm));
    out.push((format!("{pre}.attn.wq"), a, &b.wq.w));
    out.push((format!("{pre}.attn.wk"), a, &b.wk.w));
    out.push((format!("{pre}.attn.wv"), a, &b.wv.w));
    out.push((format!("{pre}.attn.wo"), a, &b.wo.w));
    out.push((format!("{pre}.ffn_norm"), a, &b.ffn_norm));
    ffn_refs(out, &format!("{pre}.{ffn_name}"), &b.ffn_t, ffn_group);
    if let Some(v) = &b.ffn_v {
        ffn_refs(out, &format!("{pre}.ffn_v"), v, Group::VisionSpecific);
    }
}

fn block_muts<'a>(out: &mut Muts<'a>, pre: &str, b: &'a mut Block, ffn_name: &str, ffn_group: Group) {
    let a = Group::Attention;
    out.push((format!("{pre}.attn.norm"), a, &mut b.attn_norm));
    out.push((format!("{pre}.attn.wq"), a, &mut b.wq.w));
    out.push((format!("{pre}.attn.wk"), a, &mut b.wk.w));
    out.push((format!("{pre}.attn.wv"), a, &mut b.wv.w));
    out.push((format!("{pre}.attn.wo"), a, &mut b.wo.w));
    out.push((format!("{pre}.ffn_norm"), a, &mut b.ffn_norm));
    ffn_muts(out, &format!("{pre}.{ffn_name}"), &mut b.ffn_t, ffn_group);
    if let Some(v) = &mut b.ffn_v {
        ffn_muts(out, &format!("{pre}.ffn_v"), v, Group::VisionSpecific);
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg() -> ModelConfig {
        ModelConfig::small(16, 2)
    }

    #[test]
    fn every_tensor_has_one_group_and_unique_name() {
        let p = ModelParams::init(cfg(), 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        let set: HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let mut_names: Vec<String> = p.clone().tensors_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, mut_names);
        for g in Group::ALL {
            assert!(p.tensors().iter().any(|(_, gg, _)| *gg == g), "{g} empty");
        }
        assert_eq!(p.group_of("layer1.attn.wq"), Some(Group::Attention));
        assert_eq!(p.group_of("layer0.ffn_t.w1"), Some(Group::TextCore));
        assert_eq!(p.group_of("layer0.ffn_v.b2"), Some(Group::VisionSpecific));
        assert_eq!(p.group_of("vis.mlp.w1"), Some(Group::VisionSpecific));
        assert_eq!(p.group_of("head.layer1.ffn.w1"), Some(Group::UnfoldHead));
        assert_eq!(p.group_of("head.layer0.attn.norm"), Some(Group::UnfoldHead));
        assert_eq!(p.group_of("head.classifier.b"), Some(Group::UnfoldHead));
    }

    #[test]
    fn init_is_seeded_and_experts_start_equal() {
        let a = ModelParams::init(cfg(), 7).unwrap();
        assert_eq!(a, ModelParams::init(cfg(), 7).unwrap());
        assert_ne!(a, ModelParams::init(cfg(), 8).unwrap());
        for b in &a.layers {
            assert_eq!(b.ffn_v.as_ref().unwrap(), &b.ffn_t);
        }
        assert!(a.is_finite());
    }

    #[test]
    fn init_streams_do_not_depend_on_other_tensors() {
        let mut c = cfg();
        c.visual_experts = false;
        let plain = ModelParams::init(c, 3).unwrap();
        let moe = ModelParams::init(cfg(), 3).unwrap();
        for (n, _, t) in plain.tensors() {
            assert_eq!(moe.get(&n).unwrap(), t, "{n}");
        }
    }

    #[test]
    fn from_pretrained_copies_text_path() {
        let mut tc = cfg();
        tc.visual_experts = false;
        let text = ModelParams::init(tc, 11).unwrap();
        let p = ModelParams::from_pretrained(&text, cfg(), 12).unwrap();
        for (n, g, t) in p.tensors() {
            if matches!(g, Group::TextCore | Group::Attention) {
                assert_eq!(text.get(&n).unwrap(), t, "{n}");
            }
        }
        for (b, s) in p.layers.iter().zip(&text.layers) {
            assert_eq!(b.ffn_v.as_ref().unwrap(), &s.ffn_t);
        }
    }

    #[test]
    fn group_set_ops() {
        let s = GroupSet::of(&[Group::VisionSpecific, Group::UnfoldHead]);
        assert!(s.contains(Group::UnfoldHead) && !s.contains(Group::Attention));
        assert!(s.with(Group::Attention).contains(Group::Attention));
        assert_eq!(GroupSet::ALL.groups().len(), 4);
    }
}
