//! Inference: caption generation and guided image generation over an
//! incrementally decoded context.

use std::fmt::Write as _;

use crate::data::held_out_scenes;
use crate::error::{Error, Result};
use crate::folding::{embed_patch, fold_index_map};
use crate::image::Image;
use crate::model::{rope_for, text_logits_rows, token_embedding};
use crate::nn::{rmsnorm, Expert, KvCache, Rope};
use crate::params::ModelParams;
use crate::quantizer::{decode, encode, Codebook, TokenGrid};
use crate::rng::SplitMix64;
use crate::sequencer::{tile_image, Modality, Sequencer, UNDERSTAND_PROMPT};
use crate::shapes::{caption_of, objects_in_caption, parse_scene, render};
use crate::vocab::{Special, TokenId, Vocab};

pub const CAPTION_CAP: usize = 64;
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRule {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub k: usize,
    pub seed: u64,
}

impl SamplingRule {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            temperature: 1.0,
            k: 1,
            seed: 0,
        }
    }

    pub fn temperature(t: f64, seed: u64) -> Self {
        Self {
            mode: SamplingMode::Temperature,
            temperature: t,
            k: usize::MAX,
            seed,
        }
    }

    pub fn top_k(k: usize, t: f64, seed: u64) -> Self {
        Self {
            mode: SamplingMode::TopK,
            temperature: t,
            k,
            seed,
        }
    }
}

fn argmax(l: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in l.iter().enumerate() {
        if v > l[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `logits` under `rule`. Greedy never touches `rng`;
/// the stochastic modes consume exactly one draw.
pub fn sample_logits(logits: &[f64], rule: &SamplingRule, rng: &mut SplitMix64) -> usize {
    if rule.mode == SamplingMode::Greedy {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    let keep = if rule.mode == SamplingMode::TopK {
        // stable sort keeps lower indices first among equal logits
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        rule.k.clamp(1, logits.len())
    } else {
        logits.len()
    };
    let kept = &order[..keep];
    let max = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = kept.iter().map(|&i| ((logits[i] - max) / rule.temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let u = rng.next_f64() * z;
    let mut acc = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        acc += wj;
        if u < acc {
            return kept[j];
        }
    }
    // rounding left u at the very top; take the last candidate with weight
    kept[w.iter().rposition(|&x| x > 0.0).unwrap_or(0)]
}

/// Running decoder state with per-layer key/value caches.
pub struct GenContext<'a> {
    params: &'a ModelParams,
    rope: Rope,
    caches: Vec<KvCache>,
    /// Input rows appended so far, `[len, d]`.
    pub rows: Vec<f64>,
    pub modality: Vec<Modality>,
    last: Vec<f64>,
}

impl<'a> GenContext<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            rope: rope_for(params),
            caches: vec![KvCache::default(); params.config.n_layers],
            rows: Vec::new(),
            modality: Vec::new(),
            last: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    /// Appends one input row and returns the normed final hidden state there.
    pub fn push_row(&mut self, x: &[f64], modality: Modality) -> Result<&[f64]> {
        let c = &self.params.config;
        let pos = self.len();
        if pos >= c.max_seq {
            return Err(Error::shape(format!("context exceeds max_seq {}", c.max_seq)));
        }
        let expert = match modality {
            Modality::Text => Expert::Text,
            Modality::Visual => Expert::Visual,
        };
        let mut h = x.to_vec();
        for (b, cache) in self.params.layers.iter().zip(&mut self.caches) {
            h = b.forward_step(&h, pos, c.n_heads, &self.rope, expert, cache);
        }
        self.rows.extend_from_slice(x);
        self.modality.push(modality);
        self.last = rmsnorm(&h, self.params.final_norm.data()).0;
        Ok(&self.last)
    }

    pub fn push_token(&mut self, id: TokenId) -> Result<&[f64]> {
        let x = token_embedding(self.params, id)?.to_vec();
        self.push_row(&x, Modality::Text)
    }

    pub fn push_tokens(&mut self, ids: &[TokenId]) -> Result<()> {
        for &id in ids {
            self.push_token(id)?;
        }
        Ok(())
    }

    /// Normed final hidden state of the latest position.
    pub fn last_hidden(&self) -> &[f64] {
        &self.last
    }

    pub fn next_text_logits(&self) -> Vec<f64> {
        text_logits_rows(self.params, &self.last)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    pub ids: Vec<TokenId>,
    /// The cap was reached before `</s>`.
    pub truncated: bool,
}

/// Grids for one image: a single tile when it fits the positional table,
/// otherwise base tiles plus a thumbnail.
pub fn image_grids(params: &ModelParams, cb: &Codebook, img: &Image) -> Result<Vec<TokenGrid>> {
    if let Some((x, y)) = img.first_non_palette() {
        return Err(Error::data(format!("non-palette pixel at ({x}, {y})")));
    }
    let grid = encode(img, cb)?;
    let base = params.config.max_grid;
    if grid.h() <= base && grid.w() <= base {
        return Ok(vec![grid]);
    }
    let tiles = (grid.h() / base.max(1)) * (grid.w() / base.max(1));
    Ok(tile_image(&grid, base, tiles, true, cb)?.grids())
}

/// Samples an answer after `<s> prompt (<boi> V <eoi>)*` until `</s>`.
pub fn answer(params: &ModelParams, grids: &[TokenGrid], prompt: &str, rule: &SamplingRule) -> Result<Caption> {
    let vocab = Vocab::standard();
    let seq = Sequencer::new(vocab.clone(), params.config.fold);
    let prefix = seq.understanding_prefix(grids, prompt)?;
    let mut ctx = GenContext::new(params);
    let mut folded = Vec::new();
    for g in grids {
        folded.push(crate::folding::embed_and_fold(g, &params.vis, params.config.fold)?.0);
    }
    let d = params.config.d;
    for p in &prefix.positions {
        match *p {
            crate::sequencer::Position::Text(id) => {
                ctx.push_token(id)?;
            }
            crate::sequencer::Position::Visual { block, patch } => {
                ctx.push_row(&folded[block][patch * d..(patch + 1) * d], Modality::Visual)?;
            }
        }
    }
    let banned = [Special::Bos, Special::Boi, Special::Eoi, Special::Uncond].map(|s| vocab.special(s) as usize);
    let eos = vocab.special(Special::Eos);
    let mut rng = SplitMix64::new(rule.seed);
    let mut ids = Vec::new();
    loop {
        if ids.len() >= CAPTION_CAP || ctx.len() >= params.config.max_seq {
            return Ok(Caption {
                text: vocab.detokenize(&ids),
                ids,
                truncated: true,
            });
        }
        let mut l = ctx.next_text_logits();
        for &b in &banned {
            l[b] = f64::NEG_INFINITY;
        }
        let id = sample_logits(&l, rule, &mut rng) as TokenId;
        if id == eos {
            return Ok(Caption {
                text: vocab.detokenize(&ids),
                ids,
                truncated: false,
            });
        }
        ids.push(id);
        ctx.push_token(id)?;
    }
}

pub fn generate_caption(params: &ModelParams, cb: &Codebook, img: &Image, rule: &SamplingRule) -> Result<Caption> {
    answer(params, &image_grids(params, cb, img)?, UNDERSTAND_PROMPT, rule)
}

/// Which logits drive image sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// `s*l_c + (1-s)*l_u` from the two contexts.
    Cfg(f64),
    ConditionalOnly,
    UnconditionalOnly,
}

pub struct GeneratedImage {
    pub grid: TokenGrid,
    pub image: Image,
    /// Input rows appended after `<boi>` in the conditional and the
    /// unconditional context (empty when that context was not run).
    pub cond_suffix: Vec<f64>,
    pub uncond_suffix: Vec<f64>,
}

/// Generates a `grid_h x grid_w` token grid patch by patch. Each patch's ids
/// are re-folded and the same row is appended to every live context.
pub fn generate_image(
    params: &ModelParams,
    cb: &Codebook,
    caption: &str,
    guidance: Guidance,
    rule: &SamplingRule,
    grid_hw: (usize, usize),
) -> Result<GeneratedImage> {
    let c = &params.config;
    let (gh, gw) = grid_hw;
    let map = fold_index_map(gh, gw, c.fold)?;
    let seq = Sequencer::new(Vocab::standard(), c.fold);
    let bos = seq.vocab.special(Special::Bos);
    let boi = seq.vocab.special(Special::Boi);
    let eoi = seq.vocab.special(Special::Eoi);
    let start = |uncond: bool| -> Result<(GenContext<'_>, usize)> {
        let mut ctx = GenContext::new(params);
        ctx.push_token(bos)?;
        ctx.push_tokens(&seq.generation_prompt(caption, uncond)?)?;
        ctx.push_token(boi)?;
        let n = ctx.len();
        Ok((ctx, n))
    };
    let mut cond = match guidance {
        Guidance::UnconditionalOnly => None,
        _ => Some(start(false)?),
    };
    let mut uncond = match guidance {
        Guidance::ConditionalOnly => None,
        _ => Some(start(true)?),
    };
    let mut rng = SplitMix64::new(rule.seed);
    let mut grid = TokenGrid::new(gh, gw, vec![0; gh * gw])?;
    let mut ids_flat = vec![0u32; gh * gw];
    for patch in 0..map.patches() {
        let ids = match (&cond, &uncond, guidance) {
            (Some((cc, _)), Some((uc, _)), Guidance::Cfg(s)) => {
                params.head.generate_cfg(cc.last_hidden(), uc.last_hidden(), s, c.n_heads, rule, &mut rng)?
            }
            (Some((cc, _)), _, _) => params.head.generate(cc.last_hidden(), c.n_heads, rule, &mut rng)?,
            (_, Some((uc, _)), _) => params.head.generate(uc.last_hidden(), c.n_heads, rule, &mut rng)?,
            _ => unreachable!("at least one context is live"),
        };
        for (j, &id) in ids.iter().enumerate() {
            ids_flat[map.to_flat(patch, j)] = id;
        }
        grid = TokenGrid::new(gh, gw, ids_flat.clone())?;
        let row = embed_patch(&grid, patch, &params.vis, c.fold)?;
        for ctx in [cond.as_mut(), uncond.as_mut()].into_iter().flatten() {
            ctx.0.push_row(&row, Modality::Visual)?;
        }
    }
    for ctx in [cond.as_mut(), uncond.as_mut()].into_iter().flatten() {
        if ctx.0.len() < c.max_seq {
            ctx.0.push_token(eoi)?;
        }
    }
    let d = c.d;
    let suffix = |ctx: &Option<(GenContext<'_>, usize)>| match ctx {
        Some((g, n)) => g.rows[n * d..(n + map.patches()) * d].to_vec(),
        None => Vec::new(),
    };
    Ok(GeneratedImage {
        image: decode(&grid, cb)?,
        cond_suffix: suffix(&cond),
        uncond_suffix: suffix(&uncond),
        grid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub caption_exact_match: f64,
    pub caption_object_recall: f64,
    pub generation_accuracy: f64,
    pub generation_validity: f64,
    pub folded_tokens_per_image: usize,
    pub n_captions: usize,
    pub n_generations: usize,
}

pub const EVAL_CSV_HEADER: &str = "caption_exact_match,caption_object_recall,generation_accuracy,generation_validity,folded_tokens_per_image,n_captions,n_generations";

impl EvalMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        writeln!(
            s,
            "\n{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.caption_exact_match,
            self.caption_object_recall,
            self.generation_accuracy,
            self.generation_validity,
            self.folded_tokens_per_image,
            self.n_captions,
            self.n_generations
        )
        .unwrap();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_captions: usize,
    pub n_generations: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_captions: 200,
            n_generations: 50,
            cfg_scale: DEFAULT_CFG_SCALE,
            seed: 0,
            image_size: 64,
        }
    }
}

/// Captions held-out scenes greedily and generates images from held-out
/// captions, scoring both with the scene oracle.
pub fn eval_suite(params: &ModelParams, cb: &Codebook, opts: &EvalOptions) -> Result<EvalMetrics> {
    let scenes = held_out_scenes(opts.n_captions.max(opts.n_generations), opts.seed);
    let (mut exact, mut found, mut total) = (0usize, 0usize, 0usize);
    for scene in &scenes[..opts.n_captions] {
        let img = render(scene, opts.image_size)?;
        let cap = generate_caption(params, cb, &img, &SamplingRule::greedy())?;
        let want = caption_of(scene);
        exact += (cap.text == want) as usize;
        let got = objects_in_caption(&cap.text);
        total += scene.objects().len();
        found += scene.objects().iter().filter(|o| got.contains(o)).count();
    }
    let grid_side = opts.image_size / cb.p();
    let (mut correct, mut valid) = (0usize, 0usize);
    for (i, scene) in scenes[..opts.n_generations].iter().enumerate() {
        let rule = SamplingRule::top_k(params.config.k, 1.0, opts.seed.wrapping_add(i as u64));
        let out = generate_image(params, cb, &caption_of(scene), Guidance::Cfg(opts.cfg_scale), &rule, (grid_side, grid_side))?;
        if out.image.first_non_palette().is_none() {
            valid += 1;
        }
        if parse_scene(&out.image).map(|s| &s == scene).unwrap_or(false) {
            correct += 1;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalMetrics {
        caption_exact_match: frac(exact, opts.n_captions),
        caption_object_recall: frac(found, total),
        generation_accuracy: frac(correct, opts.n_generations),
        generation_validity: frac(valid, opts.n_generations),
        folded_tokens_per_image: params.config.fold.patches(grid_side, grid_side)?,
        n_captions: opts.n_captions,
        n_generations: opts.n_generations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_sample, forward, Routing};
    use crate::params::ModelConfig;
    use crate::shapes::gen_scene;

    fn model() -> ModelParams {
        ModelParams::init(ModelConfig::small(16, 2), 21).unwrap()
    }

    #[test]
    fn greedy_and_tie_breaking() {
        let mut rng = SplitMix64::new(0);
        assert_eq!(sample_logits(&[0.0, 2.0, 2.0, 1.0], &SamplingRule::greedy(), &mut rng), 1);
        assert_eq!(rng.state(), SplitMix64::new(0).state());
    }

    #[test]
    fn low_temperature_is_greedy() {
        let l = [0.3, -1.0, 0.9, 0.85];
        for seed in 0..50 {
            let mut rng = SplitMix64::new(seed);
            assert_eq!(sample_logits(&l, &SamplingRule::temperature(1e-6, seed), &mut rng), 2);
        }
    }

    #[test]
    fn top_k_restricts_support_and_matches_frequencies() {
        let l = [1.0, 0.0, 2.0, -1.0];
        let mut rng = SplitMix64::new(3);
        let mut counts = [0usize; 4];
        let n = 20_000;
        for _ in 0..n {
            counts[sample_logits(&l, &SamplingRule::top_k(2, 1.0, 0), &mut rng)] += 1;
        }
        assert_eq!(counts[1] + counts[3], 0);
        let p2 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((counts[2] as f64 / n as f64 - p2).abs() < 0.01);
    }

    #[test]
    fn masked_logits_never_sampled() {
        let l = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            assert_eq!(sample_logits(&l, &SamplingRule::temperature(1.0, 0), &mut rng), 1);
        }
    }

    #[test]
    fn cached_context_matches_full_forward() {
        let p = model();
        let cb = Codebook::palette(8);
        let seq = Sequencer::new(Vocab::standard(), p.config.fold);
        let scene = gen_scene(5);
        let grid = encode(&render(&scene, 64).unwrap(), &cb).unwrap();
        let s = seq.build_generation(&caption_of(&scene), &grid, false).unwrap();
        let e = embed_sample(&p, &s, Routing::ByModality).unwrap();
        let full = forward(&p, &e.x, &e.route, false).unwrap();
        let mut ctx = GenContext::new(&p);
        let d = p.config.d;
        for i in 0..s.len() {
            let h = ctx.push_row(&e.x[i * d..(i + 1) * d], s.modality[i]).unwrap().to_vec();
            for (a, b) in h.iter().zip(&full.final_hidden[i * d..(i + 1) * d]) {
                assert!((a - b).abs() < 1e-5);
            }
            let la = ctx.next_text_logits();
            let lb = text_logits_rows(&p, &full.final_hidden[i * d..(i + 1) * d]);
            for (a, b) in la.iter().zip(&lb) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn caption_is_deterministic_and_in_vocab() {
        let p = model();
        let cb = Codebook::palette(8);
        let img = render(&gen_scene(9), 64).unwrap();
        let a = generate_caption(&p, &cb, &img, &SamplingRule::greedy()).unwrap();
        let b = generate_caption(&p, &cb, &img, &SamplingRule::greedy()).unwrap();
        assert_eq!(a, b);
        let v = Vocab::standard();
        assert!(a.ids.len() <= CAPTION_CAP);
        assert!(a.ids.iter().all(|&i| v.as_special(i).is_none() || v.as_special(i) == Some(Special::Eos)));
    }

    #[test]
    fn guidance_identities_on_images() {
        let p = model();
        let cb = Codebook::palette(8);
        let rule = SamplingRule::top_k(8, 1.0, 17);
        let cap = "a red circle at top left";
        let g1 = generate_image(&p, &cb, cap, Guidance::Cfg(1.0), &rule, (8, 8)).unwrap();
        let gc = generate_image(&p, &cb, cap, Guidance::ConditionalOnly, &rule, (8, 8)).unwrap();
        assert_eq!(g1.image, gc.image);
        let g0 = generate_image(&p, &cb, cap, Guidance::Cfg(0.0), &rule, (8, 8)).unwrap();
        let gu = generate_image(&p, &cb, cap, Guidance::UnconditionalOnly, &rule, (8, 8)).unwrap();
        assert_eq!(g0.image, gu.image);
        // both contexts received identical visual rows
        let g = generate_image(&p, &cb, cap, Guidance::Cfg(7.5), &rule, (8, 8)).unwrap();
        assert_eq!(g.cond_suffix, g.uncond_suffix);
        assert_eq!(g.cond_suffix.len(), 8 * p.config.d);
        assert_eq!(g.grid.ids().len(), 64);
        assert!(g.grid.ids().iter().all(|&i| i < 8));
        let again = generate_image(&p, &cb, cap, Guidance::Cfg(7.5), &rule, (8, 8)).unwrap();
        assert_eq!(g.image, again.image);
    }

    #[test]
    fn csv_header_is_stable() {
        let m = EvalMetrics {
            caption_exact_match: 0.5,
            caption_object_recall: 0.75,
            generation_accuracy: 0.0,
            generation_validity: 1.0,
            folded_tokens_per_image: 8,
            n_captions: 2,
            n_generations: 1,
        };
        let csv = m.to_csv();
        assert_eq!(csv.lines().next().unwrap(), EVAL_CSV_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "0.500000,0.750000,0.000000,1.000000,8,2,1");
    }
}
