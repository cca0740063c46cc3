//! Unified text+image loss, AdamW with group freezing, stage schedules and
//! the training loop.
//!
//! Next-token convention: a target at position `i` is predicted from the
//! outputs at `i - 1`. Text targets read the text classifier there; visual
//! targets feed the final hidden state at `i - 1` to the unfolding head,
//! which predicts all `m*n` ids of the patch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::model::{backward, embed_backward, embed_sample, forward, text_logits_backward, text_logits_rows, text_only_forward, Routing};
use crate::params::{Group, GroupSet, ModelParams};
use crate::sequencer::{Position, TaskSample};
use crate::tensor::Tensor;
use crate::vocab::{Special, Vocab};

pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_CFG_DROP: f64 = 0.1;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

/// Per-modality mean losses and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub text_loss: f64,
    pub image_loss: f64,
    pub lambda: f64,
    pub total: f64,
    pub text_count: usize,
    /// Number of supervised VQ ids (visual positions times `m*n`).
    pub image_count: usize,
}

impl LossBreakdown {
    fn from_sums(text_nll: f64, text_count: usize, image_nll: f64, image_count: usize, lambda: f64) -> Result<Self> {
        if text_count == 0 && image_count == 0 {
            return Err(Error::data("loss mask is empty in both modalities"));
        }
        let text_loss = if text_count > 0 { text_nll / text_count as f64 } else { 0.0 };
        let image_loss = if image_count > 0 { image_nll / image_count as f64 } else { 0.0 };
        Ok(Self {
            text_loss,
            image_loss,
            lambda,
            total: text_loss + lambda * image_loss,
            text_count,
            image_count,
        })
    }
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`[rows, classes]`), and `softmax - onehot` per row.
pub fn cross_entropy(logits: &[f64], targets: &[u32], classes: usize) -> (f64, Vec<f64>) {
    let mut nll = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &t) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (gi, &l) in g.iter_mut().zip(row) {
            *gi = (l - max).exp();
            z += *gi;
        }
        nll += z.ln() + max - row[t as usize];
        for gi in g.iter_mut() {
            *gi /= z;
        }
        g[t as usize] -= 1.0;
    }
    (nll, grad)
}

/// Eq.-style unified loss of one sample from precomputed logits.
///
/// `text_logits` is `[len, vocab]` over all positions; `head_logits` holds
/// `m*n` rows of `k` logits for each supervised visual position, in
/// sequence order.
pub fn unified_loss(
    sample: &TaskSample,
    text_logits: &[f64],
    head_logits: &[f64],
    vocab: usize,
    k: usize,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mn = sample.fold.patch_len();
    let (mut tn, mut tc, mut inll, mut ic) = (0.0, 0, 0.0, 0);
    let mut vis = 0;
    for (i, pos) in sample.positions.iter().enumerate() {
        if !sample.loss[i] {
            continue;
        }
        if i == 0 {
            return Err(Error::data("the first position cannot be a target"));
        }
        match *pos {
            Position::Text(id) => {
                tn += cross_entropy(&text_logits[(i - 1) * vocab..i * vocab], &[id], vocab).0;
                tc += 1;
            }
            Position::Visual { block, patch } => {
                let rows = head_logits
                    .get(vis * mn * k..(vis + 1) * mn * k)
                    .ok_or_else(|| Error::shape("too few head logits for the visual targets"))?;
                inll += cross_entropy(rows, &sample.patch_ids(block, patch), k).0;
                ic += mn;
                vis += 1;
            }
        }
    }
    LossBreakdown::from_sums(tn, tc, inll, ic, lambda)
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleStats {
    text_nll: f64,
    text_count: usize,
    image_nll: f64,
    image_count: usize,
}

fn gather_rows(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect()
}

fn scatter_rows(dst: &mut [f64], d: usize, rows: &[usize], src: &[f64]) {
    for (i, &r) in rows.iter().enumerate() {
        for (a, b) in dst[r * d..(r + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
            *a += b;
        }
    }
}

fn target_counts(sample: &TaskSample) -> (usize, usize) {
    let mn = sample.fold.patch_len();
    let mut t = (0, 0);
    for (p, &l) in sample.positions.iter().zip(&sample.loss) {
        match (p, l) {
            (Position::Text(_), true) => t.0 += 1,
            (Position::Visual { .. }, true) => t.1 += mn,
            _ => {}
        }
    }
    t
}

/// Forward (and, with `grad`, backward) of one sample. `scales` are the
/// factors applied to the summed text and image NLL gradients.
fn sample_pass(
    params: &ModelParams,
    sample: &TaskSample,
    scales: (f64, f64),
    mut grad: Option<&mut ModelParams>,
    trainable: GroupSet,
) -> Result<SampleStats> {
    let c = &params.config;
    let (d, v, k) = (c.d, c.vocab, c.k);
    let emb = embed_sample(params, sample, Routing::ByModality)?;
    let trace = forward(params, &emb.x, &emb.route, false)?;
    let (mut text_rows, mut text_targets, mut vis_rows, mut teacher) = (vec![], vec![], vec![], vec![]);
    for (i, pos) in sample.positions.iter().enumerate() {
        if !sample.loss[i] {
            continue;
        }
        if i == 0 {
            return Err(Error::data("the first position cannot be a target"));
        }
        match *pos {
            Position::Text(id) => {
                text_rows.push(i - 1);
                text_targets.push(id);
            }
            Position::Visual { block, patch } => {
                vis_rows.push(i - 1);
                teacher.extend(sample.patch_ids(block, patch));
            }
        }
    }
    let mut stats = SampleStats::default();
    let h_text = gather_rows(&trace.final_hidden, d, &text_rows);
    let (tn, mut dlt) = cross_entropy(&text_logits_rows(params, &h_text), &text_targets, v);
    stats.text_nll = tn;
    stats.text_count = text_targets.len();
    let head = if vis_rows.is_empty() {
        None
    } else {
        let h_vis = gather_rows(&trace.final_hidden, d, &vis_rows);
        let (logits, cache) = params.head.forward(&h_vis, &teacher, c.n_heads)?;
        let (inll, dli) = cross_entropy(&logits, &teacher, k);
        stats.image_nll = inll;
        stats.image_count = teacher.len();
        Some((cache, dli))
    };
    let Some(g) = grad.as_deref_mut() else {
        return Ok(stats);
    };
    let mut d_final = vec![0.0; trace.len * d];
    if !text_rows.is_empty() {
        dlt.iter_mut().for_each(|x| *x *= scales.0);
        let gc = trainable.contains(Group::TextCore).then_some(&mut *g);
        let dh = text_logits_backward(params, &h_text, &dlt, gc);
        scatter_rows(&mut d_final, d, &text_rows, &dh);
    }
    if let Some((cache, mut dli)) = head {
        dli.iter_mut().for_each(|x| *x *= scales.1);
        let gh = trainable.contains(Group::UnfoldHead).then_some(&mut g.head);
        let dh = params.head.backward(&cache, &dli, c.n_heads, gh);
        scatter_rows(&mut d_final, d, &vis_rows, &dh);
    }
    let dx = backward(params, &trace, &d_final, Some(&mut *g), trainable);
    embed_backward(params, &emb, &dx, g, trainable);
    Ok(stats)
}

fn check_finite(i: usize, s: &SampleStats) -> Result<()> {
    if !s.text_nll.is_finite() || !s.image_nll.is_finite() {
        return Err(Error::NonFinite {
            sample: i,
            detail: format!("text nll {}, image nll {}", s.text_nll, s.image_nll),
        });
    }
    Ok(())
}

/// Forward-only loss of a batch.
pub fn batch_loss(params: &ModelParams, batch: &[TaskSample], lambda: f64) -> Result<LossBreakdown> {
    let mut tot = SampleStats::default();
    for (i, s) in batch.iter().enumerate() {
        let st = sample_pass(params, s, (0.0, 0.0), None, GroupSet::NONE)?;
        check_finite(i, &st)?;
        tot.text_nll += st.text_nll;
        tot.text_count += st.text_count;
        tot.image_nll += st.image_nll;
        tot.image_count += st.image_count;
    }
    LossBreakdown::from_sums(tot.text_nll, tot.text_count, tot.image_nll, tot.image_count, lambda)
}

/// Worker threads for per-sample gradients: `SGVL_THREADS`, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SGVL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Loss and summed gradients of a batch. Each sample gets its own gradient
/// buffer and buffers are added in sample order, so the result does not
/// depend on the thread count.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[TaskSample],
    lambda: f64,
    trainable: GroupSet,
) -> Result<(LossBreakdown, ModelParams)> {
    let (mut tc, mut ic) = (0, 0);
    for s in batch {
        let (t, i) = target_counts(s);
        tc += t;
        ic += i;
    }
    if tc == 0 && ic == 0 {
        return Err(Error::data("loss mask is empty in both modalities"));
    }
    let scales = (
        if tc > 0 { 1.0 / tc as f64 } else { 0.0 },
        if ic > 0 { lambda / ic as f64 } else { 0.0 },
    );
    let one = |s: &TaskSample| -> Result<(SampleStats, ModelParams)> {
        let mut g = params.zeros_like();
        let st = sample_pass(params, s, scales, Some(&mut g), trainable)?;
        Ok((st, g))
    };
    let threads = worker_threads().min(batch.len()).max(1);
    let results: Vec<Result<(SampleStats, ModelParams)>> = if threads == 1 {
        batch.iter().map(one).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| sc.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total = params.zeros_like();
    let mut tot = SampleStats::default();
    for (i, r) in results.into_iter().enumerate() {
        let (st, g) = r?;
        check_finite(i, &st)?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                sample: i,
                detail: "non-finite gradient".into(),
            });
        }
        total.add_assign(&g);
        tot.text_nll += st.text_nll;
        tot.text_count += st.text_count;
        tot.image_nll += st.image_nll;
        tot.image_count += st.image_count;
    }
    let loss = LossBreakdown::from_sums(tot.text_nll, tot.text_count, tot.image_nll, tot.image_count, lambda)?;
    Ok((loss, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Text-only language model that later initialises the multimodal one.
    Pretrain,
    S1,
    S2,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::Sft => "sft",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        [Stage::Pretrain, Stage::S1, Stage::S2, Stage::Sft].into_iter().find(|x| x.name() == s)
    }

    pub fn trainable(self) -> GroupSet {
        match self {
            Stage::Pretrain => GroupSet::of(&[Group::TextCore, Group::Attention]),
            Stage::S1 => GroupSet::of(&[Group::VisionSpecific, Group::UnfoldHead]),
            Stage::S2 => GroupSet::of(&[Group::VisionSpecific, Group::UnfoldHead, Group::Attention]),
            Stage::Sft => GroupSet::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    ConstantWarmup,
    Cosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::ConstantWarmup => "constant_warmup",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn from_name(s: &str) -> Option<Schedule> {
        [Schedule::ConstantWarmup, Schedule::Cosine].into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: GroupSet,
    pub steps: u64,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup: u64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub clip: f64,
}

impl StagePlan {
    pub fn new(stage: Stage, steps: u64, peak_lr: f64, schedule: Schedule, warmup: u64) -> Self {
        Self {
            stage,
            trainable: stage.trainable(),
            steps,
            peak_lr,
            schedule,
            warmup,
            weight_decay: 0.0,
            lambda: DEFAULT_LAMBDA,
            clip: CLIP_NORM,
        }
    }

    /// Learning rate for 0-based `step`: linear warmup from 0, then either
    /// constant or cosine decay reaching 0 at the final step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak_lr * step as f64 / self.warmup as f64;
        }
        match self.schedule {
            Schedule::ConstantWarmup => self.peak_lr,
            Schedule::Cosine => {
                let last = self.steps.saturating_sub(1);
                if last <= self.warmup {
                    return self.peak_lr;
                }
                let t = (step.min(last) - self.warmup) as f64 / (last - self.warmup) as f64;
                0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// AdamW moments for the tensors trainable in the current stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub trainable: GroupSet,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, trainable: GroupSet) -> Self {
        let mut m = BTreeMap::new();
        for (n, g, t) in params.tensors() {
            if trainable.contains(g) {
                m.insert(n, Tensor::zeros(t.shape()));
            }
        }
        Self {
            step: 0,
            trainable,
            v: m.clone(),
            m,
        }
    }
}

/// Global L2 norm over the trainable tensors of `grads`.
pub fn grad_norm(grads: &ModelParams, trainable: GroupSet) -> f64 {
    grads
        .tensors()
        .iter()
        .filter(|(_, g, _)| trainable.contains(*g))
        .map(|(_, _, t)| t.sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Clipped AdamW update with decoupled weight decay on matrices.
pub fn apply_update(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptimizerState, lr: f64, weight_decay: f64, clip: f64) {
    let norm = grad_norm(grads, opt.trainable);
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    opt.step += 1;
    let bc1 = 1.0 - BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - BETA2.powi(opt.step as i32);
    for ((name, group, p), (_, _, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        if !opt.trainable.contains(group) {
            continue;
        }
        let decay = if p.shape().len() >= 2 { weight_decay } else { 0.0 };
        let m = opt.m.get_mut(&name).expect("moment for trainable tensor");
        let v = opt.v.get_mut(&name).expect("moment for trainable tensor");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = gi * scale;
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            *pi -= lr * (upd + decay * *pi);
        }
    }
}

/// One optimisation step at stage-local `step`.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[TaskSample],
    plan: &StagePlan,
    opt: &mut OptimizerState,
    step: u64,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(params, batch, plan.lambda, plan.trainable)?;
    apply_update(params, &grads, opt, plan.lr_at(step), plan.weight_decay, plan.clip);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: Stage,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,stage,text_loss,image_loss,total,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e}",
            r.step,
            r.stage.name(),
            r.loss.text_loss,
            r.loss.image_loss,
            r.loss.total,
            r.lr
        )
        .unwrap();
    }
    s
}

/// Stage-local training state: parameters, optimizer, next step.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub plan: StagePlan,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
}

impl Trainer {
    /// Fresh stage: optimizer state is reset.
    pub fn new(params: ModelParams, plan: StagePlan) -> Self {
        let opt = OptimizerState::new(&params, plan.trainable);
        Self {
            params,
            opt,
            plan,
            step: 0,
            metrics: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.steps
    }

    pub fn step_once(&mut self, source: &dyn BatchSource) -> Result<LossBreakdown> {
        let batch = source.batch(self.step)?;
        let lr = self.plan.lr_at(self.step);
        let loss = train_step(&mut self.params, &batch, &self.plan, &mut self.opt, self.step)?;
        self.metrics.push(MetricRow {
            step: self.step,
            stage: self.plan.stage,
            loss,
            lr,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs up to (not including) stage step `end`.
    pub fn run_until(&mut self, source: &dyn BatchSource, end: u64) -> Result<()> {
        while self.step < end.min(self.plan.steps) {
            self.step_once(source)?;
        }
        Ok(())
    }
}

/// Runs the remaining steps of a stage, calling `sink` every `every` steps
/// and once at the end.
pub fn run_stage(
    trainer: &mut Trainer,
    source: &dyn BatchSource,
    every: u64,
    sink: &mut dyn FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    while !trainer.is_done() {
        trainer.step_once(source)?;
        if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
            sink(trainer)?;
        }
    }
    sink(trainer)
}

/// Perplexity of `<s> sentence </s>` sequences through the text-only path,
/// scoring every token after `<s>`.
pub fn text_perplexity(params: &ModelParams, sentences: &[String]) -> Result<f64> {
    let vocab = Vocab::standard();
    let v = params.config.vocab;
    let (mut nll, mut count) = (0.0, 0usize);
    for s in sentences {
        let mut ids = vec![vocab.special(Special::Bos)];
        ids.extend(vocab.tokenize(s)?);
        ids.push(vocab.special(Special::Eos));
        let logits = text_only_forward(params, &ids)?;
        let n = ids.len() - 1;
        nll += cross_entropy(&logits[..n * v], &ids[1..], v).0;
        count += n;
    }
    if count == 0 {
        return Err(Error::data("empty perplexity corpus"));
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{text_sample, ShapesMix};
    use crate::folding::FoldSpec;
    use crate::params::ModelConfig;
    use crate::quantizer::Codebook;
    use crate::sequencer::Sequencer;

    fn cfg() -> ModelConfig {
        ModelConfig::small(16, 2)
    }

    fn mix(seed: u64) -> ShapesMix {
        ShapesMix {
            seq: Sequencer::new(Vocab::standard(), FoldSpec::new(2, 4)),
            codebook: Codebook::palette(8),
            seed,
            n_understand: 2,
            n_generate: 2,
            cfg_drop: 0.1,
            image_size: 64,
        }
    }

    #[test]
    fn cross_entropy_closed_form() {
        // three positions, hand-computed log-softmax values
        let logits = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 5.0, -5.0, 0.0];
        let targets = [2, 1, 0];
        let (nll, _) = cross_entropy(&logits, &targets, 3);
        let lse = |a: f64, b: f64, c: f64| (a.exp() + b.exp() + c.exp()).ln();
        let want = (lse(1.0, 2.0, 3.0) - 3.0) + (3f64.ln()) + (lse(5.0, -5.0, 0.0) - 5.0);
        assert!((nll - want).abs() < 1e-10);
    }

    #[test]
    fn unified_loss_matches_brute_force() {
        let p = ModelParams::init(cfg(), 1).unwrap();
        let (v, k) = (p.config.vocab, p.config.k);
        for (i, s) in mix(2).batch(0).unwrap().iter().enumerate() {
            let e = embed_sample(&p, s, Routing::ByModality).unwrap();
            let t = forward(&p, &e.x, &e.route, false).unwrap();
            let tl = t.text_logits(&p);
            let d = p.config.d;
            let mut hl = Vec::new();
            let mut brute_img = (0.0, 0);
            let mut brute_txt = (0.0, 0);
            for (j, pos) in s.positions.iter().enumerate() {
                if !s.loss[j] {
                    continue;
                }
                match *pos {
                    Position::Visual { block, patch } => {
                        let ids = s.patch_ids(block, patch);
                        let (l, _) = p.head.forward(&t.final_hidden[(j - 1) * d..j * d], &ids, p.config.n_heads).unwrap();
                        for (r, &id) in l.chunks(k).zip(&ids) {
                            let z: f64 = r.iter().map(|x| x.exp()).sum();
                            brute_img.0 -= (r[id as usize].exp() / z).ln();
                            brute_img.1 += 1;
                        }
                        hl.extend(l);
                    }
                    Position::Text(id) => {
                        let r = &tl[(j - 1) * v..j * v];
                        let z: f64 = r.iter().map(|x| x.exp()).sum();
                        brute_txt.0 -= (r[id as usize].exp() / z).ln();
                        brute_txt.1 += 1;
                    }
                }
            }
            let lb = unified_loss(s, &tl, &hl, v, k, 2.0).unwrap();
            let want_t = if brute_txt.1 > 0 { brute_txt.0 / brute_txt.1 as f64 } else { 0.0 };
            let want_i = if brute_img.1 > 0 { brute_img.0 / brute_img.1 as f64 } else { 0.0 };
            assert!((lb.text_loss - want_t).abs() < 1e-8, "sample {i}");
            assert!((lb.image_loss - want_i).abs() < 1e-8);
            assert!((lb.total - (want_t + 2.0 * want_i)).abs() < 1e-8);
            assert_eq!((lb.text_count, lb.image_count), target_counts(s));
            // batch path agrees
            let bl = batch_loss(&p, std::slice::from_ref(s), 2.0).unwrap();
            assert!((bl.total - lb.total).abs() < 1e-10);
        }
    }

    #[test]
    fn text_only_sample_total_is_text_loss_and_lambda_monotone() {
        let p = ModelParams::init(cfg(), 3).unwrap();
        let s = text_sample(&Vocab::standard(), "a red circle at top left", FoldSpec::new(2, 4)).unwrap();
        let l = batch_loss(&p, &[s], 2.0).unwrap();
        assert_eq!(l.total, l.text_loss);
        assert_eq!(l.image_count, 0);
        let b = mix(4).batch(0).unwrap();
        let (a, c) = (batch_loss(&p, &b, 1.0).unwrap(), batch_loss(&p, &b, 3.0).unwrap());
        assert!(a.image_loss > 0.0 && c.total > a.total);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let p = ModelParams::init(cfg(), 3).unwrap();
        let mut s = text_sample(&Vocab::standard(), "a", FoldSpec::new(2, 4)).unwrap();
        s.loss.iter_mut().for_each(|l| *l = false);
        assert!(batch_loss(&p, &[s.clone()], 2.0).is_err());
        assert!(batch_gradients(&p, &[s], 2.0, GroupSet::ALL).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_sample() {
        let mut p = ModelParams::init(cfg(), 3).unwrap();
        p.classifier.data_mut()[0] = f64::NAN;
        let s = text_sample(&Vocab::standard(), "a red circle at top left", FoldSpec::new(2, 4)).unwrap();
        let err = batch_gradients(&p, &[s.clone(), s], 2.0, GroupSet::ALL).unwrap_err();
        assert!(matches!(err, Error::NonFinite { sample: 0, .. }), "{err}");
    }

    #[test]
    fn schedules() {
        let w = StagePlan::new(Stage::S1, 100, 1e-3, Schedule::ConstantWarmup, 10);
        assert_eq!(w.lr_at(0), 0.0);
        assert_eq!(w.lr_at(10), 1e-3);
        assert_eq!(w.lr_at(99), 1e-3);
        let c = StagePlan::new(Stage::S2, 100, 1e-3, Schedule::Cosine, 10);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(10), 1e-3);
        assert!(c.lr_at(99) <= 1e-5);
        assert!(c.lr_at(50) < c.lr_at(30));
    }

    #[test]
    fn frozen_groups_are_untouched_and_have_no_state() {
        let p = ModelParams::init(cfg(), 5).unwrap();
        let plan = StagePlan::new(Stage::S1, 3, 1e-2, Schedule::ConstantWarmup, 0);
        let mut t = Trainer::new(p.clone(), plan);
        let src = mix(6);
        t.run_until(&src, 3).unwrap();
        for ((n, g, a), (_, _, b)) in t.params.tensors().into_iter().zip(p.tensors()) {
            if plan.trainable.contains(g) {
                assert!(t.opt.m.contains_key(&n));
            } else {
                assert_eq!(a, b, "{n} changed");
                assert!(!t.opt.m.contains_key(&n));
            }
        }
        assert_ne!(t.params.vis, p.vis);
        // frozen groups never accumulate gradient
        let (_, g) = batch_gradients(&p, &src.batch(0).unwrap(), 2.0, plan.trainable).unwrap();
        for (n, grp, x) in g.tensors() {
            if !plan.trainable.contains(grp) {
                assert!(x.data().iter().all(|&v| v == 0.0), "{n}");
            }
        }
    }

    #[test]
    fn visual_only_targets_give_text_ffn_no_gradient() {
        let p = ModelParams::init(cfg(), 7).unwrap();
        let g = mix(8).batch(0).unwrap().into_iter().find(|s| s.task == crate::sequencer::Task::Generate).unwrap();
        // a sample whose every position is visual
        let n = g.visual_count();
        let s = TaskSample {
            positions: g.positions.iter().copied().filter(|p| matches!(p, Position::Visual { .. })).collect(),
            modality: vec![crate::sequencer::Modality::Visual; n],
            loss: (0..n).map(|i| i > 0).collect(),
            ..g
        };
        let (_, grads) = batch_gradients(&p, &[s], 2.0, GroupSet::ALL).unwrap();
        for (n, grp, t) in grads.tensors() {
            if grp == Group::TextCore && n.contains("ffn_t") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
        }
        assert!(grads.layers[0].ffn_v.as_ref().unwrap().up.w.sum_sq() > 0.0);
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let p = ModelParams::init(cfg(), 9).unwrap();
        let b = mix(10).batch(0).unwrap();
        let (_, g1) = batch_gradients(&p, &b, 2.0, GroupSet::ALL).unwrap();
        // run the threaded path explicitly
        let (tc, ic) = b.iter().map(target_counts).fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
        let parts: Vec<ModelParams> = std::thread::scope(|sc| {
            let hs: Vec<_> = b
                .iter()
                .map(|s| {
                    let p = &p;
                    sc.spawn(move || {
                        let mut g = p.zeros_like();
                        sample_pass(p, s, (1.0 / tc as f64, 2.0 / ic as f64), Some(&mut g), GroupSet::ALL).unwrap();
                        g
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut g2 = p.zeros_like();
        for g in &parts {
            g2.add_assign(g);
        }
        assert_eq!(g1, g2);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = ModelParams::init(cfg(), 11).unwrap();
        let plan = StagePlan::new(Stage::Sft, 5, 1e-3, Schedule::Cosine, 1);
        let src = mix(12);
        let mut a = Trainer::new(p.clone(), plan);
        let mut b = Trainer::new(p, plan);
        a.run_until(&src, 5).unwrap();
        b.run_until(&src, 5).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        assert_eq!(metrics_csv(&a.metrics).lines().next().unwrap(), METRICS_HEADER);
    }
}
