//! Run configuration as flat `section.key = value` text.
//!
//! Printing emits every key in a fixed order; parsing starts from the
//! defaults, rejects unknown or repeated keys, and ignores blank lines and
//! `#` comments.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::params::ModelConfig;
use crate::quantizer::Codebook;
use crate::sampler::{SamplingMode, SamplingRule, DEFAULT_CFG_SCALE};
use crate::trainer::{Schedule, Stage, StagePlan, DEFAULT_CFG_DROP, DEFAULT_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub steps: u64,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup: u64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    /// Understanding samples per batch.
    pub n_understand: usize,
    /// Generation samples per batch.
    pub n_generate: usize,
    pub pretrain_batch: usize,
    /// Scenes in the fixed instruction-tuning pool.
    pub sft_pool: usize,
    pub sft_batch: usize,
    pub cfg_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    /// Codebook tile size in pixels.
    pub patch: usize,
    pub data: DataConfig,
    pub lambda: f64,
    pub pretrain: StageConfig,
    pub s1: StageConfig,
    pub s2: StageConfig,
    pub sft: StageConfig,
    pub cfg_scale: f64,
    pub sampling: SamplingRule,
    pub eval_captions: usize,
    pub eval_generations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |steps, lr, schedule, warmup| StageConfig {
            steps,
            lr,
            schedule,
            warmup,
            weight_decay: 0.0,
        };
        Self {
            seed: 1,
            out_dir: "runs/default".into(),
            checkpoint_every: 500,
            model: ModelConfig::small(64, 2),
            patch: 8,
            data: DataConfig {
                image_size: 64,
                n_understand: 4,
                n_generate: 4,
                pretrain_batch: 16,
                sft_pool: 16000,
                sft_batch: 8,
                cfg_drop: DEFAULT_CFG_DROP,
            },
            lambda: DEFAULT_LAMBDA,
            pretrain: stage(300, 3e-3, Schedule::Cosine, 20),
            s1: stage(2000, 1e-3, Schedule::ConstantWarmup, 50),
            s2: stage(1000, 1e-3, Schedule::Cosine, 50),
            sft: stage(6000, 1e-3, Schedule::Cosine, 50),
            cfg_scale: DEFAULT_CFG_SCALE,
            sampling: SamplingRule::top_k(8, 1.0, 0),
            eval_captions: 200,
            eval_generations: 50,
        }
    }
}

fn mode_name(m: SamplingMode) -> &'static str {
    match m {
        SamplingMode::Greedy => "greedy",
        SamplingMode::Temperature => "temperature",
        SamplingMode::TopK => "top_k",
    }
}

fn parse_mode(s: &str) -> Option<SamplingMode> {
    match s {
        "greedy" => Some(SamplingMode::Greedy),
        "temperature" => Some(SamplingMode::Temperature),
        "top_k" => Some(SamplingMode::TopK),
        _ => None,
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

const STAGES: [&str; 4] = ["pretrain", "s1", "s2", "sft"];

impl RunConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::S1 => &self.s1,
            Stage::S2 => &self.s2,
            Stage::Sft => &self.sft,
        }
    }

    fn stage_mut(&mut self, name: &str) -> &mut StageConfig {
        match name {
            "pretrain" => &mut self.pretrain,
            "s1" => &mut self.s1,
            "s2" => &mut self.s2,
            _ => &mut self.sft,
        }
    }

    pub fn plan(&self, stage: Stage) -> StagePlan {
        let s = self.stage(stage);
        let mut p = StagePlan::new(stage, s.steps, s.lr, s.schedule, s.warmup);
        p.weight_decay = s.weight_decay;
        p.lambda = self.lambda;
        p
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::palette(self.patch)
    }

    /// `(key, value)` pairs in print order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let d = &self.data;
        let mut e: Vec<(String, String)> = vec![
            ("run.seed".into(), self.seed.to_string()),
            ("run.out_dir".into(), self.out_dir.clone()),
            ("run.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("model.d".into(), m.d.to_string()),
            ("model.n_layers".into(), m.n_layers.to_string()),
            ("model.n_heads".into(), m.n_heads.to_string()),
            ("model.ffn_hidden".into(), m.ffn_hidden.to_string()),
            ("model.e".into(), m.e.to_string()),
            ("model.k".into(), m.k.to_string()),
            ("model.head_layers".into(), m.head_layers.to_string()),
            ("model.max_seq".into(), m.max_seq.to_string()),
            ("model.max_grid".into(), m.max_grid.to_string()),
            ("model.visual_experts".into(), m.visual_experts.to_string()),
            ("fold.m".into(), m.fold.m.to_string()),
            ("fold.n".into(), m.fold.n.to_string()),
            ("codebook.patch".into(), self.patch.to_string()),
            ("data.image_size".into(), d.image_size.to_string()),
            ("data.n_understand".into(), d.n_understand.to_string()),
            ("data.n_generate".into(), d.n_generate.to_string()),
            ("data.pretrain_batch".into(), d.pretrain_batch.to_string()),
            ("data.sft_pool".into(), d.sft_pool.to_string()),
            ("data.sft_batch".into(), d.sft_batch.to_string()),
            ("data.cfg_drop".into(), d.cfg_drop.to_string()),
            ("loss.lambda".into(), self.lambda.to_string()),
        ];
        for name in STAGES {
            let s = match name {
                "pretrain" => &self.pretrain,
                "s1" => &self.s1,
                "s2" => &self.s2,
                _ => &self.sft,
            };
            e.push((format!("{name}.steps"), s.steps.to_string()));
            e.push((format!("{name}.lr"), s.lr.to_string()));
            e.push((format!("{name}.schedule"), s.schedule.name().into()));
            e.push((format!("{name}.warmup"), s.warmup.to_string()));
            e.push((format!("{name}.weight_decay"), s.weight_decay.to_string()));
        }
        e.extend([
            ("sample.cfg_scale".into(), self.cfg_scale.to_string()),
            ("sample.mode".into(), mode_name(self.sampling.mode).into()),
            ("sample.temperature".into(), self.sampling.temperature.to_string()),
            ("sample.top_k".into(), self.sampling.k.to_string()),
            ("sample.seed".into(), self.sampling.seed.to_string()),
            ("eval.n_captions".into(), self.eval_captions.to_string()),
            ("eval.n_generations".into(), self.eval_generations.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "run.seed" => self.seed = num(key, v)?,
            "run.out_dir" => self.out_dir = v.to_string(),
            "run.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "model.d" => m.d = num(key, v)?,
            "model.n_layers" => m.n_layers = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.ffn_hidden" => m.ffn_hidden = num(key, v)?,
            "model.e" => m.e = num(key, v)?,
            "model.k" => m.k = num(key, v)?,
            "model.head_layers" => m.head_layers = num(key, v)?,
            "model.max_seq" => m.max_seq = num(key, v)?,
            "model.max_grid" => m.max_grid = num(key, v)?,
            "model.visual_experts" => m.visual_experts = num(key, v)?,
            "fold.m" => m.fold.m = num(key, v)?,
            "fold.n" => m.fold.n = num(key, v)?,
            "codebook.patch" => self.patch = num(key, v)?,
            "data.image_size" => self.data.image_size = num(key, v)?,
            "data.n_understand" => self.data.n_understand = num(key, v)?,
            "data.n_generate" => self.data.n_generate = num(key, v)?,
            "data.pretrain_batch" => self.data.pretrain_batch = num(key, v)?,
            "data.sft_pool" => self.data.sft_pool = num(key, v)?,
            "data.sft_batch" => self.data.sft_batch = num(key, v)?,
            "data.cfg_drop" => self.data.cfg_drop = num(key, v)?,
            "loss.lambda" => self.lambda = num(key, v)?,
            "sample.cfg_scale" => self.cfg_scale = num(key, v)?,
            "sample.mode" => {
                self.sampling.mode = parse_mode(v).ok_or_else(|| Error::config(format!("{key}: unknown mode {v:?}")))?
            }
            "sample.temperature" => self.sampling.temperature = num(key, v)?,
            "sample.top_k" => self.sampling.k = num(key, v)?,
            "sample.seed" => self.sampling.seed = num(key, v)?,
            "eval.n_captions" => self.eval_captions = num(key, v)?,
            "eval.n_generations" => self.eval_generations = num(key, v)?,
            _ => {
                let (section, field) = key.split_once('.').unwrap_or((key, ""));
                if !STAGES.contains(&section) {
                    return Err(Error::config(format!("unknown key {key}")));
                }
                let s = self.stage_mut(section);
                match field {
                    "steps" => s.steps = num(key, v)?,
                    "lr" => s.lr = num(key, v)?,
                    "schedule" => {
                        s.schedule =
                            Schedule::from_name(v).ok_or_else(|| Error::config(format!("{key}: unknown schedule {v:?}")))?
                    }
                    "warmup" => s.warmup = num(key, v)?,
                    "weight_decay" => s.weight_decay = num(key, v)?,
                    _ => return Err(Error::config(format!("unknown key {key}"))),
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {k}", i + 1)));
            }
            c.set(k, v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let cb = self.codebook();
        if cb.k() != self.model.k {
            return Err(Error::config(format!(
                "model.k = {} but a palette codebook with patch {} has {} entries",
                self.model.k,
                self.patch,
                cb.k()
            )));
        }
        let d = &self.data;
        if d.image_size == 0 || d.image_size % self.patch != 0 {
            return Err(Error::config("data.image_size must be a positive multiple of codebook.patch"));
        }
        let side = d.image_size / self.patch;
        if side > self.model.max_grid {
            return Err(Error::config("data.image_size exceeds model.max_grid tokens per side"));
        }
        self.model
            .fold
            .patches(side, side)
            .map_err(|e| Error::config(format!("fold does not tile the image grid: {e}")))?;
        if !(0.0..=1.0).contains(&d.cfg_drop) {
            return Err(Error::config("data.cfg_drop must be in [0, 1]"));
        }
        if d.n_understand + d.n_generate == 0 || d.pretrain_batch == 0 || d.sft_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda must be finite and non-negative"));
        }
        for name in STAGES {
            let s = match name {
                "pretrain" => &self.pretrain,
                "s1" => &self.s1,
                "s2" => &self.s2,
                _ => &self.sft,
            };
            if !(s.lr.is_finite() && s.lr >= 0.0) || !(s.weight_decay.is_finite() && s.weight_decay >= 0.0) {
                return Err(Error::config(format!("{name}: learning rate and weight decay must be finite and non-negative")));
            }
        }
        let r = &self.sampling;
        if !(r.temperature > 0.0 && r.temperature.is_finite()) || r.k == 0 {
            return Err(Error::config("sample.temperature must be positive and sample.top_k at least 1"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("sample.cfg_scale must be finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default_and_edited() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let mut e = c.clone();
        e.lambda = 0.1 + 0.2;
        e.s2.lr = 3.3e-4;
        e.s1.schedule = Schedule::Cosine;
        e.sampling = SamplingRule::greedy();
        e.out_dir = "some dir/with spaces".into();
        assert_eq!(RunConfig::parse(&e.to_text()).unwrap(), e);
    }

    #[test]
    fn partial_files_start_from_defaults() {
        let c = RunConfig::parse("# comment\n\nloss.lambda = 1.5\ns1.steps=10\n").unwrap();
        assert_eq!(c.lambda, 1.5);
        assert_eq!(c.s1.steps, 10);
        assert_eq!(c.s2, RunConfig::default().s2);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "model.colour = 3",
            "s3.steps = 1",
            "s1.speed = 1",
            "loss.lambda",
            "loss.lambda = x",
            "loss.lambda = 1\nloss.lambda = 2",
            "model.k = 9",
            "fold.n = 3",
            "sample.mode = beam",
            "data.cfg_drop = 1.5",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn plans_follow_stage_groups() {
        let c = RunConfig::default();
        let p = c.plan(Stage::S1);
        assert_eq!(p.trainable, Stage::S1.trainable());
        assert_eq!((p.steps, p.lambda), (c.s1.steps, c.lambda));
        assert_eq!(c.plan(Stage::Sft).schedule, Schedule::Cosine);
    }
}
