//! Stage chaining: text pretraining, then S1, S2 and instruction tuning,
//! each started from the previous stage's final checkpoint.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{sft_pool, BatchSource, PretrainText, SamplePool, ShapesMix};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::SplitMix64;
use crate::sequencer::Sequencer;
use crate::trainer::{run_stage, Stage, Trainer};
use crate::vocab::Vocab;

/// Stage whose final checkpoint a stage starts from.
pub fn predecessor(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Pretrain => None,
        Stage::S1 => Some(Stage::Pretrain),
        Stage::S2 => Some(Stage::S1),
        Stage::Sft => Some(Stage::S2),
    }
}

pub fn shapes_mix(cfg: &RunConfig) -> ShapesMix {
    ShapesMix {
        seq: Sequencer::new(Vocab::standard(), cfg.model.fold),
        codebook: cfg.codebook(),
        seed: cfg.seed,
        n_understand: cfg.data.n_understand,
        n_generate: cfg.data.n_generate,
        cfg_drop: cfg.data.cfg_drop,
        image_size: cfg.data.image_size,
    }
}

/// Batch stream of `stage`.
pub fn source(cfg: &RunConfig, stage: Stage) -> Result<Box<dyn BatchSource + Sync>> {
    Ok(match stage {
        Stage::Pretrain => Box::new(PretrainText::new(
            Vocab::standard(),
            cfg.model.fold,
            cfg.seed,
            cfg.data.pretrain_batch,
        )),
        Stage::S1 | Stage::S2 => Box::new(shapes_mix(cfg)),
        Stage::Sft => {
            let mix = shapes_mix(cfg);
            Box::new(SamplePool {
                samples: sft_pool(&mix, cfg.data.sft_pool)?,
                batch: cfg.data.sft_batch,
                seed: cfg.seed,
            })
        }
    })
}

/// Fresh trainer for `stage`. Pretraining starts from a random model; S1
/// re-initialises everything outside the text core and attention; later
/// stages continue the previous parameters with a reset optimizer.
pub fn start_stage(cfg: &RunConfig, stage: Stage, prev: Option<&Checkpoint>) -> Result<Trainer> {
    cfg.validate()?;
    let params = match (predecessor(stage), prev) {
        (None, _) => ModelParams::init(cfg.model, cfg.seed)?,
        (Some(want), Some(prev)) => {
            prev.check_config(&cfg.model)?;
            let done = prev.state.stage == Some(want) && prev.state.step >= cfg.stage(want).steps;
            if !done {
                return Err(Error::config(format!(
                    "{} needs a finished {} checkpoint, got stage {} at step {}",
                    stage.name(),
                    want.name(),
                    prev.state.stage.map_or("init", Stage::name),
                    prev.state.step
                )));
            }
            if stage == Stage::S1 {
                let seed = SplitMix64::derive(cfg.seed, &[1]).next_u64();
                ModelParams::from_pretrained(&prev.params, cfg.model, seed)?
            } else {
                prev.params.clone()
            }
        }
        (Some(want), None) => {
            return Err(Error::config(format!("{} needs a {} checkpoint", stage.name(), want.name())));
        }
    };
    Ok(Trainer::new(params, cfg.plan(stage)))
}

/// Runs the rest of a stage, handing a checkpoint to `sink` every
/// `cfg.checkpoint_every` steps and returning the final one.
pub fn finish_stage(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    prior: &[String],
    sink: &mut dyn FnMut(&Trainer, Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let src = source(cfg, trainer.plan.stage)?;
    let cb = cfg.codebook();
    let mut last = None;
    run_stage(trainer, src.as_ref(), cfg.checkpoint_every, &mut |t| {
        let c = Checkpoint::from_trainer(t, Some(cb.clone()), cfg.seed, prior);
        if t.is_done() {
            last = Some(c.clone());
        }
        sink(t, c)
    })?;
    last.ok_or_else(|| Error::config("stage ended without a final checkpoint"))
}

/// All four stages in memory; returns each stage's final checkpoint.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<Checkpoint>> {
    let mut out: Vec<Checkpoint> = Vec::new();
    for stage in [Stage::Pretrain, Stage::S1, Stage::S2, Stage::Sft] {
        let prev = out.last();
        let prior = prev.map(|c| c.state.provenance.clone()).unwrap_or_default();
        let mut t = start_stage(cfg, stage, prev)?;
        let c = finish_stage(cfg, &mut t, &prior, &mut |_, _| Ok(()))?;
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ModelConfig};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig::small(16, 2);
        for s in [&mut c.pretrain, &mut c.s1, &mut c.s2, &mut c.sft] {
            s.steps = 2;
            s.warmup = 1;
        }
        c.data.n_understand = 1;
        c.data.n_generate = 1;
        c.data.pretrain_batch = 2;
        c.data.sft_pool = 8;
        c.data.sft_batch = 2;
        c.checkpoint_every = 1;
        c
    }

    #[test]
    fn chain_runs_and_records_provenance() {
        let cs = run_all(&tiny()).unwrap();
        assert_eq!(cs[3].state.provenance, ["pretrain:2", "s1:2", "s2:2", "sft:2"]);
        for (n, g, t) in cs[1].params.tensors() {
            if matches!(g, Group::TextCore | Group::Attention) {
                assert_eq!(Some(t), cs[0].params.get(&n), "{n}");
            }
        }
    }

    #[test]
    fn order_is_enforced() {
        let cfg = tiny();
        assert!(start_stage(&cfg, Stage::S2, None).is_err());
        let pre = run_all(&cfg).unwrap().remove(0);
        assert!(start_stage(&cfg, Stage::S2, Some(&pre)).is_err());
        assert!(start_stage(&cfg, Stage::S1, Some(&pre)).is_ok());
        let mut other = cfg.clone();
        other.model.fold.n = 2;
        assert!(start_stage(&other, Stage::S1, Some(&pre)).is_err());
    }

    #[test]
    fn periodic_sink_sees_every_step() {
        let cfg = tiny();
        let mut t = start_stage(&cfg, Stage::Pretrain, None).unwrap();
        let mut steps = vec![];
        finish_stage(&cfg, &mut t, &[], &mut |t, c| {
            steps.push((t.step, c.state.provenance.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, [(1, 0), (2, 1)]);
    }
}
