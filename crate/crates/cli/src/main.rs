use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foldgen_core::analysis::{attention_dump, attention_locality, feature_similarity, task_pair, LOCALITY_CSV_HEADER};
use foldgen_core::checkpoint::{inspect, Checkpoint};
use foldgen_core::config::RunConfig;
use foldgen_core::image::Image;
use foldgen_core::pipeline::{finish_stage, predecessor, start_stage};
use foldgen_core::quantizer::Codebook;
use foldgen_core::sampler::{eval_suite, generate_caption, generate_image, EvalOptions, Guidance, SamplingRule, EVAL_CSV_HEADER};
use foldgen_core::sequencer::Task;
use foldgen_core::shapes::{gen_scene, manifest_line, render};
use foldgen_core::trainer::{metrics_csv, Stage, Trainer, METRICS_HEADER};
use foldgen_core::Error;

#[derive(Parser)]
#[command(name = "foldgen", version, about = "Folded-token multimodal toy model: data, training, inference, analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`section.key = value` lines)
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`
    #[arg(long)]
    out_dir: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    S1,
    S2,
    Sft,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render scenes for a seed range and write a manifest
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the text-only language model that later stages start from
    PretrainText(ConfigArgs),
    /// Run one multimodal training stage
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(value_enum)]
        stage: TrainStage,
        /// Continue from the stage's periodic checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Caption a PPM image
    Caption { checkpoint: PathBuf, image: PathBuf },
    /// Generate an image from a caption
    Generate {
        checkpoint: PathBuf,
        prompt: String,
        #[arg(long, default_value_t = 7.5)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the conditional context
        #[arg(long, conflicts_with = "unconditional")]
        conditional: bool,
        /// Use only the unconditional context
        #[arg(long)]
        unconditional: bool,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Per-layer feature similarity or attention locality for one image
    Analyze {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long, required_unless_present = "locality", conflicts_with = "locality")]
        similarity: bool,
        #[arg(long)]
        locality: bool,
        /// Also write raw attention of every layer for both tasks here
        #[arg(long, requires = "locality")]
        dump_attention: Option<PathBuf>,
    },
    /// Caption and generation metrics on held-out scenes, as CSV
    Eval {
        checkpoint: PathBuf,
        /// Held-out scenes to caption
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Prompts to generate from
        #[arg(long, default_value_t = 50)]
        n_generations: usize,
        #[arg(long, default_value_t = 7.5)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print a checkpoint's header, tensors, groups and CRC status
    InspectCheckpoint { file: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 3,
        Error::Io(_) | Error::Data(_) | Error::Shape(_) => 4,
        Error::NonFinite { .. } => 5,
    }
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut c = match &a.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(o) = &a.out_dir {
        c.out_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn stage_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    Path::new(&cfg.out_dir).join(format!("{}.sgvl", stage.name()))
}

fn partial_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    Path::new(&cfg.out_dir).join(format!("{}.partial.sgvl", stage.name()))
}

fn metrics_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    Path::new(&cfg.out_dir).join(format!("metrics_{}.csv", stage.name()))
}

/// Metric lines already on disk for steps before `step`.
fn prior_metrics(path: &Path, step: u64) -> Result<Vec<String>, Error> {
    if step == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
        .map(str::to_string)
        .collect())
}

fn train(cfg: &RunConfig, stage: Stage, resume: bool) -> Result<(), Error> {
    fs::create_dir_all(&cfg.out_dir)?;
    let prev = match predecessor(stage) {
        Some(p) => Some(Checkpoint::load(&stage_path(cfg, p))?),
        None => None,
    };
    let prior = prev.as_ref().map(|c| c.state.provenance.clone()).unwrap_or_default();
    let partial = partial_path(cfg, stage);
    let mut trainer: Trainer = if resume && partial.exists() {
        let c = Checkpoint::load(&partial)?;
        c.check_config(&cfg.model)?;
        c.resume(cfg.plan(stage))?
    } else {
        start_stage(cfg, stage, prev.as_ref())?
    };
    let mpath = metrics_path(cfg, stage);
    let earlier = prior_metrics(&mpath, trainer.step)?;
    let write_metrics = |t: &Trainer| -> Result<(), Error> {
        let mut s = format!("{METRICS_HEADER}\n");
        for l in &earlier {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(metrics_csv(&t.metrics).split_once('\n').map_or("", |x| x.1));
        fs::write(&mpath, s)?;
        Ok(())
    };
    let done = finish_stage(cfg, &mut trainer, &prior, &mut |t, c| {
        write_metrics(t)?;
        if t.is_done() {
            c.save(&stage_path(cfg, stage))
        } else {
            c.save(&partial)
        }
    })?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    let last = trainer.metrics.last();
    println!(
        "{} done: {} steps, provenance {}, final total loss {}",
        stage.name(),
        done.state.step,
        done.state.provenance.join(","),
        last.map_or("n/a".into(), |m| format!("{:.6}", m.loss.total))
    );
    Ok(())
}

fn load_with_codebook(path: &Path) -> Result<(Checkpoint, Codebook), Error> {
    let c = Checkpoint::load(path)?;
    let cb = c
        .codebook
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no codebook".into()))?;
    Ok((c, cb))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData { seed, count, size, out } => {
            fs::create_dir_all(&out)?;
            let mut manifest = String::new();
            for s in seed..seed + count {
                render(&gen_scene(s), size)?.save(out.join(format!("scene_{s:06}.ppm")))?;
                manifest.push_str(&manifest_line(s));
                manifest.push('\n');
            }
            fs::write(out.join("manifest.tsv"), manifest)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Cmd::PretrainText(a) => train(&load_config(&a)?, Stage::Pretrain, false)?,
        Cmd::Train { cfg, stage, resume } => {
            let stage = match stage {
                TrainStage::S1 => Stage::S1,
                TrainStage::S2 => Stage::S2,
                TrainStage::Sft => Stage::Sft,
            };
            train(&load_config(&cfg)?, stage, resume)?
        }
        Cmd::Caption { checkpoint, image } => {
            let (c, cb) = load_with_codebook(&checkpoint)?;
            let cap = generate_caption(&c.params, &cb, &Image::load(image)?, &SamplingRule::greedy())?;
            println!("{}", cap.text);
            if cap.truncated {
                eprintln!("warning: caption truncated at the length cap");
            }
        }
        Cmd::Generate {
            checkpoint,
            prompt,
            cfg_scale,
            seed,
            conditional,
            unconditional,
            size,
            out,
        } => {
            let (c, cb) = load_with_codebook(&checkpoint)?;
            if size % cb.p() != 0 {
                return Err(Error::Config(format!("--size must be a multiple of the codebook patch {}", cb.p())));
            }
            let g = if conditional {
                Guidance::ConditionalOnly
            } else if unconditional {
                Guidance::UnconditionalOnly
            } else {
                Guidance::Cfg(cfg_scale)
            };
            let side = size / cb.p();
            let rule = SamplingRule::top_k(c.params.config.k, 1.0, seed);
            let img = generate_image(&c.params, &cb, &prompt, g, &rule, (side, side))?;
            img.image.save(&out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Analyze {
            checkpoint,
            image,
            similarity,
            locality: _,
            dump_attention,
        } => {
            let (c, cb) = load_with_codebook(&checkpoint)?;
            let img = Image::load(image)?;
            if similarity {
                print!("{}", feature_similarity(&c.params, &cb, &img)?.to_csv());
            } else {
                println!("{LOCALITY_CSV_HEADER}");
                for task in [Task::Understand, Task::Generate] {
                    print!("{}", attention_locality(&c.params, &cb, &img, task)?.csv_rows());
                }
                if let Some(dir) = dump_attention {
                    fs::create_dir_all(&dir)?;
                    let (u, g) = task_pair(&c.params, &cb, &img)?;
                    let layers: Vec<usize> = (0..c.params.config.n_layers).collect();
                    fs::write(dir.join("attention_understanding.sgvl"), attention_dump(&c.params, &u, &layers)?)?;
                    fs::write(dir.join("attention_generation.sgvl"), attention_dump(&c.params, &g, &layers)?)?;
                }
            }
        }
        Cmd::Eval {
            checkpoint,
            n,
            n_generations,
            cfg_scale,
            seed,
            size,
        } => {
            let (c, cb) = load_with_codebook(&checkpoint)?;
            let opts = EvalOptions {
                n_captions: n,
                n_generations,
                cfg_scale,
                seed,
                image_size: size,
            };
            let m = eval_suite(&c.params, &cb, &opts)?;
            debug_assert!(m.to_csv().starts_with(EVAL_CSV_HEADER));
            print!("{}", m.to_csv());
        }
        Cmd::InspectCheckpoint { file } => {
            let bytes = fs::read(&file)?;
            let (header, tensors) = inspect(&bytes)?;
            println!("crc: ok");
            for (k, v) in header.iter().filter(|(k, _)| !k.starts_with("group.")) {
                let v = if k == "codebook" && v.len() > 32 { format!("{}... ({} hex chars)", &v[..32], v.len()) } else { v.clone() };
                println!("{k}={v}");
            }
            println!("tensors: {}", tensors.len());
            for t in tensors {
                let group = t.group.map_or("-", |g| g.name());
                println!("{}\t{:?}\t{}\t{:08x}", t.name, t.shape, group, t.crc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
