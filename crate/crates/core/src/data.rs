//! Training and evaluation data built on the shapes world: the held-out
//! scene split, per-step batch streams, the text corpus for the pretrained
//! language model, and the small-marker probe task.

use crate::error::{Error, Result};
use crate::folding::FoldSpec;
use crate::image::Image;
use crate::quantizer::{encode, Codebook, TokenGrid};
use crate::rng::SplitMix64;
use crate::sequencer::{tile_image, Modality, Position, Sequencer, Task, TaskSample, SMALL_OBJECT_QUESTION};
use crate::shapes::{caption_of, render, scene_from_index, Cell, Color, SceneSpec, Shape, GRID, SCENE_COUNT, TILE};
use crate::vocab::{Special, Vocab};

/// Scenes whose enumeration index is a multiple of this are never trained on.
pub const HOLDOUT_EVERY: u64 = 10;

pub fn is_held_out(index: u64) -> bool {
    index % HOLDOUT_EVERY == 0
}

// stream tags for `SplitMix64::derive`
const TAG_HELD_OUT: u64 = 0x4845_4c44;
const TAG_PROBE: u64 = 0x5052_4f42;
const TAG_PRETRAIN: u64 = 0x5054_5854;

/// Uniform draw from the training split.
pub fn train_scene(rng: &mut SplitMix64) -> SceneSpec {
    loop {
        let i = rng.below(SCENE_COUNT);
        if !is_held_out(i) {
            return scene_from_index(i);
        }
    }
}

/// `n` distinct held-out scenes in a seeded order.
pub fn held_out_scenes(n: usize, seed: u64) -> Vec<SceneSpec> {
    let mut idx: Vec<u64> = (0..SCENE_COUNT).filter(|&i| is_held_out(i)).collect();
    SplitMix64::derive(seed, &[TAG_HELD_OUT]).shuffle(&mut idx);
    idx.into_iter().take(n).map(scene_from_index).collect()
}

/// `<s> sentence </s>` with loss on everything after `<s>`.
pub fn text_sample(vocab: &Vocab, sentence: &str, fold: FoldSpec) -> Result<TaskSample> {
    let mut ids = vec![vocab.special(Special::Bos)];
    ids.extend(vocab.tokenize(sentence)?);
    ids.push(vocab.special(Special::Eos));
    let n = ids.len();
    Ok(TaskSample {
        task: Task::Understand,
        positions: ids.into_iter().map(Position::Text).collect(),
        modality: vec![Modality::Text; n],
        loss: (0..n).map(|i| i > 0).collect(),
        uncond: false,
        images: Vec::new(),
        fold,
    })
}

fn object_phrase(color: Color, shape: Shape) -> String {
    format!("the {} {}", color.name(), shape.name())
}

const RELATIONS: [&str; 4] = ["left of", "right of", "above", "below"];

/// Every relation sentence `"the {c} {s} is {rel} the {c} {s}"` over
/// distinct object kinds; `(sentence, held_out)`.
pub fn probe_sentences() -> Vec<(String, bool)> {
    let kinds: Vec<(Color, Shape)> = Shape::ALL
        .into_iter()
        .flat_map(|s| Color::ALL.into_iter().map(move |c| (c, s)))
        .collect();
    let mut out = Vec::new();
    for a in &kinds {
        for b in &kinds {
            if a == b {
                continue;
            }
            for rel in RELATIONS {
                let s = format!("{} is {rel} {}", object_phrase(a.0, a.1), object_phrase(b.0, b.1));
                out.push((s, false));
            }
        }
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    SplitMix64::derive(0, &[TAG_PROBE]).shuffle(&mut order);
    for &i in &order[..out.len() / 5] {
        out[i].1 = true;
    }
    out
}

/// Held-out relation sentences used for perplexity.
pub fn probe_corpus() -> Vec<String> {
    probe_sentences().into_iter().filter(|p| p.1).map(|p| p.0).collect()
}

/// One sentence of the pretraining corpus: a caption of a training scene,
/// a generation prompt, the caption instruction, or a training relation
/// sentence.
pub fn pretrain_sentence(rng: &mut SplitMix64, train_probes: &[String]) -> String {
    match rng.below(4) {
        0 | 1 => caption_of(&train_scene(rng)),
        2 => format!("{} {}", crate::sequencer::GENERATE_PROMPT, caption_of(&train_scene(rng))),
        _ => train_probes[rng.below(train_probes.len() as u64) as usize].clone(),
    }
}

/// Source of training batches, indexed by global step so that runs resume
/// exactly.
pub trait BatchSource {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>>;
}

impl<F: Fn(u64) -> Result<Vec<TaskSample>>> BatchSource for F {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>> {
        self(step)
    }
}

/// Text-only batches for the language-model pretraining stage.
#[derive(Debug, Clone)]
pub struct PretrainText {
    pub vocab: Vocab,
    pub fold: FoldSpec,
    pub seed: u64,
    pub batch: usize,
    train_probes: Vec<String>,
}

impl PretrainText {
    pub fn new(vocab: Vocab, fold: FoldSpec, seed: u64, batch: usize) -> Self {
        let train_probes = probe_sentences().into_iter().filter(|p| !p.1).map(|p| p.0).collect();
        Self {
            vocab,
            fold,
            seed,
            batch,
            train_probes,
        }
    }
}

impl BatchSource for PretrainText {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>> {
        (0..self.batch as u64)
            .map(|b| {
                let mut rng = SplitMix64::derive(self.seed, &[TAG_PRETRAIN, step, b]);
                text_sample(&self.vocab, &pretrain_sentence(&mut rng, &self.train_probes), self.fold)
            })
            .collect()
    }
}

/// Balanced understanding/generation batches from the training split.
/// Sample `b` of step `t` draws from `derive(seed, [t, b])`; generation
/// samples then apply condition dropout from the same stream.
#[derive(Debug, Clone)]
pub struct ShapesMix {
    pub seq: Sequencer,
    pub codebook: Codebook,
    pub seed: u64,
    pub n_understand: usize,
    pub n_generate: usize,
    pub cfg_drop: f64,
    pub image_size: usize,
}

impl ShapesMix {
    pub fn sample(&self, step: u64, b: usize) -> Result<TaskSample> {
        let mut rng = SplitMix64::derive(self.seed, &[step, b as u64]);
        let scene = train_scene(&mut rng);
        let grid = encode(&render(&scene, self.image_size)?, &self.codebook)?;
        let caption = caption_of(&scene);
        if b < self.n_understand {
            self.seq.build_understanding(&grid, &caption)
        } else {
            let s = self.seq.build_generation(&caption, &grid, false)?;
            self.seq.cfg_dropout(&s, self.cfg_drop, &mut rng)
        }
    }
}

impl BatchSource for ShapesMix {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>> {
        (0..self.n_understand + self.n_generate).map(|b| self.sample(step, b)).collect()
    }
}

/// Epochs over a fixed pool: each epoch visits every sample once in a
/// seeded order, `batch` at a time (the last partial batch is dropped).
#[derive(Debug, Clone)]
pub struct SamplePool {
    pub samples: Vec<TaskSample>,
    pub batch: usize,
    pub seed: u64,
}

impl SamplePool {
    pub fn steps_per_epoch(&self) -> u64 {
        (self.samples.len() / self.batch.max(1)) as u64
    }
}

impl BatchSource for SamplePool {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>> {
        let per = self.steps_per_epoch();
        if per == 0 {
            return Err(Error::data("sample pool smaller than one batch"));
        }
        let (epoch, i) = (step / per, (step % per) as usize);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        SplitMix64::derive(self.seed, &[epoch]).shuffle(&mut order);
        Ok(order[i * self.batch..(i + 1) * self.batch].iter().map(|&j| self.samples[j].clone()).collect())
    }
}

/// Fixed pool for instruction tuning: `n` scenes alternating between the two
/// tasks, generation samples with condition dropout applied once.
pub fn sft_pool(mix: &ShapesMix, n: usize) -> Result<Vec<TaskSample>> {
    (0..n)
        .map(|i| {
            let mut rng = SplitMix64::derive(mix.seed, &[u64::MAX, i as u64]);
            let scene = train_scene(&mut rng);
            let grid = encode(&render(&scene, mix.image_size)?, &mix.codebook)?;
            let caption = caption_of(&scene);
            if i % 2 == 0 {
                mix.seq.build_understanding(&grid, &caption)
            } else {
                let s = mix.seq.build_generation(&caption, &grid, false)?;
                mix.seq.cfg_dropout(&s, mix.cfg_drop, &mut rng)
            }
        })
        .collect()
}

/// A scene plus one single-tile marker placed in an empty layout cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedScene {
    pub scene: SceneSpec,
    pub marker: Color,
    /// Marker tile at 128 pixels, `(row, col)` in tiles.
    pub tile: (usize, usize),
}

pub const MARKED_SIZE: usize = 128;

/// Tile offset of the marker inside its cell.
pub const MARKER_OFFSET: (usize, usize) = (3, 3);

/// Draws a training-split scene with at most three objects and a marker of
/// uniformly random colour at a fixed tile of a random empty cell.
pub fn marked_scene(rng: &mut SplitMix64) -> MarkedScene {
    let scene = train_scene(rng);
    let empty: Vec<Cell> = Cell::ALL.into_iter().filter(|&c| scene.object_at(c).is_none()).collect();
    let cell = empty[rng.below(empty.len() as u64) as usize];
    let per_cell = MARKED_SIZE / GRID / TILE;
    let (r, c) = MARKER_OFFSET;
    let marker = Color::ALL[rng.below(4) as usize];
    MarkedScene {
        scene,
        marker,
        tile: (cell.row * per_cell + r, cell.col * per_cell + c),
    }
}

pub fn render_marked(m: &MarkedScene) -> Result<Image> {
    let mut img = render(&m.scene, MARKED_SIZE)?;
    img.fill_rect(m.tile.1 * TILE, m.tile.0 * TILE, TILE, TILE, m.marker.rgb());
    Ok(img)
}

/// How an image is presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Full resolution split into base tiles plus a thumbnail.
    Tiled { base: usize },
    /// Nearest-neighbour downscale to `size` pixels, one block.
    Downscaled { size: usize },
}

pub fn view_grids(img: &Image, view: View, cb: &Codebook) -> Result<Vec<TokenGrid>> {
    match view {
        View::Tiled { base } => {
            let grid = encode(img, cb)?;
            let tiles = (grid.h() / base) * (grid.w() / base);
            Ok(tile_image(&grid, base, tiles, true, cb)?.grids())
        }
        View::Downscaled { size } => Ok(vec![encode(&img.resize_nearest(size, size), cb)?]),
    }
}

/// Question/answer stream for the small-marker probe.
#[derive(Debug, Clone)]
pub struct MarkerTask {
    pub seq: Sequencer,
    pub codebook: Codebook,
    pub view: View,
    pub seed: u64,
    pub batch: usize,
}

impl MarkerTask {
    pub fn sample_for(&self, m: &MarkedScene) -> Result<TaskSample> {
        let grids = view_grids(&render_marked(m)?, self.view, &self.codebook)?;
        self.seq.build_question(&grids, SMALL_OBJECT_QUESTION, m.marker.name())
    }
}

impl BatchSource for MarkerTask {
    fn batch(&self, step: u64) -> Result<Vec<TaskSample>> {
        (0..self.batch)
            .map(|b| self.sample_for(&marked_scene(&mut SplitMix64::derive(self.seed, &[step, b as u64]))))
            .collect()
    }
}

/// Marker scenes for evaluation; disjoint streams from training.
pub fn marker_eval_set(n: usize, seed: u64) -> Vec<MarkedScene> {
    (0..n).map(|i| marked_scene(&mut SplitMix64::derive(seed, &[u64::MAX - 1, i as u64]))).collect()
}
