//! Builds multimodal training and inference sequences.
//!
//! Layouts:
//!
//! ```text
//! understand: <s> Provide a one-sentence caption for the image <boi> V.. <eoi> caption.. </s>
//! generate:   <s> Generate an image of : caption.. <boi> V.. <eoi> </s>
//! uncond:     <s> Here is a random image <UNCOND> : <boi> V.. <eoi> </s>
//! ```
//!
//! `V` are folded visual positions, `(h*w)/(m*n)` per image block. The loss
//! mask marks the *targets* of next-token prediction; the shift by one
//! happens in the trainer.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::folding::{fold_index_map, FoldSpec};
use crate::image::Image;
use crate::quantizer::{decode, encode, Codebook, TokenGrid};
use crate::rng::SplitMix64;
use crate::vocab::{Special, TokenId, Vocab};

pub const UNDERSTAND_PROMPT: &str = "Provide a one-sentence caption for the image";
pub const GENERATE_PROMPT: &str = "Generate an image of:";
pub const UNCOND_PROMPT: &str = "Here is a random image";
pub const SMALL_OBJECT_QUESTION: &str = "What color is the small object?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Understand,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Visual,
}

/// One sequence position: a text/special token, or folded patch `patch` of
/// image block `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Text(TokenId),
    Visual { block: usize, patch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub task: Task,
    pub positions: Vec<Position>,
    pub modality: Vec<Modality>,
    pub loss: Vec<bool>,
    pub uncond: bool,
    /// One grid per `<boi>` block, in sequence order.
    pub images: Vec<TokenGrid>,
    pub fold: FoldSpec,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn loss_count(&self) -> usize {
        self.loss.iter().filter(|&&b| b).count()
    }

    pub fn visual_count(&self) -> usize {
        self.modality.iter().filter(|&&m| m == Modality::Visual).count()
    }

    /// VQ ids of one folded patch in within-patch order.
    pub fn patch_ids(&self, block: usize, patch: usize) -> Vec<u32> {
        let g = &self.images[block];
        let map = fold_index_map(g.h(), g.w(), self.fold).expect("validated at build time");
        map.patch_cells(patch).iter().map(|&i| g.ids()[i]).collect()
    }

    /// Debug dump, one line per position: `index<TAB>kind<TAB>token<TAB>loss`.
    ///
    /// Visual tokens are written `img{block}[{h}x{w}/{m}x{n}]:{patch}={ids}`
    /// so the dump carries the full grids.
    pub fn to_debug_text(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (i, pos) in self.positions.iter().enumerate() {
            let (kind, token) = match *pos {
                Position::Text(id) if vocab.as_special(id).is_some() => ("special", vocab.token_str(id).to_string()),
                Position::Text(id) => ("text", vocab.token_str(id).to_string()),
                Position::Visual { block, patch } => {
                    let g = &self.images[block];
                    let ids: Vec<String> = self.patch_ids(block, patch).iter().map(u32::to_string).collect();
                    (
                        "visual",
                        format!(
                            "img{block}[{}x{}/{}x{}]:{patch}={}",
                            g.h(),
                            g.w(),
                            self.fold.m,
                            self.fold.n,
                            ids.join(",")
                        ),
                    )
                }
            };
            writeln!(out, "{i}\t{kind}\t{token}\t{}", self.loss[i] as u8).unwrap();
        }
        out
    }

    pub fn from_debug_text(text: &str, vocab: &Vocab) -> Result<TaskSample> {
        let bad = |line: &str| Error::data(format!("bad debug line {line:?}"));
        let mut positions = Vec::new();
        let mut loss = Vec::new();
        let mut grids: Vec<(usize, usize, Vec<u32>)> = Vec::new();
        let mut fold = None;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(line));
            }
            loss.push(match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(line)),
            });
            match f[1] {
                "text" | "special" => {
                    let ids = vocab.tokenize(f[2])?;
                    if ids.len() != 1 {
                        return Err(bad(line));
                    }
                    positions.push(Position::Text(ids[0]));
                }
                "visual" => {
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
                    let rest = f[2].strip_prefix("img").ok_or_else(|| bad(line))?;
                    let (block, rest) = rest.split_once('[').ok_or_else(|| bad(line))?;
                    let (dims, rest) = rest.split_once("]:").ok_or_else(|| bad(line))?;
                    let (patch, ids) = rest.split_once('=').ok_or_else(|| bad(line))?;
                    let (hw, mn) = dims.split_once('/').ok_or_else(|| bad(line))?;
                    let (h, w) = hw.split_once('x').ok_or_else(|| bad(line))?;
                    let (m, n) = mn.split_once('x').ok_or_else(|| bad(line))?;
                    let (block, patch, h, w) = (parse(block)?, parse(patch)?, parse(h)?, parse(w)?);
                    let spec = FoldSpec::new(parse(m)?, parse(n)?);
                    if *fold.get_or_insert(spec) != spec {
                        return Err(bad(line));
                    }
                    if block == grids.len() {
                        grids.push((h, w, vec![u32::MAX; h * w]));
                    }
                    let g = grids.get_mut(block).ok_or_else(|| bad(line))?;
                    let map = fold_index_map(h, w, spec)?;
                    if patch >= map.patches() {
                        return Err(bad(line));
                    }
                    let ids: Vec<u32> = ids
                        .split(',')
                        .map(|s| s.parse::<u32>().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?;
                    if ids.len() != spec.patch_len() {
                        return Err(bad(line));
                    }
                    for (&cell, id) in map.patch_cells(patch).iter().zip(ids) {
                        g.2[cell] = id;
                    }
                    positions.push(Position::Visual { block, patch });
                }
                _ => return Err(bad(line)),
            }
        }
        let images = grids
            .into_iter()
            .map(|(h, w, ids)| {
                if ids.contains(&u32::MAX) {
                    return Err(Error::data("debug dump misses patches"));
                }
                TokenGrid::new(h, w, ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let modality = positions
            .iter()
            .map(|p| match p {
                Position::Text(_) => Modality::Text,
                Position::Visual { .. } => Modality::Visual,
            })
            .collect();
        let generate = positions
            .iter()
            .zip(&loss)
            .any(|(p, &l)| l && matches!(p, Position::Visual { .. }));
        let uncond = positions.contains(&Position::Text(vocab.special(Special::Uncond)));
        Ok(TaskSample {
            task: if generate { Task::Generate } else { Task::Understand },
            positions,
            modality,
            loss,
            uncond,
            images,
            fold: fold.unwrap_or(FoldSpec::new(1, 1)),
        })
    }
}

/// Base-resolution tiles of one image plus an optional thumbnail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub tiles: Vec<TokenGrid>,
    pub thumbnail: Option<TokenGrid>,
    pub max_tiles: usize,
}

impl TileLayout {
    /// Grids in sequence order: tiles row-major, then the thumbnail.
    pub fn grids(&self) -> Vec<TokenGrid> {
        self.tiles.iter().chain(self.thumbnail.as_ref()).cloned().collect()
    }
}

/// Splits `grid` into `base`x`base` tiles (row-major). With `thumbnail`, the
/// image is decoded, downscaled to `base*p` pixels and re-encoded as one
/// extra tile.
pub fn tile_image(
    grid: &TokenGrid,
    base: usize,
    max_tiles: usize,
    thumbnail: bool,
    cb: &Codebook,
) -> Result<TileLayout> {
    if base == 0 || grid.h() % base != 0 || grid.w() % base != 0 {
        return Err(Error::shape(format!(
            "{}x{} grid not divisible by tile base {base}",
            grid.h(),
            grid.w()
        )));
    }
    let (rows, cols) = (grid.h() / base, grid.w() / base);
    if rows * cols > max_tiles {
        return Err(Error::shape(format!("{} tiles exceed the cap of {max_tiles}", rows * cols)));
    }
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push(grid.crop(r * base, c * base, base, base)?);
        }
    }
    let thumbnail = if thumbnail {
        let img: Image = decode(grid, cb)?;
        let px = base * cb.p();
        Some(encode(&img.resize_nearest(px, px), cb)?)
    } else {
        None
    };
    Ok(TileLayout {
        tiles,
        thumbnail,
        max_tiles,
    })
}

/// Owns the token space and folding geometry used to lay out samples.
#[derive(Debug, Clone)]
pub struct Sequencer {
    pub vocab: Vocab,
    pub fold: FoldSpec,
}

impl Sequencer {
    pub fn new(vocab: Vocab, fold: FoldSpec) -> Self {
        Self { vocab, fold }
    }

    fn sp(&self, s: Special) -> Position {
        Position::Text(self.vocab.special(s))
    }

    fn push_text(&self, b: &mut Builder, ids: &[TokenId], loss: bool) {
        for &id in ids {
            b.push(Position::Text(id), loss);
        }
    }

    fn push_image(&self, b: &mut Builder, grid: &TokenGrid, loss: bool) -> Result<()> {
        let patches = self.fold.patches(grid.h(), grid.w())?;
        let block = b.images.len();
        b.images.push(grid.clone());
        b.push(self.sp(Special::Boi), false);
        for patch in 0..patches {
            b.push(Position::Visual { block, patch }, loss);
        }
        // <eoi> is supervised exactly when the image is
        b.push(self.sp(Special::Eoi), loss);
        Ok(())
    }

    /// Prefix for the understanding task up to and including the last `<eoi>`.
    pub fn understanding_prefix(&self, grids: &[TokenGrid], prompt: &str) -> Result<TaskSample> {
        let mut b = Builder::default();
        b.push(self.sp(Special::Bos), false);
        self.push_text(&mut b, &self.vocab.tokenize(prompt)?, false);
        for g in grids {
            self.push_image(&mut b, g, false)?;
        }
        Ok(b.finish(Task::Understand, false, self.fold))
    }

    /// `<s> prompt (<boi> V <eoi>)* answer </s>`, loss on answer and `</s>`.
    pub fn build_question(&self, grids: &[TokenGrid], prompt: &str, answer: &str) -> Result<TaskSample> {
        let answer = self.vocab.tokenize(answer)?;
        let mut s = self.understanding_prefix(grids, prompt)?;
        for id in answer.into_iter().chain([self.vocab.special(Special::Eos)]) {
            s.positions.push(Position::Text(id));
            s.modality.push(Modality::Text);
            s.loss.push(true);
        }
        Ok(s)
    }

    pub fn build_understanding(&self, grid: &TokenGrid, caption: &str) -> Result<TaskSample> {
        self.build_question(std::slice::from_ref(grid), UNDERSTAND_PROMPT, caption)
    }

    pub fn build_understanding_tiled(&self, layout: &TileLayout, caption: &str) -> Result<TaskSample> {
        self.build_question(&layout.grids(), UNDERSTAND_PROMPT, caption)
    }

    /// Prompt tokens preceding `<boi>` for the generation task (after `<s>`).
    pub fn generation_prompt(&self, caption: &str, uncond: bool) -> Result<Vec<TokenId>> {
        if uncond {
            let mut ids = self.vocab.tokenize(UNCOND_PROMPT)?;
            ids.push(self.vocab.special(Special::Uncond));
            ids.extend(self.vocab.tokenize(":")?);
            Ok(ids)
        } else {
            let mut ids = self.vocab.tokenize(GENERATE_PROMPT)?;
            ids.extend(self.vocab.tokenize(caption)?);
            Ok(ids)
        }
    }

    pub fn build_generation(&self, caption: &str, grid: &TokenGrid, uncond: bool) -> Result<TaskSample> {
        let mut b = Builder::default();
        b.push(self.sp(Special::Bos), false);
        self.push_text(&mut b, &self.generation_prompt(caption, uncond)?, false);
        self.push_image(&mut b, grid, true)?;
        b.push(self.sp(Special::Eos), false);
        Ok(b.finish(Task::Generate, uncond, self.fold))
    }

    /// With probability `prob` returns the unconditional variant of the same
    /// image. Consumes exactly one `next_f64()` draw per call.
    pub fn cfg_dropout(&self, sample: &TaskSample, prob: f64, rng: &mut SplitMix64) -> Result<TaskSample> {
        if sample.task != Task::Generate {
            return Err(Error::data("condition dropout applies to generation samples only"));
        }
        if rng.next_f64() < prob {
            self.build_generation("", &sample.images[0], true)
        } else {
            Ok(sample.clone())
        }
    }
}

#[derive(Default)]
struct Builder {
    positions: Vec<Position>,
    loss: Vec<bool>,
    images: Vec<TokenGrid>,
}

impl Builder {
    fn push(&mut self, p: Position, loss: bool) {
        self.positions.push(p);
        self.loss.push(loss);
    }

    fn finish(self, task: Task, uncond: bool, fold: FoldSpec) -> TaskSample {
        let modality = self
            .positions
            .iter()
            .map(|p| match p {
                Position::Text(_) => Modality::Text,
                Position::Visual { .. } => Modality::Visual,
            })
            .collect();
        TaskSample {
            task,
            positions: self.positions,
            modality,
            loss: self.loss,
            uncond,
            images: self.images,
            fold,
        }
    }
}
