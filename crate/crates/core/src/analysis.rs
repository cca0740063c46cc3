//! Per-layer probes of a trained model: how similar the visual features of
//! one image are under the captioning and generation prompts, and how far
//! visual tokens attend back among visual tokens.

use std::fmt::Write as _;

use crate::checkpoint::encode_tensors;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{embed_sample, forward, ForwardTrace, Routing};
use crate::params::ModelParams;
use crate::quantizer::{encode, Codebook};
use crate::sampler::{generate_caption, SamplingRule};
use crate::sequencer::{Modality, Sequencer, Task, TaskSample};
use crate::shapes::{caption_of, parse_scene};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Mean cosine similarity per layer. Index 0 is the embedding output,
/// index `l` the output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub layers: Vec<f64>,
}

/// Attention-weighted mean visual-to-visual distance per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityProfile {
    pub task: Task,
    pub layers: Vec<f64>,
}

pub const SIMILARITY_CSV_HEADER: &str = "layer,similarity";
pub const LOCALITY_CSV_HEADER: &str = "layer,task,mean_distance";

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Understand => "understanding",
        Task::Generate => "generation",
    }
}

impl SimilarityProfile {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SIMILARITY_CSV_HEADER}\n");
        for (i, v) in self.layers.iter().enumerate() {
            writeln!(s, "{i},{v:.6}").unwrap();
        }
        s
    }
}

impl LocalityProfile {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOCALITY_CSV_HEADER}\n");
        s.push_str(&self.csv_rows());
        s
    }

    /// Data rows without the header, for concatenating tasks.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.layers.iter().enumerate() {
            writeln!(s, "{i},{},{v:.6}", task_name(self.task)).unwrap();
        }
        s
    }
}

/// Caption used for the generation-side sequence: the oracle parse of the
/// image when it is a clean scene, else the model's own greedy caption.
fn caption_for(params: &ModelParams, cb: &Codebook, img: &Image) -> Result<String> {
    match parse_scene(img) {
        Ok(scene) => Ok(caption_of(&scene)),
        Err(_) => Ok(generate_caption(params, cb, img, &SamplingRule::greedy())?.text),
    }
}

/// The image as an understanding sample and as a generation sample.
pub fn task_pair(params: &ModelParams, cb: &Codebook, img: &Image) -> Result<(TaskSample, TaskSample)> {
    let seq = Sequencer::new(Vocab::standard(), params.config.fold);
    let grid = encode(img, cb)?;
    let caption = caption_for(params, cb, img)?;
    Ok((seq.build_understanding(&grid, &caption)?, seq.build_generation(&caption, &grid, false)?))
}

fn run(params: &ModelParams, s: &TaskSample) -> Result<ForwardTrace> {
    let e = embed_sample(params, s, Routing::ByModality)?;
    forward(params, &e.x, &e.route, true)
}

/// Embedding output followed by every block output.
fn layer_states(params: &ModelParams, s: &TaskSample) -> Result<Vec<Vec<f64>>> {
    let e = embed_sample(params, s, Routing::ByModality)?;
    let t = forward(params, &e.x, &e.route, false)?;
    let mut out = vec![e.x];
    out.extend(t.hidden);
    Ok(out)
}

fn visual_rows(s: &TaskSample) -> Vec<usize> {
    (0..s.len()).filter(|&i| s.modality[i] == Modality::Visual).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of visual-position block outputs between two samples that
/// carry the same image; positions are paired in order.
pub fn similarity_between(params: &ModelParams, a: &TaskSample, b: &TaskSample) -> Result<SimilarityProfile> {
    let (ra, rb) = (visual_rows(a), visual_rows(b));
    if ra.len() != rb.len() || ra.is_empty() {
        return Err(Error::data("samples do not carry the same visual positions"));
    }
    let (ta, tb) = (layer_states(params, a)?, layer_states(params, b)?);
    let d = params.config.d;
    let layers = (0..ta.len())
        .map(|l| {
            let sum: f64 = ra
                .iter()
                .zip(&rb)
                .map(|(&i, &j)| cosine(&ta[l][i * d..(i + 1) * d], &tb[l][j * d..(j + 1) * d]))
                .sum();
            sum / ra.len() as f64
        })
        .collect();
    Ok(SimilarityProfile { layers })
}

pub fn feature_similarity(params: &ModelParams, cb: &Codebook, img: &Image) -> Result<SimilarityProfile> {
    let (u, g) = task_pair(params, cb, img)?;
    similarity_between(params, &u, &g)
}

/// Mean over heads and visual queries of `sum_k w(q,k) |q - k|`, where `w`
/// is the query's attention restricted to visual keys and renormalised.
/// `probs` is `[heads, len, len]`.
pub fn mean_visual_distance(probs: &[f64], len: usize, n_heads: usize, visual: &[bool]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for h in 0..n_heads {
        for q in (0..len).filter(|&q| visual[q]) {
            let row = &probs[(h * len + q) * len..(h * len + q + 1) * len];
            let (mut mass, mut dist) = (0.0, 0.0);
            for k in (0..=q).filter(|&k| visual[k]) {
                mass += row[k];
                dist += row[k] * (q - k) as f64;
            }
            if mass > 0.0 {
                total += dist / mass;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn locality_of(params: &ModelParams, s: &TaskSample) -> Result<LocalityProfile> {
    let t = run(params, s)?;
    let visual: Vec<bool> = s.modality.iter().map(|&m| m == Modality::Visual).collect();
    let layers = (0..params.config.n_layers)
        .map(|l| mean_visual_distance(t.attention(l).expect("attention retained"), s.len(), params.config.n_heads, &visual))
        .collect();
    Ok(LocalityProfile { task: s.task, layers })
}

pub fn attention_locality(params: &ModelParams, cb: &Codebook, img: &Image, task: Task) -> Result<LocalityProfile> {
    let (u, g) = task_pair(params, cb, img)?;
    locality_of(params, if task == Task::Understand { &u } else { &g })
}

/// Raw attention matrices of the chosen layers in the checkpoint tensor
/// framing, named `attn.layer{i}` with shape `[heads, len, len]`.
pub fn attention_dump(params: &ModelParams, s: &TaskSample, layers: &[usize]) -> Result<Vec<u8>> {
    let t = run(params, s)?;
    let (h, len) = (params.config.n_heads, s.len());
    let mut tensors = Vec::new();
    for &l in layers {
        if l >= params.config.n_layers {
            return Err(Error::data(format!("no layer {l}")));
        }
        let p = t.attention(l).expect("attention retained");
        tensors.push((format!("attn.layer{l}"), Tensor::from_vec(&[h, len, len], p.to_vec())));
    }
    Ok(encode_tensors(&format!("kind=attention\ntask={}\n", task_name(s.task)), &tensors))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelConfig;
    use crate::shapes::{gen_scene, render};

    fn setup() -> (ModelParams, Codebook, Image) {
        let p = ModelParams::init(ModelConfig::small(16, 2), 4).unwrap();
        let img = render(&gen_scene(9), 64).unwrap();
        (p, Codebook::palette(8), img)
    }

    #[test]
    fn uniform_and_diagonal_attention() {
        let t = 5;
        let visual = vec![true; t];
        let mut uniform = vec![0.0; t * t];
        let mut diag = vec![0.0; t * t];
        for q in 0..t {
            for k in 0..=q {
                uniform[q * t + k] = 1.0 / (q + 1) as f64;
            }
            diag[q * t + q] = 1.0;
        }
        let last_row = &uniform[(t - 1) * t..t * t];
        let last: f64 = last_row.iter().enumerate().map(|(k, w)| w * (t - 1 - k) as f64).sum();
        assert!((last - (t - 1) as f64 / 2.0).abs() < 1e-12);
        let all: f64 = (0..t).map(|q| q as f64 / 2.0).sum::<f64>() / t as f64;
        assert!((mean_visual_distance(&uniform, t, 1, &visual) - all).abs() < 1e-12);
        assert_eq!(mean_visual_distance(&diag, t, 1, &visual), 0.0);
    }

    #[test]
    fn text_keys_are_excluded_and_renormalised() {
        // position 0 is text and takes half the mass; the rest is visual
        let t = 3;
        let visual = [false, true, true];
        let mut p = vec![0.0; t * t];
        p[0] = 1.0;
        p[t] = 0.5;
        p[t + 1] = 0.5;
        p[2 * t] = 0.5;
        p[2 * t + 1] = 0.25;
        p[2 * t + 2] = 0.25;
        // q=1: 0; q=2: (0.25*1 + 0.25*0)/0.5 = 0.5
        assert!((mean_visual_distance(&p, t, 1, &visual) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn identical_prompts_give_unit_similarity() {
        let (p, cb, img) = setup();
        let (u, _) = task_pair(&p, &cb, &img).unwrap();
        let s = similarity_between(&p, &u, &u).unwrap();
        assert!(s.layers.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn profiles_are_bounded_and_deterministic() {
        let (p, cb, img) = setup();
        let s = feature_similarity(&p, &cb, &img).unwrap();
        assert_eq!(s.layers.len(), 3);
        assert!(s.layers.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(s, feature_similarity(&p, &cb, &img).unwrap());
        for task in [Task::Understand, Task::Generate] {
            let l = attention_locality(&p, &cb, &img, task).unwrap();
            let len = task_pair(&p, &cb, &img).unwrap().0.len().max(task_pair(&p, &cb, &img).unwrap().1.len());
            assert!(l.layers.iter().all(|&v| v >= 0.0 && v < len as f64));
            assert_eq!(l, attention_locality(&p, &cb, &img, task).unwrap());
        }
        assert_eq!(s.to_csv().lines().next(), Some(SIMILARITY_CSV_HEADER));
    }

    #[test]
    fn attention_dump_frames_tensors() {
        let (p, cb, img) = setup();
        let (u, _) = task_pair(&p, &cb, &img).unwrap();
        let bytes = attention_dump(&p, &u, &[0, 1]).unwrap();
        let (_, infos) = crate::checkpoint::inspect(&bytes).unwrap();
        assert_eq!(infos.len(), 2);
        assert_eq!(infos[1].shape, vec![p.config.n_heads, u.len(), u.len()]);
        assert!(attention_dump(&p, &u, &[5]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!(r > 0.9 && r < 1.0);
    }
}
