//! Discrete image tokenizer over a fixed codebook of `p`x`p` RGB blocks.

use crate::error::{Error, Result};
use crate::image::{Image, PALETTE};

const BLOB_MAGIC: &[u8; 4] = b"VQCB";
pub const MAX_CODEBOOK: usize = 64;

/// `K` distinct `p`x`p`x3 blocks, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    p: usize,
    entries: Vec<Vec<u8>>,
}

impl Codebook {
    pub fn new(p: usize, entries: Vec<Vec<u8>>) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("codebook tile size must be positive"));
        }
        if entries.is_empty() || entries.len() > MAX_CODEBOOK {
            return Err(Error::config(format!(
                "codebook size {} outside 1..={MAX_CODEBOOK}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.len() != p * p * 3 {
                return Err(Error::shape(format!("entry {i} has {} bytes, want {}", e.len(), p * p * 3)));
            }
            if entries[..i].contains(e) {
                return Err(Error::config(format!("codebook entry {i} duplicates an earlier entry")));
            }
        }
        Ok(Self { p, entries })
    }

    /// One solid block per palette colour; entry `i` is `PALETTE[i]`.
    pub fn palette(p: usize) -> Self {
        let entries = PALETTE
            .iter()
            .map(|c| c.iter().copied().cycle().take(p * p * 3).collect())
            .collect();
        Self::new(p, entries).expect("palette colours are distinct")
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn entry(&self, id: usize) -> &[u8] {
        &self.entries[id]
    }

    /// `magic "VQCB" | K u32 LE | p u32 LE | K*p*p*3 raw bytes`.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.k() * self.p * self.p * 3);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.p as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(e);
        }
        out
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self> {
        if blob.len() < 12 || &blob[..4] != BLOB_MAGIC {
            return Err(Error::data("codebook blob: bad magic"));
        }
        let k = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
        let p = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
        let size = p * p * 3;
        if k > MAX_CODEBOOK || blob.len() != 12 + k * size {
            return Err(Error::data("codebook blob: length mismatch"));
        }
        let entries = blob[12..].chunks(size).map(<[u8]>::to_vec).collect();
        Self::new(p, entries)
    }
}

/// `h`x`w` grid of codebook ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::shape(format!("{h}x{w} grid needs {} ids, got {}", h * w, ids.len())));
        }
        Ok(Self { h, w, ids })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.w + col]
    }

    /// Sub-grid with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<TokenGrid> {
        if row + h > self.h || col + w > self.w {
            return Err(Error::shape("crop outside grid"));
        }
        let ids = (row..row + h)
            .flat_map(|r| (col..col + w).map(move |c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        TokenGrid::new(h, w, ids)
    }

    pub fn flip_horizontal(&self) -> TokenGrid {
        let ids = (0..self.h)
            .flat_map(|r| (0..self.w).rev().map(move |c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        TokenGrid {
            h: self.h,
            w: self.w,
            ids,
        }
    }
}

/// Maps each `p`x`p` tile to the codebook entry with the smallest summed
/// squared RGB difference; ties go to the lowest index.
pub fn encode(img: &Image, cb: &Codebook) -> Result<TokenGrid> {
    let p = cb.p;
    if img.width() % p != 0 || img.height() % p != 0 {
        return Err(Error::shape(format!(
            "{}x{} image not divisible by tile size {p}",
            img.width(),
            img.height()
        )));
    }
    let (h, w) = (img.height() / p, img.width() / p);
    let raw = img.raw();
    let stride = img.width() * 3;
    let mut tile = vec![0u8; p * p * 3];
    let mut ids = Vec::with_capacity(h * w);
    for tr in 0..h {
        for tc in 0..w {
            for y in 0..p {
                let src = (tr * p + y) * stride + tc * p * 3;
                tile[y * p * 3..(y + 1) * p * 3].copy_from_slice(&raw[src..src + p * 3]);
            }
            let mut best = (u64::MAX, 0u32);
            for (id, e) in cb.entries.iter().enumerate() {
                let d: u64 = tile
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| {
                        let x = a as i64 - b as i64;
                        (x * x) as u64
                    })
                    .sum();
                if d < best.0 {
                    best = (d, id as u32);
                }
            }
            ids.push(best.1);
        }
    }
    TokenGrid::new(h, w, ids)
}

/// Pastes the codebook entry of every id; output is `(w*p) x (h*p)`.
pub fn decode(grid: &TokenGrid, cb: &Codebook) -> Result<Image> {
    let p = cb.p;
    if let Some(&bad) = grid.ids.iter().find(|&&id| id as usize >= cb.k()) {
        return Err(Error::data(format!("token id {bad} >= codebook size {}", cb.k())));
    }
    let (width, height) = (grid.w * p, grid.h * p);
    let mut raw = vec![0u8; width * height * 3];
    for tr in 0..grid.h {
        for tc in 0..grid.w {
            let e = &cb.entries[grid.get(tr, tc) as usize];
            for y in 0..p {
                let dst = (tr * p + y) * width * 3 + tc * p * 3;
                raw[dst..dst + p * 3].copy_from_slice(&e[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    Image::from_raw(width, height, raw)
}
