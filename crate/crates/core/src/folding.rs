//! Visual token folding: codebook-id embedding plus learned 2D positions,
//! concatenation of every `m`x`n` patch into one sequence element, and the
//! projection MLP into model width.

use crate::error::{Error, Result};
use crate::nn::{Ffn, FfnCache};
use crate::quantizer::TokenGrid;
use crate::tensor::Tensor;

/// Fold patch shape: `m` grid rows by `n` grid columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FoldSpec {
    pub m: usize,
    pub n: usize,
}

impl FoldSpec {
    pub const fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn patch_len(self) -> usize {
        self.m * self.n
    }

    pub fn patches(self, h: usize, w: usize) -> Result<usize> {
        self.check(h, w)?;
        Ok(h * w / self.patch_len())
    }

    fn check(self, h: usize, w: usize) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::config("fold dims must be positive"));
        }
        if h % self.m != 0 || w % self.n != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} grid not divisible by fold {}x{}",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

/// Bijection between row-major grid indices and `(patch, within)` pairs.
///
/// Patches are enumerated row-major over the `(h/m) x (w/n)` patch grid and
/// tokens row-major within each `m x n` patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldMap {
    h: usize,
    w: usize,
    spec: FoldSpec,
    to_patch: Vec<(usize, usize)>,
    to_flat: Vec<usize>,
}

pub fn fold_index_map(h: usize, w: usize, spec: FoldSpec) -> Result<FoldMap> {
    spec.check(h, w)?;
    let k = spec.patch_len();
    let patch_cols = w / spec.n;
    let mut to_patch = vec![(0, 0); h * w];
    let mut to_flat = vec![0; h * w];
    for (patch, chunk) in to_flat.chunks_mut(k).enumerate() {
        let (pr, pc) = (patch / patch_cols, patch % patch_cols);
        for (within, slot) in chunk.iter_mut().enumerate() {
            let (r, c) = (within / spec.n, within % spec.n);
            let flat = (pr * spec.m + r) * w + pc * spec.n + c;
            *slot = flat;
            to_patch[flat] = (patch, within);
        }
    }
    Ok(FoldMap {
        h,
        w,
        spec,
        to_patch,
        to_flat,
    })
}

impl FoldMap {
    pub fn spec(&self) -> FoldSpec {
        self.spec
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn patches(&self) -> usize {
        self.to_flat.len() / self.spec.patch_len()
    }

    pub fn to_patch(&self, flat: usize) -> (usize, usize) {
        self.to_patch[flat]
    }

    pub fn to_flat(&self, patch: usize, within: usize) -> usize {
        self.to_flat[patch * self.spec.patch_len() + within]
    }

    /// Flat grid indices of one patch in within-patch order.
    pub fn patch_cells(&self, patch: usize) -> &[usize] {
        let k = self.spec.patch_len();
        &self.to_flat[patch * k..(patch + 1) * k]
    }
}

/// Embedding tables and projection MLP for visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTables {
    /// `[K, e]`
    pub token_embed: Tensor,
    /// `[max_grid * max_grid, e]`, indexed by `row * max_grid + col`.
    pub pos_embed: Tensor,
    /// `m*n*e -> 2d -> d`
    pub mlp: Ffn,
    pub max_grid: usize,
}

/// Everything the backward pass of a fold needs.
pub struct FoldCache {
    slots: Vec<(u32, usize)>,
    mlp: FfnCache,
}

impl VisualTables {
    pub fn zeros(k: usize, e: usize, max_grid: usize, patch_len: usize, d: usize) -> Self {
        Self {
            token_embed: Tensor::zeros(&[k, e]),
            pos_embed: Tensor::zeros(&[max_grid * max_grid, e]),
            mlp: Ffn::zeros(patch_len * e, 2 * d, d),
            max_grid,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embed: Tensor::zeros(self.token_embed.shape()),
            pos_embed: Tensor::zeros(self.pos_embed.shape()),
            mlp: self.mlp.zeros_like(),
            max_grid: self.max_grid,
        }
    }

    fn e(&self) -> usize {
        self.token_embed.cols()
    }

    /// `(id, positional row)` slots of the given patches, patch-major.
    fn slots(&self, grid: &TokenGrid, map: &FoldMap, patches: impl Iterator<Item = usize>) -> Result<Vec<(u32, usize)>> {
        let k = self.token_embed.rows() as u32;
        let mut out = Vec::new();
        for p in patches {
            for &flat in map.patch_cells(p) {
                let id = grid.ids()[flat];
                if id >= k {
                    return Err(Error::data(format!("visual id {id} out of range for K={k}")));
                }
                out.push((id, (flat / grid.w()) * self.max_grid + flat % grid.w()));
            }
        }
        Ok(out)
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.h() > self.max_grid || grid.w() > self.max_grid {
            return Err(Error::shape(format!(
                "{}x{} grid exceeds positional capacity {}",
                grid.h(),
                grid.w(),
                self.max_grid
            )));
        }
        Ok(())
    }

    fn project(&self, slots: Vec<(u32, usize)>, patch_len: usize) -> (Vec<f64>, FoldCache) {
        let e = self.e();
        let mut x = Vec::with_capacity(slots.len() * e);
        for &(id, pos) in &slots {
            let (t, p) = (self.token_embed.row(id as usize), self.pos_embed.row(pos));
            x.extend(t.iter().zip(p).map(|(a, b)| a + b));
        }
        let (y, mlp) = self.mlp.forward(&x, slots.len() / patch_len);
        (y, FoldCache { slots, mlp })
    }
}

/// Embeds every token of `grid`, adds its positional row, concatenates each
/// patch and projects it; returns `[patches, d]`.
pub fn embed_and_fold(grid: &TokenGrid, tables: &VisualTables, spec: FoldSpec) -> Result<(Vec<f64>, FoldCache)> {
    tables.check_grid(grid)?;
    let map = fold_index_map(grid.h(), grid.w(), spec)?;
    let slots = tables.slots(grid, &map, 0..map.patches())?;
    Ok(tables.project(slots, spec.patch_len()))
}

/// Folded embedding of a single patch, as used when re-embedding freshly
/// generated ids. Identical to the corresponding row of [`embed_and_fold`].
pub fn embed_patch(grid: &TokenGrid, patch: usize, tables: &VisualTables, spec: FoldSpec) -> Result<Vec<f64>> {
    tables.check_grid(grid)?;
    let map = fold_index_map(grid.h(), grid.w(), spec)?;
    let slots = tables.slots(grid, &map, std::iter::once(patch))?;
    Ok(tables.project(slots, spec.patch_len()).0)
}

/// Accumulates table and MLP gradients from `dy` (`[patches, d]`).
pub fn embed_and_fold_backward(tables: &VisualTables, cache: &FoldCache, dy: &[f64], grad: &mut VisualTables) {
    let e = tables.e();
    let dx = tables.mlp.backward(&cache.mlp, dy, Some(&mut grad.mlp));
    for (&(id, pos), g) in cache.slots.iter().zip(dx.chunks_exact(e)) {
        for (a, b) in grad.token_embed.row_mut(id as usize).iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in grad.pos_embed.row_mut(pos).iter_mut().zip(g) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn tables(seed: u64, mn: usize) -> VisualTables {
        let mut rng = SplitMix64::new(seed);
        let mut t = VisualTables::zeros(8, 3, 8, mn, 4);
        t.token_embed = Tensor::randn(t.token_embed.shape(), 1.0, &mut rng);
        t.pos_embed = Tensor::randn(t.pos_embed.shape(), 1.0, &mut rng);
        for l in [&mut t.mlp.up, &mut t.mlp.down] {
            l.w = Tensor::randn(l.w.shape(), 0.5, &mut rng);
            l.b = Some(Tensor::randn(l.b.as_ref().unwrap().shape(), 0.5, &mut rng));
        }
        t
    }

    fn random_grid(seed: u64, h: usize, w: usize) -> TokenGrid {
        let mut rng = SplitMix64::new(seed);
        TokenGrid::new(h, w, (0..h * w).map(|_| rng.below(8) as u32).collect()).unwrap()
    }

    #[test]
    fn large_image_fold_count() {
        let map = fold_index_map(64, 64, FoldSpec::new(2, 8)).unwrap();
        assert_eq!(map.patches(), 256);
        assert_eq!(map.patch_cells(0).len(), 16);
    }

    #[test]
    fn toy_fold() {
        assert_eq!(FoldSpec::new(2, 4).patches(8, 8).unwrap(), 8);
        let map = fold_index_map(8, 8, FoldSpec::new(2, 4)).unwrap();
        assert_eq!(map.patch_cells(0), &[0, 1, 2, 3, 8, 9, 10, 11]);
        assert_eq!(map.patch_cells(1), &[4, 5, 6, 7, 12, 13, 14, 15]);
        assert_eq!(map.patch_cells(2), &[16, 17, 18, 19, 24, 25, 26, 27]);
    }

    #[test]
    fn unit_fold_is_identity() {
        let map = fold_index_map(5, 7, FoldSpec::new(1, 1)).unwrap();
        for i in 0..35 {
            assert_eq!(map.to_patch(i), (i, 0));
        }
    }

    #[test]
    fn divisibility_errors() {
        assert!(fold_index_map(8, 6, FoldSpec::new(2, 4)).is_err());
        assert!(fold_index_map(7, 8, FoldSpec::new(2, 4)).is_err());
        assert!(fold_index_map(8, 8, FoldSpec::new(0, 4)).is_err());
    }

    #[test]
    fn fold_output_length_and_patch_path() {
        let spec = FoldSpec::new(2, 4);
        let t = tables(1, 8);
        let g = random_grid(2, 8, 8);
        let (y, _) = embed_and_fold(&g, &t, spec).unwrap();
        assert_eq!(y.len(), 8 * 4);
        for p in 0..8 {
            assert_eq!(embed_patch(&g, p, &t, spec).unwrap(), y[p * 4..(p + 1) * 4]);
        }
    }

    #[test]
    fn zero_tables_broadcast_bias() {
        let spec = FoldSpec::new(2, 4);
        let mut t = VisualTables::zeros(8, 3, 8, 8, 4);
        t.mlp.down.b = Some(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]));
        let (y, _) = embed_and_fold(&random_grid(3, 8, 8), &t, spec).unwrap();
        for row in y.chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn fold_rejects_bad_ids_and_oversized_grids() {
        let t = tables(1, 8);
        let g = TokenGrid::new(2, 4, vec![0, 1, 2, 3, 4, 5, 6, 9]).unwrap();
        assert!(embed_and_fold(&g, &t, FoldSpec::new(2, 4)).is_err());
        let g = random_grid(1, 16, 8);
        assert!(embed_and_fold(&g, &t, FoldSpec::new(2, 4)).is_err());
    }

    #[test]
    fn swapping_patches_swaps_outputs() {
        let spec = FoldSpec::new(2, 4);
        let mut t = tables(4, 8);
        // positional rows would otherwise distinguish the two locations
        t.pos_embed.fill(0.0);
        let g = random_grid(5, 8, 8);
        let map = fold_index_map(8, 8, spec).unwrap();
        let mut ids = g.ids().to_vec();
        for j in 0..8 {
            ids.swap(map.to_flat(1, j), map.to_flat(6, j));
        }
        let g2 = TokenGrid::new(8, 8, ids).unwrap();
        let (y, _) = embed_and_fold(&g, &t, spec).unwrap();
        let (y2, _) = embed_and_fold(&g2, &t, spec).unwrap();
        for p in 0..8 {
            let q = match p {
                1 => 6,
                6 => 1,
                p => p,
            };
            assert_eq!(y[p * 4..(p + 1) * 4], y2[q * 4..(q + 1) * 4]);
        }
    }

    #[test]
    fn token_embed_gradient_matches_finite_differences() {
        let spec = FoldSpec::new(2, 4);
        let t = tables(6, 8);
        let g = random_grid(7, 4, 8);
        let mut rng = SplitMix64::new(8);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng).into_vec();
        let loss = |t: &VisualTables| {
            let (y, _) = embed_and_fold(&g, t, spec).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = embed_and_fold(&g, &t, spec).unwrap();
        let mut grad = t.zeros_like();
        embed_and_fold_backward(&t, &cache, &w, &mut grad);
        let h = 1e-3;
        let used: Vec<bool> = (0..8).map(|k| g.ids().contains(&(k as u32))).collect();
        for i in 0..t.token_embed.len() {
            let mut tp = t.clone();
            tp.token_embed.data_mut()[i] += h;
            let mut tm = t.clone();
            tm.token_embed.data_mut()[i] -= h;
            let num = (loss(&tp) - loss(&tm)) / (2.0 * h);
            let ana = grad.token_embed.data()[i];
            assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{i}: {num} vs {ana}");
            // sparsity: rows of unused ids get nothing
            if !used[i / 3] {
                assert_eq!(ana, 0.0);
            }
        }
        // positional rows outside the 4x8 grid are untouched
        for r in 32..64 {
            assert!(grad.pos_embed.row(r).iter().all(|&x| x == 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn bijection(m in 1usize..5, n in 1usize..9, hp in 1usize..6, wp in 1usize..6) {
            let (h, w) = (m * hp, n * wp);
            let map = fold_index_map(h, w, FoldSpec::new(m, n)).unwrap();
            prop_assert_eq!(map.patches() * m * n, h * w);
            let mut seen = vec![false; h * w];
            for flat in 0..h * w {
                let (p, j) = map.to_patch(flat);
                prop_assert!(p < map.patches() && j < m * n);
                prop_assert_eq!(map.to_flat(p, j), flat);
                prop_assert!(!seen[flat]);
                seen[flat] = true;
            }
        }
    }
}
