//! Synthetic shapes world: scene sampling, rendering, canonical captions and
//! the exact inverse parser used to score generated images.
//!
//! Scenes place up to three coloured shapes on a 2x2 layout grid. Shapes are
//! drawn as unions of whole `p`x`p` tiles, so every tile of a rendered image is
//! a single palette colour and the palette quantizer reproduces it exactly.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{self, Image, Rgb};
use crate::rng::SplitMix64;

/// Layout grid side (cells per row and column).
pub const GRID: usize = 2;
/// Pixel side of one quantizer tile.
pub const TILE: usize = 8;
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Whether tile `(row, col)` of a cell `tiles` tiles wide is covered.
    ///
    /// Masks are defined on a canonical 4x4 tile grid (tile centres in unit
    /// cell coordinates) and scaled up by replication, so a 128-pixel render
    /// is an exact 2x upscale of the 64-pixel one.
    pub fn covers(self, tiles: usize, row: usize, col: usize) -> bool {
        const BASE: usize = 4;
        let (r, c) = (row * BASE / tiles, col * BASE / tiles);
        let u = (c as f64 + 0.5) / BASE as f64 - 0.5;
        let v = (r as f64 + 0.5) / BASE as f64;
        match self {
            Shape::Square => u.abs() <= 0.4 && (v - 0.5).abs() <= 0.4,
            Shape::Circle => u * u + (v - 0.5) * (v - 0.5) <= 0.16,
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => u.abs() <= 0.5 * v,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn rgb(self) -> Rgb {
        match self {
            Color::Red => image::RED,
            Color::Green => image::GREEN,
            Color::Blue => image::BLUE,
            Color::Yellow => image::YELLOW,
        }
    }

    pub fn from_rgb(c: Rgb) -> Option<Color> {
        Color::ALL.into_iter().find(|x| x.rgb() == c)
    }
}

/// Layout cell, `row` and `col` in `0..GRID`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const ALL: [Cell; 4] = [
        Cell { row: 0, col: 0 },
        Cell { row: 0, col: 1 },
        Cell { row: 1, col: 0 },
        Cell { row: 1, col: 1 },
    ];

    pub fn index(self) -> usize {
        self.row * GRID + self.col
    }

    pub fn name(self) -> &'static str {
        match (self.row, self.col) {
            (0, 0) => "top left",
            (0, 1) => "top right",
            (1, 0) => "bottom left",
            _ => "bottom right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

/// Ground-truth description of one synthetic image.
///
/// Objects are kept in row-major cell order. Equality compares objects only;
/// `seed` records where a sampled scene came from.
#[derive(Debug, Clone, Eq)]
pub struct SceneSpec {
    objects: Vec<Object>,
    pub seed: Option<u64>,
}

impl PartialEq for SceneSpec {
    fn eq(&self, other: &Self) -> bool {
        self.objects == other.objects
    }
}

impl SceneSpec {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.len() > MAX_OBJECTS {
            return Err(Error::data(format!(
                "scene has {} objects, at most {MAX_OBJECTS} allowed",
                objects.len()
            )));
        }
        objects.sort_by_key(|o| o.cell.index());
        for w in objects.windows(2) {
            if w[0].cell == w[1].cell {
                return Err(Error::data(format!("two objects share cell {}", w[0].cell.name())));
            }
        }
        if let Some(o) = objects.iter().find(|o| o.cell.row >= GRID || o.cell.col >= GRID) {
            return Err(Error::data(format!("cell {:?} outside layout", o.cell)));
        }
        Ok(Self {
            objects,
            seed: None,
        })
    }

    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
            seed: None,
        }
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn object_at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&caption_of(self))
    }
}

const KINDS: u64 = 12; // shapes x colours

/// Number of legal scenes: sum over k=1..3 of C(4,k) * 12^k.
pub const SCENE_COUNT: u64 = 4 * 12 + 6 * 144 + 4 * 1728;

/// Cell subsets of size k in lexicographic order of cell indices.
fn cell_subsets(k: usize) -> Vec<Vec<Cell>> {
    let mut out = Vec::new();
    for mask in 0u32..16 {
        if mask.count_ones() as usize == k {
            out.push(Cell::ALL.iter().copied().filter(|c| mask & (1 << c.index()) != 0).collect());
        }
    }
    out.sort_by_key(|s: &Vec<Cell>| s.iter().map(|c| c.index()).collect::<Vec<_>>());
    out
}

/// Decodes a scene index in `[0, SCENE_COUNT)`.
///
/// Enumeration order: object count k ascending; within k, cell subsets in
/// lexicographic order; within a subset, the (shape, colour) assignment read
/// as base-12 digits, first object most significant, digit = shape * 4 + colour.
pub fn scene_from_index(mut index: u64) -> SceneSpec {
    assert!(index < SCENE_COUNT);
    for k in 1..=MAX_OBJECTS {
        let subsets = cell_subsets(k);
        let per_subset = KINDS.pow(k as u32);
        let block = subsets.len() as u64 * per_subset;
        if index < block {
            let cells = &subsets[(index / per_subset) as usize];
            let mut code = index % per_subset;
            let mut kinds = vec![0u64; k];
            for slot in kinds.iter_mut().rev() {
                *slot = code % KINDS;
                code /= KINDS;
            }
            let objects = cells
                .iter()
                .zip(kinds)
                .map(|(&cell, kind)| Object {
                    shape: Shape::ALL[(kind / 4) as usize],
                    color: Color::ALL[(kind % 4) as usize],
                    cell,
                })
                .collect();
            return SceneSpec::new(objects).expect("enumerated scene is legal");
        }
        index -= block;
    }
    unreachable!()
}

/// Inverse of [`scene_from_index`] for scenes with 1 to 3 objects.
pub fn scene_index(scene: &SceneSpec) -> Option<u64> {
    let k = scene.objects.len();
    if k == 0 || k > MAX_OBJECTS {
        return None;
    }
    let mut base = 0;
    for j in 1..k {
        base += cell_subsets(j).len() as u64 * KINDS.pow(j as u32);
    }
    let cells: Vec<Cell> = scene.objects.iter().map(|o| o.cell).collect();
    let subset = cell_subsets(k).iter().position(|s| *s == cells)? as u64;
    let code = scene.objects.iter().fold(0u64, |acc, o| {
        let shape = Shape::ALL.iter().position(|&s| s == o.shape).unwrap() as u64;
        let color = Color::ALL.iter().position(|&c| c == o.color).unwrap() as u64;
        acc * KINDS + shape * 4 + color
    });
    Some(base + subset * KINDS.pow(k as u32) + code)
}

/// Samples a scene uniformly over all legal scenes: one `below(SCENE_COUNT)`
/// draw from `SplitMix64::new(seed)`, decoded by [`scene_from_index`].
pub fn gen_scene(seed: u64) -> SceneSpec {
    let mut rng = SplitMix64::new(seed);
    let mut scene = scene_from_index(rng.below(SCENE_COUNT));
    scene.seed = Some(seed);
    scene
}

fn check_size(size: usize) -> Result<usize> {
    if size == 0 || size % (GRID * TILE) != 0 {
        return Err(Error::shape(format!(
            "image size {size} not divisible by {}",
            GRID * TILE
        )));
    }
    Ok(size / (GRID * TILE))
}

/// Renders a scene to a `size`x`size` palette image.
pub fn render(scene: &SceneSpec, size: usize) -> Result<Image> {
    let tiles = check_size(size)?;
    let cell_px = size / GRID;
    let mut img = Image::filled(size, size, image::WHITE);
    for o in &scene.objects {
        let (x0, y0) = (o.cell.col * cell_px, o.cell.row * cell_px);
        for r in 0..tiles {
            for c in 0..tiles {
                if o.shape.covers(tiles, r, c) {
                    img.fill_rect(x0 + c * TILE, y0 + r * TILE, TILE, TILE, o.color.rgb());
                }
            }
        }
    }
    Ok(img)
}

/// Canonical caption: `"a {color} {shape} at {cell}"` clauses joined by
/// `" and "` in row-major cell order. Empty scenes caption as `""`.
pub fn caption_of(scene: &SceneSpec) -> String {
    scene
        .objects
        .iter()
        .map(|o| format!("a {} {} at {}", o.color.name(), o.shape.name(), o.cell.name()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Best-effort inverse of [`caption_of`]: returns the objects of every
/// well-formed clause, skipping malformed ones.
pub fn objects_in_caption(text: &str) -> Vec<Object> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for clause in words.split(|w| *w == "and") {
        if let ["a", color, shape, "at", vert, horiz] = clause {
            let row = match *vert {
                "top" => 0,
                "bottom" => 1,
                _ => continue,
            };
            let col = match *horiz {
                "left" => 0,
                "right" => 1,
                _ => continue,
            };
            if let (Some(color), Some(shape)) = (Color::from_name(color), Shape::from_name(shape)) {
                out.push(Object {
                    shape,
                    color,
                    cell: Cell { row, col },
                });
            }
        }
    }
    out
}

/// Parses a palette image back into a scene.
///
/// Per layout cell: the most frequent object colour is taken as the object
/// colour (cells where object colours cover less than 1/8 of the cell are
/// empty), and its pixel mask is matched against the rendered mask of every
/// shape by Hamming distance; ties go to the earlier shape. On rendered
/// images this is an exact inverse of [`render`].
pub fn parse_scene(img: &Image) -> Result<SceneSpec> {
    if let Some((x, y)) = img.first_non_palette() {
        return Err(Error::data(format!("non-palette pixel at ({x}, {y})")));
    }
    if img.width() != img.height() {
        return Err(Error::shape(format!(
            "parse expects a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let size = img.width();
    let tiles = check_size(size)?;
    let cell_px = size / GRID;
    let mut objects = Vec::new();
    for cell in Cell::ALL {
        let (x0, y0) = (cell.col * cell_px, cell.row * cell_px);
        let mut counts = [0usize; 4];
        for y in y0..y0 + cell_px {
            for x in x0..x0 + cell_px {
                if let Some(c) = Color::from_rgb(img.get(x, y)) {
                    counts[c as usize] += 1;
                }
            }
        }
        let (best, &count) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if count * 8 < cell_px * cell_px {
            continue;
        }
        let color = Color::ALL[best];
        let shape = Shape::ALL
            .into_iter()
            .min_by_key(|&shape| {
                let mut dist = 0usize;
                for y in 0..cell_px {
                    for x in 0..cell_px {
                        let want = shape.covers(tiles, y / TILE, x / TILE);
                        let have = img.get(x0 + x, y0 + y) == color.rgb();
                        dist += (want != have) as usize;
                    }
                }
                dist
            })
            .unwrap();
        objects.push(Object { shape, color, cell });
    }
    SceneSpec::new(objects)
}

/// One dataset manifest line: `seed<TAB>caption`.
pub fn manifest_line(seed: u64) -> String {
    format!("{seed}\t{}", caption_of(&gen_scene(seed)))
}
