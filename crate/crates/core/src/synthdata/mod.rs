//! Deterministic grid-world scenes with a single added or removed object.
//!
//! A scene is a `grid × grid` board of cells; each cell holds at most one
//! filled shape drawn with a 2px margin and no anti-aliasing. Pairs are fully
//! determined by `(seed, kind, params)`.

mod captions;
mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};

pub use captions::{
    captions_for, parse_caption, ParsedCaption, Vocab, ADD_TEMPLATES, BOS, DROP_TEMPLATES, EOS,
    NO_CHANGE_TEMPLATES, PAD, SLOT,
};
pub use io::{read_dataset, read_image, read_manifest, ChangeRecord, write_dataset, write_image, ManifestRecord, IMAGE_MAGIC, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
        Color::Orange,
        Color::White,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.15],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Purple => [0.55, 0.1, 0.75],
            Color::Cyan => [0.1, 0.85, 0.9],
            Color::Orange => [1.0, 0.55, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Square,
    Circle,
    Triangle,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 3] = [ObjectShape::Square, ObjectShape::Circle, ObjectShape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ObjectShape::Square => "square",
            ObjectShape::Circle => "circle",
            ObjectShape::Triangle => "triangle",
        }
    }
}

pub const BACKGROUND: [f32; 3] = [0.4, 0.4, 0.4];

/// One filled shape occupying a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: ObjectShape,
    pub color: Color,
}

impl SceneObject {
    /// `"<color> <shape>"`, the caption slot filler.
    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Add,
    Remove,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Change {
    Add(SceneObject),
    Remove(SceneObject),
    None,
}

impl Change {
    pub fn kind(&self) -> ChangeKind {
        match self {
            Change::Add(_) => ChangeKind::Add,
            Change::Remove(_) => ChangeKind::Remove,
            Change::None => ChangeKind::None,
        }
    }

    pub fn object(&self) -> Option<&SceneObject> {
        match self {
            Change::Add(o) | Change::Remove(o) => Some(o),
            Change::None => None,
        }
    }

    pub fn is_change(&self) -> bool {
        !matches!(self, Change::None)
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[usize; 4]> for BBox {
    fn from(a: [usize; 4]) -> Self {
        BBox { x0: a[0], y0: a[1], x1: a[2], y1: a[3] }
    }
}

impl BBox {
    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Row-major `H × W × C` float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, channels: 3, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Tight bounds of the pixels where `self` and `other` differ.
    pub fn diff_bbox(&self, other: &Image) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.pixel(x, y) != other.pixel(x, y) {
                    let b = bb.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    b.x0 = b.x0.min(x);
                    b.y0 = b.y0.min(y);
                    b.x1 = b.x1.max(x + 1);
                    b.y1 = b.y1.max(y + 1);
                }
            }
        }
        bb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Geometry of generated scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneParams {
    pub grid: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { grid: 4, image_size: 64, patch_size: 8 }
    }
}

pub const OBJECT_MARGIN: usize = 2;

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(TabError::Generation(format!("grid must be >= 2, got {}", self.grid)));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TabError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size % self.grid != 0 || self.cell_size() <= 2 * OBJECT_MARGIN + 1 {
            return Err(TabError::Generation(format!(
                "image size {} cannot hold a {}x{} grid of objects",
                self.image_size, self.grid, self.grid
            )));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> usize {
        self.image_size / self.grid
    }

    /// Patches per side.
    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }
}

/// Two renderings, the change between them and the reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: u32,
    pub seed: u64,
    pub split: Split,
    pub image_a: Image,
    pub image_b: Image,
    pub change: Change,
    pub bbox: Option<BBox>,
    pub captions: Vec<String>,
}

/// Coverage mask of one object, in local cell coordinates (`size × size`).
fn shape_mask(shape: ObjectShape, size: usize) -> Vec<bool> {
    let c = size as f64 / 2.0;
    let r = size as f64 / 2.0;
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask[y * size + x] = match shape {
                ObjectShape::Square => true,
                ObjectShape::Circle => (px - c).powi(2) + (py - c).powi(2) <= r * r,
                ObjectShape::Triangle => {
                    let half_width = (y as f64 + 1.0) / size as f64 * r;
                    (px - c).abs() <= half_width
                }
            };
        }
    }
    mask
}

/// Draws `objects` over a flat background.
pub fn render(objects: &[SceneObject], params: &SceneParams) -> Image {
    let mut img = Image::filled(params.image_size, params.image_size, BACKGROUND);
    let cell = params.cell_size();
    let inner = cell - 2 * OBJECT_MARGIN;
    for obj in objects {
        let mask = shape_mask(obj.shape, inner);
        let (ox, oy) = (obj.col * cell + OBJECT_MARGIN, obj.row * cell + OBJECT_MARGIN);
        for y in 0..inner {
            for x in 0..inner {
                if mask[y * inner + x] {
                    img.set_pixel(ox + x, oy + y, obj.color.rgb());
                }
            }
        }
    }
    img
}

/// Tight pixel bounds of a single rendered object.
pub fn object_bbox(obj: &SceneObject, params: &SceneParams) -> BBox {
    let cell = params.cell_size();
    let inner = cell - 2 * OBJECT_MARGIN;
    let mask = shape_mask(obj.shape, inner);
    let (ox, oy) = (obj.col * cell + OBJECT_MARGIN, obj.row * cell + OBJECT_MARGIN);
    let mut b = BBox { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for y in 0..inner {
        for x in 0..inner {
            if mask[y * inner + x] {
                b.x0 = b.x0.min(ox + x);
                b.y0 = b.y0.min(oy + y);
                b.x1 = b.x1.max(ox + x + 1);
                b.y1 = b.y1.max(oy + y + 1);
            }
        }
    }
    b
}

fn random_object(rng: &mut ChaCha8Rng, row: usize, col: usize) -> SceneObject {
    SceneObject {
        row,
        col,
        shape: ObjectShape::ALL[rng.random_range(0..ObjectShape::ALL.len())],
        color: Color::ALL[rng.random_range(0..Color::ALL.len())],
    }
}

/// Generates one pair. Change pairs hold `1..grid²−1` base objects plus the changed one.
pub fn generate_pair(id: u32, seed: u64, kind: ChangeKind, params: &SceneParams) -> Result<ScenePair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = params.grid * params.grid;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let base_count = rng.random_range(1..cells);
    let base: Vec<SceneObject> = order[..base_count]
        .iter()
        .map(|&c| random_object(&mut rng, c / params.grid, c % params.grid))
        .collect();

    let (image_a, image_b, change, bbox) = match kind {
        ChangeKind::None => {
            let img = render(&base, params);
            (img.clone(), img, Change::None, None)
        }
        ChangeKind::Add | ChangeKind::Remove => {
            let free = order[base_count];
            let obj = random_object(&mut rng, free / params.grid, free % params.grid);
            let mut with = base.clone();
            with.push(obj);
            let without = render(&base, params);
            let with = render(&with, params);
            let bbox = object_bbox(&obj, params);
            if kind == ChangeKind::Add {
                (without, with, Change::Add(obj), Some(bbox))
            } else {
                (with, without, Change::Remove(obj), Some(bbox))
            }
        }
    };
    Ok(ScenePair { id, seed, split: Split::Train, image_a, image_b, captions: captions_for(&change), change, bbox })
}

/// Dataset composition and split proportions.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub pairs: usize,
    pub seed: u64,
    pub no_change_ratio: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub params: SceneParams,
}

impl DatasetSpec {
    pub fn new(pairs: usize, seed: u64, no_change_ratio: f64) -> Self {
        DatasetSpec { pairs, seed, no_change_ratio, val_fraction: 0.1, test_fraction: 0.2, params: SceneParams::default() }
    }
}

/// Generates a split dataset with `round(ratio · pairs)` no-change pairs.
///
/// Change pairs alternate add/remove. Each split receives the class ratio
/// independently, so every split is balanced to within one pair.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<ScenePair>> {
    if !(0.0..=1.0).contains(&spec.no_change_ratio) {
        return Err(TabError::Parameter(format!("no-change ratio {} outside [0,1]", spec.no_change_ratio)));
    }
    let n = spec.pairs;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test + n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Per-split kind lists keep each split balanced.
    let mut plan: Vec<(Split, ChangeKind)> = Vec::with_capacity(n);
    let mut assigned = 0usize;
    let mut prev_target = 0usize;
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        assigned += count;
        let target = (spec.no_change_ratio * assigned as f64).round() as usize;
        let k = target - prev_target;
        prev_target = target;
        let mut kinds: Vec<ChangeKind> = (0..count)
            .map(|i| {
                if i < k {
                    ChangeKind::None
                } else if (i - k) % 2 == 0 {
                    ChangeKind::Add
                } else {
                    ChangeKind::Remove
                }
            })
            .collect();
        kinds.shuffle(&mut rng);
        plan.extend(kinds.into_iter().map(|k| (split, k)));
    }

    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    plan.iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (&(split, kind), seed))| {
            let mut p = generate_pair(i as u32, seed, kind, &spec.params)?;
            p.split = split;
            Ok(p)
        })
        .collect()
}

/// Target `[CLS]` attention row derived from the changed-object box.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundtruthAttention {
    /// Patch entries, one-hot for change pairs, all zero otherwise.
    pub g: Vec<f32>,
    /// Target value of the `[CLS]` entry: 1 for no-change, 0 for change.
    pub cls_target: f32,
}

impl GroundtruthAttention {
    pub fn is_no_change(&self) -> bool {
        self.g.iter().all(|&v| v == 0.0)
    }

    /// Full `n+1` row with the `[CLS]` entry first.
    pub fn full_row(&self) -> Vec<f32> {
        let mut row = Vec::with_capacity(self.g.len() + 1);
        row.push(self.cls_target);
        row.extend_from_slice(&self.g);
        row
    }

    pub fn hot_patch(&self) -> Option<usize> {
        self.g.iter().position(|&v| v == 1.0)
    }
}

/// One-hot on the patch with the largest overlap with `bbox` (ties go to the
/// lowest row-major index); all zero when there is no box.
pub fn groundtruth_attention(bbox: Option<&BBox>, image_size: usize, patch_size: usize) -> GroundtruthAttention {
    let p = image_size / patch_size;
    let mut g = vec![0.0f32; p * p];
    let Some(bbox) = bbox else {
        return GroundtruthAttention { g, cls_target: 1.0 };
    };
    let mut best = (0usize, 0usize);
    for r in 0..p {
        for c in 0..p {
            let patch = BBox { x0: c * patch_size, y0: r * patch_size, x1: (c + 1) * patch_size, y1: (r + 1) * patch_size };
            let area = patch.intersection_area(bbox);
            if area > best.1 {
                best = (r * p + c, area);
            }
        }
    }
    g[best.0] = 1.0;
    GroundtruthAttention { g, cls_target: 0.0 }
}

impl ScenePair {
    pub fn groundtruth(&self, params: &SceneParams) -> GroundtruthAttention {
        groundtruth_attention(self.bbox.as_ref(), params.image_size, params.patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SceneParams {
        SceneParams::default()
    }

    #[test]
    fn no_change_pair_duplicates_rendering() {
        let p = generate_pair(0, 7, ChangeKind::None, &params()).unwrap();
        assert_eq!(p.image_a, p.image_b);
        assert!(p.bbox.is_none());
        assert_eq!(p.captions.len(), 9);
        assert!(p.captions.contains(&"there is no change".to_string()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_pair(3, 7, ChangeKind::Remove, &params()).unwrap();
        let b = generate_pair(3, 7, ChangeKind::Remove, &params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diff_mask_matches_bbox() {
        for seed in 0..50 {
            for kind in [ChangeKind::Add, ChangeKind::Remove] {
                let p = generate_pair(0, seed, kind, &params()).unwrap();
                assert_eq!(p.image_a.diff_bbox(&p.image_b), p.bbox, "seed {seed}");
            }
        }
    }

    #[test]
    fn empty_scene_is_constant_background() {
        let img = render(&[], &params());
        assert!(img.data.chunks(3).all(|px| px == BACKGROUND));
    }

    #[test]
    fn square_fills_cell_minus_margin() {
        let obj = SceneObject { row: 0, col: 0, shape: ObjectShape::Square, color: Color::Red };
        let img = render(&[obj], &params());
        for y in 0..64 {
            for x in 0..64 {
                let inside = (2..14).contains(&x) && (2..14).contains(&y);
                assert_eq!(img.pixel(x, y) != BACKGROUND, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn triangle_smaller_than_square() {
        let count = |shape| {
            let obj = SceneObject { row: 1, col: 2, shape, color: Color::Blue };
            let img = render(&[obj], &params());
            img.data.chunks(3).filter(|px| *px != BACKGROUND).count()
        };
        assert_eq!(count(ObjectShape::Square), 144);
        assert!(count(ObjectShape::Triangle) < count(ObjectShape::Square));
        assert!(count(ObjectShape::Circle) < count(ObjectShape::Square));
    }

    #[test]
    fn groundtruth_exact_patch() {
        let b = BBox { x0: 40, y0: 0, x1: 48, y1: 8 };
        let g = groundtruth_attention(Some(&b), 64, 8);
        assert_eq!(g.hot_patch(), Some(5));
        assert_eq!(g.g.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn groundtruth_majority_overlap() {
        // 10 px wide box: 6 px in patch 1, 4 px in patch 2
        let b = BBox { x0: 10, y0: 0, x1: 20, y1: 8 };
        assert_eq!(groundtruth_attention(Some(&b), 64, 8).hot_patch(), Some(1));
        let b = BBox { x0: 12, y0: 0, x1: 22, y1: 8 };
        assert_eq!(groundtruth_attention(Some(&b), 64, 8).hot_patch(), Some(2));
    }

    #[test]
    fn groundtruth_absent_box_is_zero() {
        let g = groundtruth_attention(None, 64, 8);
        assert!(g.is_no_change());
        assert_eq!(g.cls_target, 1.0);
        assert_eq!(g.full_row()[0], 1.0);
    }

    #[test]
    fn class_balance_holds() {
        for (n, r) in [(100, 0.5), (37, 0.3), (10, 0.5), (2000, 0.5)] {
            let pairs = generate_dataset(&DatasetSpec::new(n, 1, r)).unwrap();
            assert_eq!(pairs.len(), n);
            let none = pairs.iter().filter(|p| !p.change.is_change()).count();
            assert!((none as f64 / n as f64 - r).abs() <= 1.0 / n as f64, "n={n} r={r} none={none}");
        }
    }

    #[test]
    fn bad_grid_is_rejected() {
        let p = SceneParams { grid: 1, ..params() };
        assert!(matches!(generate_pair(0, 1, ChangeKind::Add, &p), Err(TabError::Generation(_))));
    }
}
