//! Synthetic shapes+captions dataset.
//!
//! Each sample is a small RGB image of 1–3 non-overlapping colored shapes on
//! a dark noisy background, with three mutually consistent annotations built
//! from the same class set: a templated caption, a per-pixel segmentation
//! mask and per-cell detection labels. Shape geometry is rasterized with
//! integer arithmetic only and pixel values live on the 1/255 grid, so a
//! `(spec, seed)` pair reproduces the dataset byte-for-byte on any platform.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::seed::{child_seed, rng_from_seed, sample_seed};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

pub const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];
pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];
/// Foreground classes 1..=9 plus background 0.
pub const NUM_CLASSES: usize = 10;
const BASE_COLORS: [[i16; 3]; 3] = [[205, 45, 45], [45, 190, 55], [50, 70, 210]];

/// Fraction of a grid cell that must be covered by one class for the cell to
/// count as an object (12 of 64 pixels at the default cell size).
const CELL_COVER_NUM: usize = 3;
const CELL_COVER_DEN: usize = 16;

/// Closed caption vocabulary, in token-id order.
pub fn vocabulary() -> Vec<String> {
    let mut v = vec!["a".to_string(), "and".to_string()];
    v.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
    v.extend(SHAPE_NAMES.iter().map(|s| s.to_string()));
    v
}

/// Whitespace tokenization against the closed vocabulary.
pub fn tokenize(caption: &str, vocab: &[String]) -> Result<Vec<usize>> {
    caption
        .split_whitespace()
        .map(|tok| {
            vocab
                .iter()
                .position(|v| v == tok)
                .ok_or_else(|| Error::InvalidArgument(format!("token `{tok}` not in vocabulary")))
        })
        .collect()
}

/// A foreground class id in 1..=9 encoding a (color, shape) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShapeClass(pub u8);

impl ShapeClass {
    pub fn from_parts(color: usize, shape: usize) -> Self {
        Self((color * 3 + shape + 1) as u8)
    }

    pub fn color_index(self) -> usize {
        ((self.0 - 1) / 3) as usize
    }

    pub fn shape_index(self) -> usize {
        ((self.0 - 1) % 3) as usize
    }

    /// Human-readable phrase, e.g. `red circle`.
    pub fn phrase(self) -> String {
        format!(
            "{} {}",
            COLOR_NAMES[self.color_index()],
            SHAPE_NAMES[self.shape_index()]
        )
    }
}

/// Caption for a set of classes, ordered by ascending class id.
pub fn caption_for(classes: &[ShapeClass]) -> String {
    let phrases: Vec<String> = classes.iter().map(|c| format!("a {}", c.phrase())).collect();
    phrases.join(" and ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub grid_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 48,
            grid_size: 6,
            min_shapes: 1,
            max_shapes: 3,
            train: 1600,
            val: 120,
            test: 80,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::InvalidSpec {
                field: "image_size",
                reason: format!("{} is too small to place shapes", self.image_size),
            });
        }
        if self.image_size % 8 != 0 {
            return Err(Error::InvalidSpec {
                field: "image_size",
                reason: "must be divisible by 8 (three 2x pooling stages)".into(),
            });
        }
        if self.grid_size * 8 != self.image_size {
            return Err(Error::InvalidSpec {
                field: "grid_size",
                reason: format!(
                    "must equal image_size / 8 = {} (detection cells align with the backbone grid)",
                    self.image_size / 8
                ),
            });
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidSpec {
                field: "min_shapes",
                reason: "need 1 <= min_shapes <= max_shapes".into(),
            });
        }
        if self.max_shapes > 3 {
            return Err(Error::InvalidSpec {
                field: "max_shapes",
                reason: "at most 3 shapes per image (distinct classes with margins)".into(),
            });
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::InvalidSpec {
                field: "train",
                reason: "train and test splits must be non-empty".into(),
            });
        }
        let pool = caption_unique_class_sets(self.min_shapes, self.max_shapes).len();
        if self.test > pool {
            return Err(Error::InvalidSpec {
                field: "test",
                reason: format!(
                    "at most {pool} test samples: the test bank needs caption-unique class sets"
                ),
            });
        }
        Ok(())
    }
}

/// Per-cell detection label: objectness bit and class id (0 when empty).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellLabel {
    pub objectness: u8,
    pub class: u8,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: u64,
    pub image: ImageTensor,
    pub caption: String,
    /// H×W class ids, 0 = background.
    pub seg_mask: Array2<u8>,
    /// grid×grid labels derived from the mask.
    pub cell_labels: Array2<CellLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// All class sets of the allowed sizes whose captions are pairwise distinct
/// as token bags (an embedding-average text encoder cannot tell bag-equal
/// captions apart, so the retrieval bank must not contain such pairs).
/// Enumeration order is lexicographic in class ids, so the pool is a pure
/// function of the size range.
pub fn caption_unique_class_sets(min_shapes: usize, max_shapes: usize) -> Vec<Vec<ShapeClass>> {
    let mut seen_bags: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut pool = Vec::new();
    let all: Vec<ShapeClass> = (1..=9).map(ShapeClass).collect();
    let mut consider = |set: Vec<ShapeClass>| {
        let caption = caption_for(&set);
        let mut bag: Vec<String> = caption.split_whitespace().map(|s| s.to_string()).collect();
        bag.sort();
        if seen_bags.insert(bag) {
            pool.push(set);
        }
    };
    for size in min_shapes..=max_shapes.min(all.len()) {
        enumerate_subsets(&all, size, &mut consider);
    }
    pool
}

fn enumerate_subsets(items: &[ShapeClass], size: usize, f: &mut impl FnMut(Vec<ShapeClass>)) {
    fn rec(
        items: &[ShapeClass],
        size: usize,
        start: usize,
        acc: &mut Vec<ShapeClass>,
        f: &mut impl FnMut(Vec<ShapeClass>),
    ) {
        if acc.len() == size {
            f(acc.clone());
            return;
        }
        for i in start..items.len() {
            acc.push(items[i]);
            rec(items, size, i + 1, acc, f);
            acc.pop();
        }
    }
    rec(items, size, 0, &mut Vec::new(), f);
}

/// Deterministically generate all three splits from the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;

    // The test split draws its class sets from the caption-unique pool so the
    // retrieval bank has exactly one matching caption per image.
    let mut pool = caption_unique_class_sets(spec.min_shapes, spec.max_shapes);
    let mut pool_rng = rng_from_seed(child_seed(spec.seed, "dataset:test-pool"));
    pool.shuffle(&mut pool_rng);

    let gen_split = |split: Split, count: usize| -> Result<Vec<SyntheticSample>> {
        (0..count)
            .map(|i| {
                let seed = sample_seed(spec.seed, &format!("dataset:{}", split.name()), i as u64);
                let classes = match split {
                    Split::Test => pool[i].clone(),
                    _ => sample_class_set(spec, &mut rng_from_seed(child_seed(seed, "classes"))),
                };
                generate_sample(spec, i as u64, &classes, seed)
            })
            .collect()
    };

    Ok(Dataset {
        spec: *spec,
        train: gen_split(Split::Train, spec.train)?,
        val: gen_split(Split::Val, spec.val)?,
        test: gen_split(Split::Test, spec.test)?,
    })
}

fn sample_class_set(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<ShapeClass> {
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut all: Vec<ShapeClass> = (1..=9).map(ShapeClass).collect();
    all.shuffle(rng);
    let mut chosen: Vec<ShapeClass> = all.into_iter().take(count).collect();
    chosen.sort();
    chosen
}

struct PlacedShape {
    cy: i64,
    cx: i64,
    r: i64,
}

fn generate_sample(
    spec: &DatasetSpec,
    id: u64,
    classes: &[ShapeClass],
    seed: u64,
) -> Result<SyntheticSample> {
    let n = spec.image_size;
    let mut rng = rng_from_seed(child_seed(seed, "pixels"));

    // Background: dark random color, one draw per channel.
    let bg: [i16; 3] = [
        rng.gen_range(15..=55),
        rng.gen_range(15..=55),
        rng.gen_range(15..=55),
    ];
    let mut img: Array3<i16> = Array3::from_shape_fn((n, n, 3), |(_, _, c)| bg[c]);
    let mut mask: Array2<u8> = Array2::zeros((n, n));

    // Place all shapes first; if the layout dead-ends, restart placement.
    let mut placed: Vec<PlacedShape> = Vec::new();
    for restart in 0..32 {
        placed.clear();
        let ok = classes
            .iter()
            .all(|_| match place_shape(spec, &placed, &mut rng) {
                Ok(shape) => {
                    placed.push(shape);
                    true
                }
                Err(_) => false,
            });
        if ok {
            break;
        }
        if restart == 31 {
            return Err(Error::InvalidSpec {
                field: "image_size",
                reason: "could not place non-overlapping shapes".into(),
            });
        }
    }

    for (&class, shape) in classes.iter().zip(placed.iter()) {
        let jitter: [i16; 3] = [
            rng.gen_range(-25..=25),
            rng.gen_range(-25..=25),
            rng.gen_range(-25..=25),
        ];
        let base = BASE_COLORS[class.color_index()];
        let color = [
            (base[0] + jitter[0]).clamp(0, 255),
            (base[1] + jitter[1]).clamp(0, 255),
            (base[2] + jitter[2]).clamp(0, 255),
        ];
        rasterize(
            &mut img,
            &mut mask,
            class,
            shape.cy,
            shape.cx,
            shape.r,
            color,
        );
    }

    // Per-pixel noise after all shapes, then clamp to u8 range.
    let mut data = Array3::zeros((n, n, 3));
    for idx in ndarray::indices((n, n, 3)) {
        let noisy = (img[idx] + rng.gen_range(-6..=6)).clamp(0, 255);
        data[idx] = f64::from(noisy) / 255.0;
    }

    let cell_labels = derive_cell_labels(&mask, spec.grid_size);
    Ok(SyntheticSample {
        id,
        image: ImageTensor::new(data)?,
        caption: caption_for(classes),
        seg_mask: mask,
        cell_labels,
    })
}

fn place_shape(
    spec: &DatasetSpec,
    placed: &[PlacedShape],
    rng: &mut ChaCha8Rng,
) -> Result<PlacedShape> {
    let n = spec.image_size as i64;
    for attempt in 0..400 {
        // Shrink radius range if placement is congested.
        let r_max = if attempt < 200 { 10 } else { 7 };
        let r = rng.gen_range(6..=r_max);
        let lo = r + 1;
        let hi = n - r - 2;
        if hi < lo {
            return Err(Error::InvalidSpec {
                field: "image_size",
                reason: "image too small for the shape radius range".into(),
            });
        }
        let cy = rng.gen_range(lo..=hi);
        let cx = rng.gen_range(lo..=hi);
        let clear = placed.iter().all(|p| {
            let sep = (cy - p.cy).abs().max((cx - p.cx).abs());
            sep >= r + p.r + 2
        });
        if clear {
            return Ok(PlacedShape { cy, cx, r });
        }
    }
    Err(Error::InvalidSpec {
        field: "image_size",
        reason: "could not place non-overlapping shapes".into(),
    })
}

/// Integer point-in-shape tests. Circles use the squared-radius test,
/// squares the L∞ box, triangles an apex-up integer half-width test.
fn rasterize(
    img: &mut Array3<i16>,
    mask: &mut Array2<u8>,
    class: ShapeClass,
    cy: i64,
    cx: i64,
    r: i64,
    color: [i16; 3],
) {
    let n = mask.dim().0 as i64;
    for y in (cy - r).max(0)..=(cy + r).min(n - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(n - 1) {
            let dy = y - cy;
            let dx = x - cx;
            let inside = match class.shape_index() {
                0 => dy * dy + dx * dx <= r * r,
                1 => dy.abs() <= r && dx.abs() <= r,
                _ => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            };
            if inside {
                let (yu, xu) = (y as usize, x as usize);
                mask[[yu, xu]] = class.0;
                for c in 0..3 {
                    img[[yu, xu, c]] = color[c];
                }
            }
        }
    }
}

/// A cell is an object cell when one class covers at least 3/16 of it;
/// ties break toward the lowest class id.
pub fn derive_cell_labels(mask: &Array2<u8>, grid: usize) -> Array2<CellLabel> {
    let n = mask.dim().0;
    let cell = n / grid;
    let threshold = cell * cell * CELL_COVER_NUM / CELL_COVER_DEN;
    Array2::from_shape_fn((grid, grid), |(gy, gx)| {
        let mut counts = [0usize; NUM_CLASSES];
        for y in gy * cell..(gy + 1) * cell {
            for x in gx * cell..(gx + 1) * cell {
                counts[mask[[y, x]] as usize] += 1;
            }
        }
        let (best_class, best_count) = (1..NUM_CLASSES)
            .map(|c| (c, counts[c]))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap_or((0, 0));
        if best_count >= threshold {
            CellLabel {
                objectness: 1,
                class: best_class as u8,
            }
        } else {
            CellLabel {
                objectness: 0,
                class: 0,
            }
        }
    })
}

/// Classes present in a segmentation mask, ascending.
pub fn classes_in_mask(mask: &Array2<u8>) -> Vec<ShapeClass> {
    let mut present: BTreeSet<u8> = BTreeSet::new();
    for &v in mask.iter() {
        if v > 0 {
            present.insert(v);
        }
    }
    present.into_iter().map(ShapeClass).collect()
}

// ---------------------------------------------------------------------------
// Persistence: PNG images/masks plus one JSON-lines annotation file per split.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    id: u64,
    caption: String,
    image: String,
    mask: String,
    cells: Vec<(u8, u8)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    spec: DatasetSpec,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let split_dir = dir.join(split.name());
        fs::create_dir_all(&split_dir)?;
        let mut jsonl = Vec::new();
        for sample in dataset.split(split) {
            let img_rel = format!("{}/img_{:05}.png", split.name(), sample.id);
            let mask_rel = format!("{}/mask_{:05}.png", split.name(), sample.id);
            sample.image.save_png(&dir.join(&img_rel))?;
            save_mask_png(&sample.seg_mask, &dir.join(&mask_rel))?;
            let row = AnnotationRow {
                id: sample.id,
                caption: sample.caption.clone(),
                image: img_rel,
                mask: mask_rel,
                cells: sample
                    .cell_labels
                    .iter()
                    .map(|l| (l.objectness, l.class))
                    .collect(),
            };
            jsonl.extend_from_slice(serde_json::to_string(&row)?.as_bytes());
            jsonl.push(b'\n');
        }
        fs::write(dir.join(format!("{}.jsonl", split.name())), jsonl)?;
    }
    let manifest = DatasetManifest {
        format_version: 1,
        spec: dataset.spec,
    };
    let mut f = fs::File::create(dir.join("dataset.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let load_split = |split: Split| -> Result<Vec<SyntheticSample>> {
        let file = fs::File::open(dir.join(format!("{}.jsonl", split.name())))?;
        let mut samples = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let row: AnnotationRow = serde_json::from_str(&line?)?;
            let image = ImageTensor::load_png(&dir.join(&row.image))?;
            let seg_mask = load_mask_png(&dir.join(&row.mask))?;
            let grid = manifest.spec.grid_size;
            let cell_labels = Array2::from_shape_vec(
                (grid, grid),
                row.cells
                    .iter()
                    .map(|&(objectness, class)| CellLabel { objectness, class })
                    .collect(),
            )
            .map_err(|_| Error::Checkpoint("cell label grid mismatch".into()))?;
            samples.push(SyntheticSample {
                id: row.id,
                image,
                caption: row.caption,
                seg_mask,
                cell_labels,
            });
        }
        Ok(samples)
    };
    Ok(Dataset {
        spec: manifest.spec,
        train: load_split(Split::Train)?,
        val: load_split(Split::Val)?,
        test: load_split(Split::Test)?,
    })
}

fn save_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().copied().collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)?;
    Ok(())
}

fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array2::from_shape_vec((h, w), img.into_raw())
        .map_err(|_| Error::Checkpoint("mask dimensions corrupt".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            train: 40,
            val: 8,
            test: 12,
            seed: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn caption_matches_mask_classes() {
        let ds = generate_dataset(&tiny_spec()).unwrap();
        for sample in ds.train.iter().chain(ds.test.iter()) {
            let present = classes_in_mask(&sample.seg_mask);
            assert_eq!(sample.caption, caption_for(&present), "id {}", sample.id);
        }
    }

    #[test]
    fn single_shape_sample_names_exactly_one_class() {
        let spec = DatasetSpec {
            max_shapes: 1,
            test: 6,
            ..tiny_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        let sample = &ds.train[0];
        let present = classes_in_mask(&sample.seg_mask);
        assert_eq!(present.len(), 1);
        assert_eq!(sample.caption, format!("a {}", present[0].phrase()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&tiny_spec()).unwrap();
        let b = generate_dataset(&tiny_spec()).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.seg_mask, y.seg_mask);
            assert_eq!(x.caption, y.caption);
        }
        let c = generate_dataset(&DatasetSpec {
            seed: 4,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a.train[0].image.data(), c.train[0].image.data());
    }

    #[test]
    fn class_frequencies_are_roughly_uniform() {
        let spec = DatasetSpec {
            train: 1000,
            val: 1,
            test: 1,
            seed: 9,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let mut counts = [0usize; 9];
        let mut total = 0usize;
        for sample in &ds.train {
            for class in classes_in_mask(&sample.seg_mask) {
                counts[class.0 as usize - 1] += 1;
                total += 1;
            }
        }
        let mean = total as f64 / 9.0;
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - mean).abs() / mean;
            assert!(dev <= 0.30, "class {} count {} vs mean {:.1}", i + 1, c, mean);
        }
    }

    #[test]
    fn test_split_captions_are_bag_unique() {
        let ds = generate_dataset(&tiny_spec()).unwrap();
        let mut bags = BTreeSet::new();
        for sample in &ds.test {
            let mut bag: Vec<&str> = sample.caption.split_whitespace().collect();
            bag.sort();
            assert!(bags.insert(bag), "duplicate bag for {}", sample.caption);
        }
    }

    #[test]
    fn caption_unique_pool_is_stable() {
        let pool = caption_unique_class_sets(1, 3);
        // 9 singletons + 27 pairs + 55 triples survive bag dedup.
        assert_eq!(pool.len(), 91);
        let again = caption_unique_class_sets(1, 3);
        assert_eq!(pool, again);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut spec = tiny_spec();
        spec.image_size = 16;
        spec.grid_size = 2;
        assert!(matches!(
            generate_dataset(&spec),
            Err(Error::InvalidSpec { field: "image_size", .. })
        ));

        let mut spec = tiny_spec();
        spec.grid_size = 5;
        assert!(generate_dataset(&spec).is_err());

        let mut spec = tiny_spec();
        spec.test = 5000;
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn cell_labels_cover_solid_shapes() {
        let ds = generate_dataset(&tiny_spec()).unwrap();
        // Every object cell's class must be present in the mask.
        for sample in &ds.train {
            let present = classes_in_mask(&sample.seg_mask);
            for label in sample.cell_labels.iter() {
                if label.objectness == 1 {
                    assert!(present.contains(&ShapeClass(label.class)));
                } else {
                    assert_eq!(label.class, 0);
                }
            }
        }
        // And shapes are large enough that most samples have an object cell.
        let with_objects = ds
            .train
            .iter()
            .filter(|s| s.cell_labels.iter().any(|l| l.objectness == 1))
            .count();
        assert!(with_objects >= ds.train.len() * 9 / 10);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DatasetSpec {
            train: 4,
            val: 2,
            test: 3,
            seed: 5,
            ..DatasetSpec::default()
        })
        .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, ds.spec);
        for (a, b) in ds.test.iter().zip(back.test.iter()) {
            assert_eq!(a.image.max_abs_diff(&b.image), 0.0);
            assert_eq!(a.seg_mask, b.seg_mask);
            assert_eq!(a.cell_labels, b.cell_labels);
            assert_eq!(a.caption, b.caption);
        }
    }

    #[test]
    fn tokenizer_rejects_unknown_tokens() {
        let vocab = vocabulary();
        assert!(tokenize("a red circle", &vocab).is_ok());
        assert!(tokenize("a purple circle", &vocab).is_err());
    }
}
