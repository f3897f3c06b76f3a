//! Synthetic shape scenes with exact box annotations, and their on-disk
//! dataset layout.
//!
//! A dataset directory holds `annotations.jsonl` (one scene per line) and an
//! `images/` folder of raw blobs named by the `image` field of each line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_blob, write_blob};
use crate::matching::Targets;
use crate::pyramid::{Image, MAX_STRIDE};

pub const NUM_CLASSES: usize = 3;
pub const MAX_OBJECTS: usize = 12;
/// Smallest allowed annotated side, in pixels.
pub const MIN_SIDE_PX: usize = 2;
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Rectangle = 0,
    Circle = 1,
    Triangle = 2,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rectangle, Shape::Circle, Shape::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }
}

/// Object size bands by box area as a fraction of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleBand {
    Small,
    Medium,
    Large,
}

impl ScaleBand {
    pub const SMALL_MAX: f64 = 0.01;
    pub const MEDIUM_MAX: f64 = 0.09;

    pub fn of_area(fraction: f64) -> ScaleBand {
        if fraction < Self::SMALL_MAX {
            ScaleBand::Small
        } else if fraction < Self::MEDIUM_MAX {
            ScaleBand::Medium
        } else {
            ScaleBand::Large
        }
    }

    /// Band of a normalized `(cx, cy, w, h)` box.
    pub fn of_box(b: &[f64; 4]) -> ScaleBand {
        Self::of_area(b[2] * b[3])
    }
}

/// Relative frequencies of the small, medium and large bands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for ScaleMix {
    fn default() -> Self {
        ScaleMix {
            small: 0.4,
            medium: 0.35,
            large: 0.25,
        }
    }
}

impl ScaleMix {
    pub fn validate(&self) -> Result<()> {
        let w = [self.small, self.medium, self.large];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("scale mix weights must be non-negative with a positive sum, got {w:?}")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ScaleBand {
        let total = self.small + self.medium + self.large;
        let u = rng.gen_range(0.0..total);
        if u < self.small {
            ScaleBand::Small
        } else if u < self.small + self.medium {
            ScaleBand::Medium
        } else {
            ScaleBand::Large
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneOptions {
    pub size: usize,
    pub scale_mix: ScaleMix,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            size: 128,
            scale_mix: ScaleMix::default(),
            min_objects: 1,
            max_objects: 4,
        }
    }
}

impl SceneOptions {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % MAX_STRIDE != 0 {
            return Err(Error::Config(format!("scene size must be a positive multiple of {MAX_STRIDE}, got {}", self.size)));
        }
        if self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object count range {}..={} must satisfy min ≤ max ≤ {MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        self.scale_mix.validate()
    }
}

/// Boxes are normalized `(cx, cy, w, h)`; `classes[i]` is the shape id of
/// `boxes[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl SceneAnnotation {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn targets(&self) -> Targets {
        Targets {
            boxes: self.boxes.clone(),
            classes: self.classes.clone(),
        }
    }

    /// Annotation of the left-right mirrored image.
    pub fn flipped(&self) -> SceneAnnotation {
        SceneAnnotation {
            boxes: self.boxes.iter().map(|b| [1.0 - b[0], b[1], b[2], b[3]]).collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Twelve fully saturated hues, 30° apart. Every entry has one channel at 0
/// and one at 1, so none can equal a gray background pixel.
fn palette() -> [[f32; 3]; 12] {
    let mut out = [[0.0; 3]; 12];
    for (k, c) in out.iter_mut().enumerate() {
        let h = k as f32 / 2.0;
        let sector = h.floor() as usize;
        let f = h - sector as f32;
        *c = match sector {
            0 => [1.0, f, 0.0],
            1 => [1.0 - f, 1.0, 0.0],
            2 => [0.0, 1.0, f],
            3 => [0.0, 1.0 - f, 1.0],
            4 => [f, 0.0, 1.0],
            _ => [1.0, 0.0, 1.0 - f],
        };
    }
    out
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps_padded(&self, o: &Rect, pad: usize) -> bool {
        self.x0 < o.x1 + pad && o.x0 < self.x1 + pad && self.y0 < o.y1 + pad && o.y0 < self.y1 + pad
    }
}

/// Rasterizes `shape` inside `r`; pixel centers decide coverage.
fn shape_mask(shape: Shape, r: Rect, apex: f64) -> Vec<(usize, usize)> {
    let (w, h) = ((r.x1 - r.x0) as f64, (r.y1 - r.y0) as f64);
    let mut out = Vec::new();
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let (px, py) = (x as f64 + 0.5 - r.x0 as f64, y as f64 + 0.5 - r.y0 as f64);
            let inside = match shape {
                Shape::Rectangle => true,
                Shape::Circle => {
                    let (dx, dy) = ((px - w / 2.0) / (w / 2.0), (py - h / 2.0) / (h / 2.0));
                    dx * dx + dy * dy <= 1.0
                }
                Shape::Triangle => {
                    // Apex on the top edge at `apex·w`, base along the bottom.
                    let v = [(apex * w, 0.0), (w, h), (0.0, h)];
                    (0..3).all(|k| {
                        let (a, b) = (v[k], v[(k + 1) % 3]);
                        (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0) >= 0.0
                    })
                }
            };
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

fn tight_box(mask: &[(usize, usize)]) -> Option<Rect> {
    let x0 = mask.iter().map(|p| p.0).min()?;
    let x1 = mask.iter().map(|p| p.0).max()? + 1;
    let y0 = mask.iter().map(|p| p.1).min()?;
    let y1 = mask.iter().map(|p| p.1).max()? + 1;
    Some(Rect { x0, y0, x1, y1 })
}

/// Textured gray background: 8×8 blocks of random level plus per-pixel
/// jitter, with values in `[0.25, 0.75]`.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let blocks = size.div_ceil(8);
    let levels: Vec<f32> = (0..blocks * blocks).map(|_| rng.gen_range(0.3f32..0.6)).collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let g = levels[(y / 8) * blocks + x / 8] + rng.gen_range(0.0f32..0.15);
            data.extend_from_slice(&[g, g, g]);
        }
    }
    data
}

/// Area-fraction range of each band for a `size×size` image. The small band
/// starts at a 6-pixel square so objects stay visible at stride 4.
fn band_range(band: ScaleBand, size: usize) -> (f64, f64) {
    let floor = 36.0 / (size * size) as f64;
    match band {
        ScaleBand::Small => (floor.min(0.5 * ScaleBand::SMALL_MAX), ScaleBand::SMALL_MAX),
        ScaleBand::Medium => (ScaleBand::SMALL_MAX, ScaleBand::MEDIUM_MAX),
        ScaleBand::Large => (ScaleBand::MEDIUM_MAX, 0.25),
    }
}

/// Renders one scene. Objects never overlap (a one-pixel gap separates
/// their boxes), and each annotated box is the tight bounding box of the
/// pixels painted for it, so it falls in the band it was drawn from.
pub fn generate_scene(seed: u64, opts: &SceneOptions) -> Result<(Image, SceneAnnotation)> {
    opts.validate()?;
    let size = opts.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = background(&mut rng, size);
    let count = rng.gen_range(opts.min_objects..=opts.max_objects);
    let mut colors = palette().to_vec();
    let mut placed: Vec<Rect> = Vec::new();
    let mut ann = SceneAnnotation::default();

    for _ in 0..count {
        let shape = Shape::ALL[rng.gen_range(0..3)];
        let band = opts.scale_mix.draw(&mut rng);
        let (lo, hi) = band_range(band, size);
        // A crowded scene may have no room left; the object is then dropped.
        for _attempt in 0..50 {
            let area = (rng.gen_range(lo.ln()..hi.ln())).exp() * (size * size) as f64;
            let aspect = if shape == Shape::Circle { 1.0 } else { rng.gen_range(0.6f64..1.6) };
            let w = ((area * aspect).sqrt().round() as usize).clamp(MIN_SIDE_PX, size);
            let h = ((area / aspect).sqrt().round() as usize).clamp(MIN_SIDE_PX, size);
            let apex = rng.gen_range(0.0..1.0);
            let x0 = rng.gen_range(0..=size - w);
            let y0 = rng.gen_range(0..=size - h);
            let rect = Rect { x0, y0, x1: x0 + w, y1: y0 + h };
            if placed.iter().any(|p| p.overlaps_padded(&rect, 1)) {
                continue;
            }
            let mask = shape_mask(shape, rect, apex);
            let Some(tight) = tight_box(&mask) else { continue };
            let (tw, th) = (tight.x1 - tight.x0, tight.y1 - tight.y0);
            let fraction = (tw * th) as f64 / (size * size) as f64;
            if tw < MIN_SIDE_PX || th < MIN_SIDE_PX || ScaleBand::of_area(fraction) != band {
                continue;
            }
            let color = colors.swap_remove(rng.gen_range(0..colors.len()));
            for &(x, y) in &mask {
                data[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
            let s = size as f64;
            ann.boxes.push([
                (tight.x0 + tight.x1) as f64 / (2.0 * s),
                (tight.y0 + tight.y1) as f64 / (2.0 * s),
                tw as f64 / s,
                th as f64 / s,
            ]);
            ann.classes.push(shape.class());
            placed.push(rect);
            break;
        }
    }
    Ok((Image::new(size, size, data)?, ann))
}

/// Per-scene seed: scenes stay reproducible individually and independent of
/// how many are generated together.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

pub fn generate_scenes(n: usize, seed: u64, opts: &SceneOptions) -> Result<Vec<(Image, SceneAnnotation)>> {
    opts.validate()?;
    (0..n).into_par_iter().map(|i| generate_scene(scene_seed(seed, i), opts)).collect()
}

/// One annotations line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Record {
    pub fn annotation(&self) -> SceneAnnotation {
        SceneAnnotation {
            boxes: self.boxes.clone(),
            classes: self.classes.clone(),
        }
    }
}

/// A dataset on disk. Images load on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        read_blob(&self.image_path(i))
    }

    pub fn annotation(&self, i: usize) -> SceneAnnotation {
        self.records[i].annotation()
    }

    /// Largest class id present plus one (0 when there are no objects).
    pub fn class_count(&self) -> usize {
        self.records.iter().flat_map(|r| r.classes.iter()).map(|&c| c + 1).max().unwrap_or(0)
    }
}

pub fn write_dataset(root: &Path, scenes: &[(Image, SceneAnnotation)]) -> Result<Dataset> {
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, (img, ann)) in scenes.iter().enumerate() {
        let name = format!("{IMAGES_DIR}/{i:06}.imfa");
        write_blob(&root.join(&name), img)?;
        records.push(Record {
            image: name,
            boxes: ann.boxes.clone(),
            classes: ann.classes.clone(),
        });
    }
    write_index(root, &records)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

fn write_index(root: &Path, records: &[Record]) -> Result<()> {
    let path = root.join(ANNOTATIONS_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

/// Reads the annotation index. Blank lines are skipped; each other line
/// must be a valid record with in-range boxes.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(ANNOTATIONS_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), n + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.boxes.len() != rec.classes.len() {
            return Err(bad(format!("{} boxes but {} classes", rec.boxes.len(), rec.classes.len())));
        }
        if rec.boxes.len() > MAX_OBJECTS {
            return Err(bad(format!("{} objects exceed the limit of {MAX_OBJECTS}", rec.boxes.len())));
        }
        for b in &rec.boxes {
            let inside = b[2] > 0.0
                && b[3] > 0.0
                && b[0] - b[2] / 2.0 >= -1e-9
                && b[0] + b[2] / 2.0 <= 1.0 + 1e-9
                && b[1] - b[3] / 2.0 >= -1e-9
                && b[1] + b[3] / 2.0 <= 1.0 + 1e-9;
            if !inside {
                return Err(bad(format!("box {b:?} is degenerate or leaves the image")));
            }
        }
        records.push(rec);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

/// Generates `n` scenes and writes them under `root`, a chunk at a time so
/// that memory stays bounded for large sets.
pub fn generate_dataset(root: &Path, n: usize, seed: u64, opts: &SceneOptions) -> Result<Dataset> {
    opts.validate()?;
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let scenes: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| generate_scene(scene_seed(seed, i), opts))
            .collect::<Result<_>>()?;
        for (i, (img, ann)) in (start..end).zip(scenes) {
            let name = format!("{IMAGES_DIR}/{i:06}.imfa");
            write_blob(&root.join(&name), &img)?;
            records.push(Record {
                image: name,
                boxes: ann.boxes,
                classes: ann.classes,
            });
        }
    }
    write_index(root, &records)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}
