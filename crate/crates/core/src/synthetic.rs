//! Procedural "toyscapes": street-like scenes with an exact class mask, plus
//! a loader for external paired PNG datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CamsegError, Result};
use crate::palette::{self, ClassMap, Palette};
use crate::seed::{derive_rng, Rng};

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const BUILDING: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const POLE: u8 = 5;
pub const CAR: u8 = 6;
pub const PERSON: u8 = 7;
pub const NUM_CLASSES: usize = 8;

const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "sky",
    "road",
    "sidewalk",
    "building",
    "vegetation",
    "pole",
    "car",
    "person",
];

/// RGB appearance of each class before texturing.
const APPEARANCE: [[u8; 3]; NUM_CLASSES] = [
    [130, 180, 235],
    [80, 80, 85],
    [170, 140, 150],
    [150, 95, 60],
    [50, 140, 40],
    [235, 215, 50],
    [210, 30, 40],
    [240, 140, 210],
];

pub fn appearance_palette() -> Palette {
    Palette::new(
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        APPEARANCE.to_vec(),
    )
    .expect("appearance colors are distinct")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Peak-to-peak texture amplitude on the 0–255 scale. Half of it is a
    /// per-region shade, half is per-pixel noise.
    pub texture_amplitude: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            texture_amplitude: 40.0,
            min_objects: 1,
            max_objects: 6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(CamsegError::Config(format!(
                "scenes need at least 16x16 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(CamsegError::Config(format!(
                "object count range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=80.0).contains(&self.texture_amplitude) {
            return Err(CamsegError::Config(format!(
                "texture amplitude {} outside [0, 80]",
                self.texture_amplitude
            )));
        }
        Ok(())
    }
}

/// Mask plus a per-pixel region id used to give each region its own shade.
struct Canvas {
    h: usize,
    w: usize,
    mask: Vec<u8>,
    region: Vec<u16>,
    regions: u16,
}

impl Canvas {
    fn new_region(&mut self) -> u16 {
        self.regions += 1;
        self.regions
    }

    fn paint(&mut self, r: isize, c: isize, class: u8, region: u16) {
        if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w {
            let i = r as usize * self.w + c as usize;
            self.mask[i] = class;
            self.region[i] = region;
        }
    }

    fn rect(&mut self, top: isize, left: isize, bottom: isize, right: isize, class: u8) {
        let id = self.new_region();
        for r in top..bottom {
            for c in left..right {
                self.paint(r, c, class, id);
            }
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, radius: f64, class: u8) {
        let id = self.new_region();
        let r0 = (cy - radius).floor() as isize;
        let c0 = (cx - radius).floor() as isize;
        for r in r0..=(cy + radius).ceil() as isize {
            for c in c0..=(cx + radius).ceil() as isize {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    self.paint(r, c, class, id);
                }
            }
        }
    }
}

enum Object {
    Car { bottom: isize, left: isize, w: isize, h: isize },
    Person { bottom: isize, left: isize, w: isize, h: isize },
    Pole { bottom: isize, left: isize, w: isize, h: isize },
}

impl Object {
    fn bottom(&self) -> isize {
        match *self {
            Object::Car { bottom, .. } | Object::Person { bottom, .. } | Object::Pole { bottom, .. } => bottom,
        }
    }
}

fn range_i(rng: &mut Rng, lo: isize, hi: isize) -> isize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo as i64..=hi as i64) as isize
    }
}

fn layout(spec: &SceneSpec, rng: &mut Rng) -> Canvas {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut cv = Canvas {
        h,
        w,
        mask: vec![SKY; h * w],
        region: vec![0; h * w],
        regions: 0,
    };
    let horizon = rng.random_range(0.35 * hf..0.55 * hf).round() as isize;
    cv.rect(horizon, 0, h as isize, w as isize, SIDEWALK);

    // Road: a trapezoid widening toward the viewer.
    let road_id = cv.new_region();
    let cx = wf / 2.0 + rng.random_range(-wf / 8.0..wf / 8.0);
    let top_half = rng.random_range(wf / 16.0..wf / 8.0);
    let spread = rng.random_range(wf / 4.0..wf / 2.0);
    for r in horizon..h as isize {
        let depth = (r - horizon) as f64 / (hf - horizon as f64);
        let half = top_half + depth * spread;
        for c in 0..w as isize {
            if (c as f64 + 0.5 - cx).abs() <= half {
                cv.paint(r, c, ROAD, road_id);
            }
        }
    }

    // Buildings along the horizon.
    let n_buildings = range_i(rng, 1, 4);
    for _ in 0..n_buildings {
        let bw = range_i(rng, (w / 8) as isize, (w / 3) as isize);
        let left = range_i(rng, -(bw / 2), w as isize - bw / 2);
        let top = range_i(rng, (hf * 0.05) as isize, horizon - 3);
        let bottom = horizon + range_i(rng, 0, 2);
        cv.rect(top, left, bottom, left + bw, BUILDING);
    }

    // Vegetation blobs near the horizon.
    let n_veg = range_i(rng, 0, 3);
    for _ in 0..n_veg {
        let radius = rng.random_range(hf / 20.0..hf / 7.0);
        let cy = horizon as f64 + rng.random_range(-hf / 10.0..hf / 20.0);
        let vx = rng.random_range(0.0..wf);
        cv.disc(cy, vx, radius, VEGETATION);
    }

    let n_obj = range_i(rng, spec.min_objects as isize, spec.max_objects as isize);
    let mut objects = Vec::new();
    for _ in 0..n_obj {
        let u: f64 = rng.random();
        let lowest = h as isize - 1;
        let obj = if u < 0.4 {
            let cw = range_i(rng, (w / 8) as isize, (w / 4) as isize);
            let ch = range_i(rng, (h / 13) as isize, (h / 7) as isize);
            let bottom = range_i(rng, horizon + ch.max(4), lowest);
            let left = (cx + rng.random_range(-wf / 4.0..wf / 4.0)) as isize - cw / 2;
            Object::Car { bottom, left, w: cw, h: ch }
        } else if u < 0.7 {
            let pw = range_i(rng, 2, ((w / 16) as isize).max(2));
            let ph = range_i(rng, (h / 10) as isize, (h / 5) as isize);
            let bottom = range_i(rng, horizon + 2, lowest);
            let left = range_i(rng, 0, w as isize - pw);
            Object::Person { bottom, left, w: pw, h: ph }
        } else {
            let pw = range_i(rng, 1, ((w / 32) as isize).max(1));
            let ph = range_i(rng, (h / 5) as isize, (h / 2) as isize);
            let bottom = range_i(rng, horizon + 1, lowest);
            let left = range_i(rng, 0, w as isize - pw);
            Object::Pole { bottom, left, w: pw, h: ph }
        };
        objects.push(obj);
    }
    // Nearer objects (lower on screen) are painted last.
    objects.sort_by_key(Object::bottom);
    for obj in objects {
        match obj {
            Object::Car { bottom, left, w, h } => cv.rect(bottom - h, left, bottom + 1, left + w, CAR),
            Object::Pole { bottom, left, w, h } => cv.rect(bottom - h, left, bottom + 1, left + w, POLE),
            Object::Person { bottom, left, w, h } => {
                let head = (w as f64 / 2.0).max(1.0);
                cv.rect(bottom - h, left, bottom + 1, left + w, PERSON);
                cv.disc((bottom - h) as f64 - head + 0.5, left as f64 + w as f64 / 2.0, head, PERSON);
            }
        }
    }
    cv
}

/// Renders scene `index`. Pure in `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64, index: u64) -> (RgbImage, ClassMap) {
    let mut rng = derive_rng(seed, "scene", index);
    let cv = layout(spec, &mut rng);
    let half = spec.texture_amplitude / 2.0;
    let shades: Vec<f64> = (0..=cv.regions)
        .map(|_| if half > 0.0 { rng.random_range(-half / 2.0..=half / 2.0) } else { 0.0 })
        .collect();
    let mut raw = Vec::with_capacity(cv.h * cv.w * 3);
    for i in 0..cv.h * cv.w {
        let base = APPEARANCE[cv.mask[i] as usize];
        let shade = shades[cv.region[i] as usize];
        for ch in base {
            let noise = if half > 0.0 { rng.random_range(-half / 2.0..=half / 2.0) } else { 0.0 };
            raw.push((ch as f64 + shade + noise).clamp(0.0, 255.0).round() as u8);
        }
    }
    let img = RgbImage::from_raw(cv.w as u32, cv.h as u32, raw).expect("buffer matches dimensions");
    let mask = ClassMap::new(cv.h, cv.w, cv.mask).expect("mask matches dimensions");
    (img, mask)
}

/// An in-memory split of paired RGB images and class masks.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: String,
    pub names: Vec<String>,
    pub images: Vec<RgbImage>,
    pub masks: Vec<ClassMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> (&RgbImage, &ClassMap) {
        (&self.images[i], &self.masks[i])
    }
}

/// Scene indices of a split; validation scenes follow the training range.
pub fn split_indices(split: &str, train_count: usize, val_count: usize) -> Result<std::ops::Range<u64>> {
    let (t, v) = (train_count as u64, val_count as u64);
    match split {
        "train" => Ok(0..t),
        "val" => Ok(t..t + v),
        other => Err(CamsegError::Dataset(format!("unknown split {other:?}"))),
    }
}

pub fn generate_split(spec: &SceneSpec, seed: u64, split: &str, train_count: usize, val_count: usize) -> Result<Dataset> {
    spec.validate()?;
    let range = split_indices(split, train_count, val_count)?;
    let count = (range.end - range.start) as usize;
    let pairs: Vec<(RgbImage, ClassMap)> = range.into_par_iter().map(|i| generate_scene(spec, seed, i)).collect();
    let (images, masks) = pairs.into_iter().unzip();
    Ok(Dataset {
        split: split.to_string(),
        names: (0..count).map(|i| format!("{i:04}")).collect(),
        images,
        masks,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub generator: String,
    pub spec: SceneSpec,
    pub seed: u64,
    pub classes: Vec<String>,
    pub appearance: Vec<[u8; 3]>,
    pub seed_derivation: String,
    pub splits: Vec<SplitManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub name: String,
    pub count: usize,
    pub first_scene_index: u64,
    /// SHA-256 over every image and mask file of the split, in order.
    pub sha256: String,
}

fn split_dirs(root: &Path, split: &str) -> (PathBuf, PathBuf) {
    let base = root.join(split);
    (base.join("img"), base.join("mask"))
}

fn dir_is_nonempty(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes `<root>/<split>/{img,mask}/NNNN.png` for both splits and `<root>/manifest.json`.
pub fn write_dataset(root: &Path, spec: &SceneSpec, seed: u64, train_count: usize, val_count: usize, force: bool) -> Result<Manifest> {
    spec.validate()?;
    if dir_is_nonempty(root) {
        if !force {
            return Err(CamsegError::Exists(root.to_path_buf()));
        }
        for split in ["train", "val"] {
            let p = root.join(split);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    let mut splits = Vec::new();
    for (split, count) in [("train", train_count), ("val", val_count)] {
        let ds = generate_split(spec, seed, split, train_count, val_count)?;
        let (img_dir, mask_dir) = split_dirs(root, split);
        std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        std::fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
        let mut hasher = Sha256::new();
        for i in 0..ds.len() {
            let file = format!("{}.png", ds.names[i]);
            let ip = img_dir.join(&file);
            let mp = mask_dir.join(&file);
            palette::save_rgb(&ds.images[i], &ip)?;
            palette::save_mask(&ds.masks[i], &mp)?;
            hasher.update(std::fs::read(&ip).map_err(io_err(&ip))?);
            hasher.update(std::fs::read(&mp).map_err(io_err(&mp))?);
        }
        let digest = hasher.finalize();
        let mut hex = String::new();
        for b in digest.iter() {
            let _ = write!(hex, "{b:02x}");
        }
        splits.push(SplitManifest {
            name: split.to_string(),
            count,
            first_scene_index: split_indices(split, train_count, val_count)?.start,
            sha256: hex,
        });
    }
    let manifest = Manifest {
        generator: "toyscapes".into(),
        spec: spec.clone(),
        seed,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        appearance: APPEARANCE.to_vec(),
        seed_derivation: "scene i uses ChaCha8 seeded by splitmix64(splitmix64(seed ^ fnv1a(\"scene\")) + i)".into(),
        splits,
    };
    let mp = root.join("manifest.json");
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&mp))?;
    Ok(manifest)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads `image_dir/*.png` paired with `mask_dir/*.png` by basename, sorted.
/// Images that are not `height × width` are resized (bilinear for RGB,
/// nearest for masks).
pub fn load_paired_dataset(image_dir: &Path, mask_dir: &Path, height: usize, width: usize) -> Result<Dataset> {
    let img_stems = png_stems(image_dir)?;
    let mask_stems = png_stems(mask_dir)?;
    if img_stems.is_empty() {
        return Err(CamsegError::Dataset(format!("no PNG images in {}", image_dir.display())));
    }
    let unmatched: Vec<&String> = img_stems
        .iter()
        .filter(|s| mask_stems.binary_search(s).is_err())
        .chain(mask_stems.iter().filter(|s| img_stems.binary_search(s).is_err()))
        .collect();
    if !unmatched.is_empty() {
        return Err(CamsegError::Dataset(format!(
            "unmatched basenames between {} and {}: {}",
            image_dir.display(),
            mask_dir.display(),
            unmatched.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let loaded: Result<Vec<(RgbImage, ClassMap)>> = img_stems
        .par_iter()
        .map(|s| {
            let file = format!("{s}.png");
            let mut img = palette::load_rgb(image_dir.join(&file))?;
            let mut mask = palette::load_mask(mask_dir.join(&file))?;
            let (w, h) = (width as u32, height as u32);
            if img.dimensions() != (w, h) {
                img = imageops::resize(&img, w, h, FilterType::Triangle);
            }
            if mask.width() != width || mask.height() != height {
                let g = imageops::resize(&mask.to_gray(), w, h, FilterType::Nearest);
                mask = ClassMap::from_gray(&g);
            }
            Ok((img, mask))
        })
        .collect();
    let (images, masks) = loaded?.into_iter().unzip();
    let split = image_dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("external")
        .to_string();
    Ok(Dataset {
        split,
        names: img_stems,
        images,
        masks,
    })
}

/// Loads a split written by [`write_dataset`].
pub fn load_split(root: &Path, split: &str, height: usize, width: usize) -> Result<Dataset> {
    let (img_dir, mask_dir) = split_dirs(root, split);
    if !img_dir.is_dir() {
        return Err(CamsegError::Dataset(format!(
            "{} does not exist; run gen-data first",
            img_dir.display()
        )));
    }
    let mut ds = load_paired_dataset(&img_dir, &mask_dir, height, width)?;
    ds.split = split.to_string();
    Ok(ds)
}
