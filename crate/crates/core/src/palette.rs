//! Class-index masks, colorized semantic images, and the nearest-neighbor
//! inverse that maps arbitrary RGB back to labels.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{io_err, CamsegError, Result};

/// Label value excluded from colorization and metrics.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    names: Vec<String>,
    colors: Vec<[u8; 3]>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("cityscapes19", include_str!("../data/palettes/cityscapes19.txt")),
    ("high_contrast19", include_str!("../data/palettes/high_contrast19.txt")),
    ("toyscapes8", include_str!("../data/palettes/toyscapes8.txt")),
    (
        "toyscapes8_high_contrast",
        include_str!("../data/palettes/toyscapes8_high_contrast.txt"),
    ),
];

impl Palette {
    pub fn new(names: Vec<String>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if names.len() != colors.len() {
            return Err(CamsegError::Palette(format!(
                "{} names for {} colors",
                names.len(),
                colors.len()
            )));
        }
        if colors.len() < 2 || colors.len() > IGNORE as usize {
            return Err(CamsegError::Palette(format!(
                "need between 2 and {} classes, got {}",
                IGNORE,
                colors.len()
            )));
        }
        for i in 0..colors.len() {
            for j in 0..i {
                if colors[i] == colors[j] {
                    return Err(CamsegError::Palette(format!(
                        "classes {j} ({}) and {i} ({}) share color {:?}",
                        names[j], names[i], colors[i]
                    )));
                }
            }
        }
        Ok(Self { names, colors })
    }

    /// Names of the palettes compiled into the binary.
    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CamsegError::Palette(format!("no bundled palette named {name:?}")))?;
        Self::parse(text, name)
    }

    /// A bundled palette name or a path to a palette file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if BUNDLED.iter().any(|(n, _)| *n == spec) {
            Self::bundled(spec)
        } else {
            load_palette(spec)
        }
    }

    /// Parses `index name r g b` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |msg: String| CamsegError::Format {
                source_name: source_name.to_string(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(fail(format!("expected `index name r g b`, got {} fields", fields.len())));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|_| fail(format!("bad index {:?}", fields[0])))?;
            if index != names.len() {
                return Err(fail(format!("expected index {}, got {index}", names.len())));
            }
            let mut rgb = [0u8; 3];
            for (c, f) in rgb.iter_mut().zip(&fields[2..]) {
                *c = f.parse().map_err(|_| fail(format!("bad channel value {f:?}")))?;
            }
            names.push(fields[1].to_string());
            colors.push(rgb);
        }
        Self::new(names, colors)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (n, c)) in self.names.iter().zip(&self.colors).enumerate() {
            let _ = writeln!(s, "{i} {n} {} {} {}", c[0], c[1], c[2]);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn color(&self, k: usize) -> [u8; 3] {
        self.colors[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Nearest entry by squared RGB distance, lowest index on ties.
    pub fn nearest(&self, rgb: [u8; 3]) -> u8 {
        let mut best = 0;
        let mut best_d = u32::MAX;
        for (k, c) in self.colors.iter().enumerate() {
            let d: u32 = (0..3)
                .map(|i| {
                    let e = rgb[i] as i32 - c[i] as i32;
                    (e * e) as u32
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u8
    }
}

pub fn load_palette(path: impl AsRef<Path>) -> Result<Palette> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Palette::parse(&text, &path.display().to_string())
}

pub fn save_palette(palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, palette.to_text()).map_err(io_err(path))
}

/// Per-pixel class labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CamsegError::Dimension {
                what: "class map",
                expected: format!("{height}x{width} = {} labels", height * width),
                got: labels.len().to_string(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    /// Checks every non-ignore label against a class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l != IGNORE && l as usize >= classes) {
            Some(i) => Err(CamsegError::Codec {
                label: self.labels[i],
                row: i / self.width,
                col: i % self.width,
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions")
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            labels: img.as_raw().clone(),
        }
    }
}

pub fn colorize(mask: &ClassMap, palette: &Palette) -> Result<RgbImage> {
    mask.validate(palette.len())?;
    let mut out = RgbImage::new(mask.width as u32, mask.height as u32);
    for (px, &l) in out.pixels_mut().zip(&mask.labels) {
        px.0 = if l == IGNORE { [0, 0, 0] } else { palette.colors[l as usize] };
    }
    Ok(out)
}

pub fn declassify(image: &RgbImage, palette: &Palette) -> ClassMap {
    let labels = image.pixels().map(|p| palette.nearest(p.0)).collect();
    ClassMap {
        height: image.height() as usize,
        width: image.width() as usize,
        labels,
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| CamsegError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Reads an 8-bit single-channel class-index PNG.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ClassMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| CamsegError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(ClassMap::from_gray(&g)),
        other => Err(CamsegError::Format {
            source_name: path.display().to_string(),
            line: 0,
            msg: format!("mask must be 8-bit single-channel, found {:?}", other.color()),
        }),
    }
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CamsegError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_mask(mask: &ClassMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mask.to_gray()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CamsegError::Image {
            path: path.to_path_buf(),
            source,
        })
}
