//! Seedable RGB perturbations: salt-and-pepper, motion blur, Gaussian noise,
//! Gaussian blur and four color jitters.
//!
//! Every operator works on a floating-point copy of the image and rounds
//! once at the end, so identity parameters reproduce the input exactly.

use image::RgbImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CamsegError, Result};
use crate::seed::{rng_from, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    SaltPepper,
    MotionBlur,
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::SaltPepper,
        CorruptionKind::MotionBlur,
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturation,
        CorruptionKind::Hue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::SaltPepper => "salt_pepper",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturation => "saturation",
            CorruptionKind::Hue => "hue",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Inclusive parameter range.
    pub fn range(self) -> (f64, f64) {
        match self {
            CorruptionKind::SaltPepper => (0.0, 0.8),
            CorruptionKind::MotionBlur => (3.0, 151.0),
            CorruptionKind::GaussianNoise => (0.0, 100.0),
            CorruptionKind::GaussianBlur => (1.0, 50.0),
            CorruptionKind::Brightness | CorruptionKind::Contrast => (0.5, 1.5),
            CorruptionKind::Saturation => (0.0, 2.0),
            CorruptionKind::Hue => (-0.2, 0.2),
        }
    }

    pub fn validate(self, v: f64) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo..=hi).contains(&v) {
            return Err(CamsegError::Parameter {
                what: self.name(),
                msg: format!("{v} outside [{lo}, {hi}]"),
            });
        }
        if self == CorruptionKind::MotionBlur && (v.fract() != 0.0 || (v as u64) % 2 == 0) {
            return Err(CamsegError::Parameter {
                what: self.name(),
                msg: format!("kernel size must be an odd integer, got {v}"),
            });
        }
        Ok(())
    }
}

/// Pivot used by the contrast jitter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastPivot {
    #[default]
    MeanLuma,
    MidGray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub parameter: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        self.apply_with(img, ContrastPivot::MeanLuma)
    }

    pub fn apply_with(&self, img: &RgbImage, pivot: ContrastPivot) -> Result<RgbImage> {
        let v = self.parameter;
        match self.kind {
            CorruptionKind::SaltPepper => salt_pepper(img, v, self.seed),
            CorruptionKind::MotionBlur => {
                self.kind.validate(v)?;
                motion_blur(img, v as usize)
            }
            CorruptionKind::GaussianNoise => gaussian_noise(img, v, self.seed),
            CorruptionKind::GaussianBlur => gaussian_blur(img, v),
            kind => color_jitter(img, kind, v, pivot),
        }
    }
}

/// H×W×3 floats on the 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Clamps to [0, 255] and rounds half away from zero.
    pub fn to_rgb(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| v.clamp(0.0, 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dimensions")
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * 3 + ch]
    }
}

/// Mirror index into `0..n` without repeating the edge sample, applied as
/// often as needed for kernels wider than the image.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

pub fn salt_pepper(img: &RgbImage, p: f64, seed: u64) -> Result<RgbImage> {
    CorruptionKind::SaltPepper.validate(p)?;
    let mut out = img.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_from(seed);
    for px in out.pixels_mut() {
        if rng.random::<f64>() < p {
            let v = if rng.random::<bool>() { 255 } else { 0 };
            px.0 = [v; 3];
        }
    }
    Ok(out)
}

/// Symmetric 1-d convolution along rows (`horizontal`) or columns with
/// reflect padding. `taps[0]` is the center weight, `taps[j]` the weight at
/// offset ±j; mirrored pairs are summed first so the result commutes
/// exactly with mirroring.
pub fn symmetric_filter(img: &FloatImage, taps: &[f64], horizontal: bool) -> FloatImage {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let sample = |off: isize| {
                    if horizontal {
                        img.at(r, reflect_index(c as isize + off, w), ch)
                    } else {
                        img.at(reflect_index(r as isize + off, h), c, ch)
                    }
                };
                let mut acc = taps[0] * sample(0);
                for (j, &t) in taps.iter().enumerate().skip(1) {
                    let j = j as isize;
                    acc += t * (sample(-j) + sample(j));
                }
                out[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    FloatImage {
        height: h,
        width: w,
        data: out,
    }
}

pub fn motion_blur_values(img: &RgbImage, k: usize) -> Result<FloatImage> {
    CorruptionKind::MotionBlur.validate(k as f64)?;
    let half = k / 2;
    let f = FloatImage::from_rgb(img);
    // Integer sums are exact, so divide once at the end.
    let mut out = symmetric_filter(&f, &vec![1.0; half + 1], true);
    out.data.iter_mut().for_each(|v| *v /= k as f64);
    Ok(out)
}

pub fn motion_blur(img: &RgbImage, k: usize) -> Result<RgbImage> {
    Ok(motion_blur_values(img, k)?.to_rgb())
}

pub fn gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    CorruptionKind::GaussianNoise.validate(sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng_from(seed);
    let mut f = FloatImage::from_rgb(img);
    for v in &mut f.data {
        *v += sigma * standard_normal(&mut rng);
    }
    Ok(f.to_rgb())
}

pub const GAUSSIAN_BLUR_TAPS: usize = 11;

/// Center and one-sided weights of the renormalized 11-tap kernel.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let half = GAUSSIAN_BLUR_TAPS / 2;
    let raw: Vec<f64> = (0..=half)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    raw.iter().map(|v| v / total).collect()
}

pub fn gaussian_blur_values(img: &RgbImage, sigma: f64) -> Result<FloatImage> {
    CorruptionKind::GaussianBlur.validate(sigma)?;
    let taps = gaussian_taps(sigma);
    let f = FloatImage::from_rgb(img);
    Ok(symmetric_filter(&symmetric_filter(&f, &taps, true), &taps, false))
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> Result<RgbImage> {
    Ok(gaussian_blur_values(img, sigma)?.to_rgb())
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// RGB in [0,1] to (hue in [0,1), saturation, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn color_jitter_values(
    img: &RgbImage,
    kind: CorruptionKind,
    v: f64,
    pivot: ContrastPivot,
) -> Result<FloatImage> {
    kind.validate(v)?;
    let mut f = FloatImage::from_rgb(img);
    match kind {
        CorruptionKind::Brightness => f.data.iter_mut().for_each(|p| *p *= v),
        CorruptionKind::Contrast => {
            let mean = match pivot {
                ContrastPivot::MeanLuma => {
                    let n = (f.height * f.width).max(1) as f64;
                    f.data.chunks_exact(3).map(|c| luma([c[0], c[1], c[2]])).sum::<f64>() / n
                }
                ContrastPivot::MidGray => 128.0,
            };
            // p·v + m·(1−v) is exact at v = 1.
            f.data.iter_mut().for_each(|p| *p = *p * v + mean * (1.0 - v));
        }
        CorruptionKind::Saturation => {
            for c in f.data.chunks_exact_mut(3) {
                let g = luma([c[0], c[1], c[2]]);
                c.iter_mut().for_each(|p| *p = *p * v + g * (1.0 - v));
            }
        }
        CorruptionKind::Hue => {
            if v != 0.0 {
                for c in f.data.chunks_exact_mut(3) {
                    let [h, s, val] = rgb_to_hsv([c[0] / 255.0, c[1] / 255.0, c[2] / 255.0]);
                    let rgb = hsv_to_rgb([(h + v).rem_euclid(1.0), s, val]);
                    for i in 0..3 {
                        c[i] = rgb[i] * 255.0;
                    }
                }
            }
        }
        other => {
            return Err(CamsegError::Parameter {
                what: other.name(),
                msg: "not a color jitter".into(),
            })
        }
    }
    Ok(f)
}

pub fn color_jitter(img: &RgbImage, kind: CorruptionKind, v: f64, pivot: ContrastPivot) -> Result<RgbImage> {
    Ok(color_jitter_values(img, kind, v, pivot)?.to_rgb())
}
