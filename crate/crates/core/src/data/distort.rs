//! Procedural base images and ROI-local distortions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::roi::RoiSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    Noise,
    Compression,
    Blur,
    Photometric,
    Null,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Noise,
        DistortionKind::Compression,
        DistortionKind::Blur,
        DistortionKind::Photometric,
        DistortionKind::Null,
    ];

    pub fn word(self) -> &'static str {
        match self {
            DistortionKind::Noise => "noise",
            DistortionKind::Compression => "compression",
            DistortionKind::Blur => "blur",
            DistortionKind::Photometric => "photometric",
            DistortionKind::Null => "null",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.word() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown distortion kind {s:?}")))
    }
}

/// Severity level 1 (slight) to 5 (catastrophic).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

pub const SEVERITY_WORDS: [&str; 5] = ["slight", "moderate", "obvious", "serious", "catastrophic"];

impl Severity {
    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Self(level))
        } else {
            Err(Error::InvalidInput(format!("severity {level} outside 1..=5")))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn word(self) -> &'static str {
        SEVERITY_WORDS[usize::from(self.0 - 1)]
    }

    pub fn all() -> impl Iterator<Item = Severity> {
        (1..=5).map(Severity)
    }
}

impl TryFrom<u8> for Severity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: Severity,
    pub roi: RoiSpec,
    pub seed: u64,
}

const NOISE_STD: [f64; 5] = [0.03, 0.06, 0.10, 0.16, 0.25];
const BLUR_SIGMA: [f64; 5] = [0.6, 1.0, 1.5, 2.2, 3.0];
/// Compression replaces each ROI-anchored block by its mean on a coarse grid and
/// blends that codec output in with a severity-dependent weight.
const COMPRESSION_BLOCK: usize = 4;
const COMPRESSION_STEPS: f64 = 32.0;
const COMPRESSION_MIX: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
const CONTRAST: [f64; 5] = [0.85, 0.7, 0.55, 0.4, 0.25];
const BRIGHTNESS: [f64; 5] = [0.02, 0.05, 0.08, 0.12, 0.16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
        }
    }

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// A flat shape placed on an image; `bbox` is the tight box of covered pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub bbox: RoiSpec,
}

/// Paints `kind` centred at `(cx, cy)` with radius `r` and returns its tight box,
/// or `None` if no pixel was covered.
pub fn draw_shape(image: &mut Image, kind: ShapeKind, cx: f64, cy: f64, r: f64, color: [f64; 3]) -> Option<PlacedShape> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if kind.covers(dx, dy, r) {
                for (c, &v) in color.iter().enumerate() {
                    image.set(x, y, c, v);
                }
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| PlacedShape {
        kind,
        bbox: RoiSpec::new(x0, y0, x1, y1),
    })
}

/// Smooth two-colour gradient with a fine grating over it; values in `[0, 1]`
/// on the 1/255 lattice.
pub fn synth_background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::new(size, size);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 - s / 2.0) * ca + (y as f64 - s / 2.0) * sa) / s + 0.5;
            let u = u.clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                img.set(x, y, c, c0[c] * (1.0 - u) + c1[c] * u);
            }
        }
    }
    img
}

/// Periods of the texture components, fine to coarse.
pub const TEXTURE_PERIODS: [f64; 5] = [2.5, 3.5, 5.0, 7.0, 10.0];
pub const TEXTURE_AMPLITUDE: f64 = 0.05;

/// Adds the shared texture layer: a stack of sinusoidal gratings, one per
/// period in [`TEXTURE_PERIODS`], each with a random orientation and phase.
pub fn add_grating(img: &mut Image, rng: &mut ChaCha8Rng) {
    let comps: Vec<(f64, f64, f64)> = TEXTURE_PERIODS
        .iter()
        .map(|&period| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (std::f64::consts::TAU * theta.cos() / period, std::f64::consts::TAU * theta.sin() / period, phase)
        })
        .collect();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g: f64 = comps
                .iter()
                .map(|(kx, ky, ph)| TEXTURE_AMPLITUDE * (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            for c in 0..CHANNELS {
                let v = img.get(x, y, c) + g;
                img.set(x, y, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img.quantize();
}

/// Base image for distortion and quality examples: a colour gradient under the
/// shared texture. No objects, so patch texture energy is uniform when clean.
pub fn synth_base_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = synth_background(&mut rng, size);
    add_grating(&mut img, &mut rng);
    img
}

/// Returns a copy of `image` with the distortion applied inside `spec.roi` only.
pub fn apply_distortion(image: &Image, spec: &DistortionSpec) -> Result<Image> {
    spec.roi.validate(image.width().min(image.height()))?;
    if image.width() != image.height() {
        return Err(Error::Shape("distortions expect square images".into()));
    }
    let s = usize::from(spec.severity.level() - 1);
    let roi = spec.roi;
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        DistortionKind::Null => return Ok(out),
        DistortionKind::Noise => {
            let std = NOISE_STD[s];
            for_roi(&roi, |x, y| {
                for c in 0..CHANNELS {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out.set(x, y, c, image.get(x, y, c) + std * z);
                }
            });
        }
        DistortionKind::Blur => {
            let kernel = gaussian_kernel(BLUR_SIGMA[s]);
            let horiz = convolve(image, &kernel, true);
            let both = convolve(&horiz, &kernel, false);
            for_roi(&roi, |x, y| {
                for c in 0..CHANNELS {
                    out.set(x, y, c, both.get(x, y, c));
                }
            });
        }
        DistortionKind::Compression => {
            let (block, q, mix) = (COMPRESSION_BLOCK, COMPRESSION_STEPS, COMPRESSION_MIX[s]);
            for_roi(&roi, |x, y| {
                let bx = roi.x0 + (x - roi.x0) / block * block;
                let by = roi.y0 + (y - roi.y0) / block * block;
                for c in 0..CHANNELS {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for yy in by..(by + block).min(roi.y1) {
                        for xx in bx..(bx + block).min(roi.x1) {
                            sum += image.get(xx, yy, c);
                            n += 1.0;
                        }
                    }
                    let coded = (sum / n * q).round() / q;
                    let v = image.get(x, y, c);
                    out.set(x, y, c, v + mix * (coded - v));
                }
            });
        }
        DistortionKind::Photometric => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut mean = [0.0; CHANNELS];
            for_roi(&roi, |x, y| {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += image.get(x, y, c);
                }
            });
            for m in &mut mean {
                *m /= roi.area() as f64;
            }
            for_roi(&roi, |x, y| {
                for (c, &m) in mean.iter().enumerate() {
                    let v = (image.get(x, y, c) - m) * CONTRAST[s] + m + sign * BRIGHTNESS[s];
                    out.set(x, y, c, v);
                }
            });
        }
    }
    for_roi(&roi, |x, y| {
        for c in 0..CHANNELS {
            let v = out.get(x, y, c).clamp(0.0, 1.0);
            out.set(x, y, c, crate::image::quantize_value(v));
        }
    });
    Ok(out)
}

fn for_roi(roi: &RoiSpec, mut f: impl FnMut(usize, usize)) {
    for y in roi.y0..roi.y1 {
        for x in roi.x0..roi.x1 {
            f(x, y);
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// One separable pass with clamp-to-edge borders.
fn convolve(image: &Image, kernel: &[f64], horizontal: bool) -> Image {
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut out = Image::new(image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    acc += kv * image.get(sx as usize, sy as usize, c);
                }
                out.set(x as usize, y as usize, c, acc);
            }
        }
    }
    out
}

/// Mean over ROI pixels and channels of the squared deviation between two images.
pub fn roi_msd(a: &Image, b: &Image, roi: &RoiSpec) -> f64 {
    let mut total = 0.0;
    for_roi(roi, |x, y| {
        for c in 0..CHANNELS {
            let d = a.get(x, y, c) - b.get(x, y, c);
            total += d * d;
        }
    });
    total / (roi.area() * CHANNELS) as f64
}

/// True when every pixel outside `roi` is bit-identical between `a` and `b`.
pub fn outside_roi_identical(a: &Image, b: &Image, roi: &RoiSpec) -> bool {
    (0..a.height()).all(|y| {
        (0..a.width()).all(|x| {
            roi.contains(x, y) || a.pixel(x, y).iter().zip(b.pixel(x, y)).all(|(p, q)| p.to_bits() == q.to_bits())
        })
    })
}
