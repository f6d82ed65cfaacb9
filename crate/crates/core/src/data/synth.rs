//! Procedural all-sky aurora phantoms.
//!
//! A scene seed fixes the geometry: a structure map `S` in `[0, 1]` drawn
//! from the class's morphology. Each wavelength renders the same map with
//! its own intensity and sharpness:
//!
//! - 557.7 nm: `S` as is, the sharpest and highest-contrast view;
//! - 630.0 nm: `S` blurred, on a brighter background;
//! - 427.8 nm: `S` and background both scaled down (globally faint).
//!
//! Emission strength varies per scene and wavelength. With probability
//! [`SynthConfig::weak_emission_prob`] a line is barely excited and its view
//! shows little more than background and noise, so no single wavelength
//! always carries the morphology. Background level varies per scene, which
//! keeps mean brightness a poor class cue. Additive Gaussian sensor noise
//! finishes each view; values are clamped to `[0, 1]`.

use std::f64::consts::PI;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AuroraClass, Wavelength};
use crate::error::{invalid, Result};
use crate::tensor::{Shape, Tensor};

/// Class counts of the reference survey, in class-code order (arc, drapery,
/// hotspot, radial); used by the imbalanced profile.
pub const SURVEY_CLASS_COUNTS: [usize; 4] = [3934, 1786, 1497, 784];

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Side length of the square images.
    pub size: usize,
    /// Samples per class (the largest class under the imbalanced profile).
    pub samples_per_class: usize,
    pub seed: u64,
    /// Standard deviation of the additive sensor noise.
    pub noise: f64,
    /// Probability that a wavelength is only weakly excited in a scene.
    pub weak_emission_prob: f64,
    /// Scale class counts by the proportions of [`SURVEY_CLASS_COUNTS`].
    pub imbalanced: bool,
    /// `(background, emission)` multipliers per wavelength, in
    /// [`Wavelength::ALL`] order.
    pub intensity: [(f64, f64); 3],
    /// Blur of the 630.0 nm structure, as a fraction of the image side.
    pub diffuse_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 512,
            samples_per_class: 100,
            seed: 7,
            noise: 0.04,
            weak_emission_prob: 0.2,
            imbalanced: false,
            intensity: [(0.45, 0.5), (1.0, 1.0), (1.3, 1.1)],
            diffuse_sigma: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(invalid(format!("image size {} is below the minimum of 64", self.size)));
        }
        if !(0.0..=1.0).contains(&self.weak_emission_prob) {
            return Err(invalid("weak_emission_prob must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0) || !(self.diffuse_sigma >= 0.0) {
            return Err(invalid("noise and diffuse_sigma must be non-negative"));
        }
        Ok(())
    }

    /// Number of samples generated for `class`.
    pub fn class_count(&self, class: AuroraClass) -> usize {
        if self.imbalanced {
            let max = SURVEY_CLASS_COUNTS[0] as f64;
            ((self.samples_per_class as f64 * SURVEY_CLASS_COUNTS[class.code()] as f64 / max).round() as usize).max(1)
        } else {
            self.samples_per_class
        }
    }

    /// Scene seed of sample `index` of `class` under this master seed.
    pub fn scene_seed(&self, class: AuroraClass, index: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((class.code() as u64) << 32) | index as u64);
        rng.gen()
    }
}

/// Renders phantoms under a fixed configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: SynthConfig,
}

/// Per-scene quantities shared by all wavelengths.
struct Scene {
    structure: Vec<f64>,
    background: f64,
    strength: [f64; 3],
    noise_seed: u64,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    fn scene(&self, class: AuroraClass, seed: u64, size: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let structure = match class {
            AuroraClass::Arc => arc(&mut rng, size),
            AuroraClass::Drapery => drapery(&mut rng, size),
            AuroraClass::Hotspot => hotspot(&mut rng, size),
            AuroraClass::Radial => radial(&mut rng, size),
        };
        let background = rng.gen_range(0.02..0.1);
        let base = rng.gen_range(0.55..0.85);
        let strength = std::array::from_fn(|_| {
            let s = base * rng.gen_range(0.8..1.2);
            if rng.gen_bool(self.cfg.weak_emission_prob) {
                s * rng.gen_range(0.0..0.08)
            } else {
                s
            }
        });
        Scene {
            structure,
            background,
            strength,
            noise_seed: rng.gen(),
        }
    }

    /// One wavelength view of scene `seed` as a `(1, 1, size, size)` image.
    pub fn phantom(&self, class: AuroraClass, w: Wavelength, seed: u64, size: usize) -> Result<Tensor<f32>> {
        if size < 64 {
            return Err(invalid(format!("image size {size} is below the minimum of 64")));
        }
        let scene = self.scene(class, seed, size);
        Ok(self.render(&scene, w, size))
    }

    /// All three views of scene `seed`, in [`Wavelength::ALL`] order.
    pub fn views(&self, class: AuroraClass, seed: u64, size: usize) -> Result<[Tensor<f32>; 3]> {
        if size < 64 {
            return Err(invalid(format!("image size {size} is below the minimum of 64")));
        }
        let scene = self.scene(class, seed, size);
        Ok(Wavelength::ALL.map(|w| self.render(&scene, w, size)))
    }

    fn render(&self, scene: &Scene, w: Wavelength, size: usize) -> Tensor<f32> {
        let (bg_mul, em_mul) = self.cfg.intensity[w.index()];
        let structure = if w == Wavelength::W6300 && self.cfg.diffuse_sigma > 0.0 {
            blur(&scene.structure, size, (self.cfg.diffuse_sigma * size as f64) as f32)
        } else {
            scene.structure.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        rng.set_stream(w.index() as u64);
        let noise = Normal::new(0.0, self.cfg.noise).expect("noise is validated non-negative");
        let bg = scene.background * bg_mul;
        let em = scene.strength[w.index()] * em_mul;
        let data = structure
            .iter()
            .map(|&s| (bg + em * s + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::from_vec(Shape::new(1, 1, size, size), data).expect("size matches")
    }
}

/// A phantom under the default configuration.
pub fn generate_phantom(class: AuroraClass, w: Wavelength, seed: u64, size: usize) -> Result<Tensor<f32>> {
    Generator::new(SynthConfig::default())?.phantom(class, w, seed, size)
}

fn blur(map: &[f64], size: usize, sigma: f32) -> Vec<f64> {
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(size as u32, size as u32, map.iter().map(|&v| v as f32).collect())
            .expect("buffer matches dimensions");
    image::imageops::blur(&img, sigma)
        .into_raw()
        .into_iter()
        .map(f64::from)
        .collect()
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Evaluates `f(u, v)` on normalised pixel centres in `[0, 1)`.
fn field(size: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push(f((x as f64 + 0.5) / n, (y as f64 + 0.5) / n).clamp(0.0, 1.0));
        }
    }
    out
}

/// One to three east-west bands of varying width, brightness and slight
/// curvature.
fn arc(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    struct Band {
        y0: f64,
        width: f64,
        amp: f64,
        curve: f64,
        freq: f64,
        phase: f64,
    }
    let n = rng.gen_range(1..=3);
    let bands: Vec<Band> = (0..n)
        .map(|_| Band {
            y0: rng.gen_range(0.15..0.85),
            width: rng.gen_range(0.015..0.05),
            amp: rng.gen_range(0.7..1.0),
            curve: rng.gen_range(-0.2..0.2),
            freq: rng.gen_range(0.5..2.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    field(size, |u, v| {
        bands
            .iter()
            .map(|b| {
                let yc = b.y0 + b.curve * (u - 0.5) * (u - 0.5);
                let along = 0.8 + 0.2 * (2.0 * PI * b.freq * u + b.phase).sin();
                b.amp * along * gauss(v - yc, b.width)
            })
            .fold(0.0, f64::max)
    })
}

/// Faint vertical rays over a broad diffuse glow without a sharp edge.
fn drapery(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let (cx, cy) = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let (sx, sy) = (rng.gen_range(0.25..0.45), rng.gen_range(0.2..0.35));
    let glow = rng.gen_range(0.35..0.55);
    let tilt = rng.gen_range(-0.1..0.1);
    let rays: Vec<(f64, f64, f64)> = (0..rng.gen_range(15..30))
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.004..0.012), rng.gen_range(0.15..0.35)))
        .collect();
    field(size, |u, v| {
        let env = gauss(u - cx, sx) * gauss(v - cy, sy);
        let x = u + tilt * (v - 0.5);
        let texture: f64 = rays.iter().map(|&(x0, w, a)| a * gauss(x - x0, w)).sum();
        env * (glow + texture.min(0.5))
    })
}

/// Several bright blobs plus irregular patches.
fn hotspot(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..=6))
        .map(|_| {
            (
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.025..0.06),
                rng.gen_range(0.6..1.0),
            )
        })
        .collect();
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(2.0..5.0);
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let threshold = rng.gen_range(0.35..0.55);
    field(size, |u, v| {
        let b = blobs
            .iter()
            .map(|&(x, y, s, a)| a * gauss(((u - x).powi(2) + (v - y).powi(2)).sqrt(), s))
            .fold(0.0, f64::max);
        let f: f64 = waves
            .iter()
            .map(|&(kx, ky, p)| (2.0 * PI * (kx * u + ky * v) + p).cos())
            .sum::<f64>()
            / (waves.len() as f64).sqrt();
        let patch = 0.45 * ((f - threshold) / 1.2).clamp(0.0, 1.0);
        b.max(patch)
    })
}

/// Rays converging toward a randomised focal point.
fn radial(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let (fx, fy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let length = rng.gen_range(0.3..0.6);
    let rays: Vec<(f64, f64, f64)> = (0..rng.gen_range(8..=16))
        .map(|_| (rng.gen_range(-PI..PI), rng.gen_range(0.03..0.07), rng.gen_range(0.5..1.0)))
        .collect();
    field(size, |u, v| {
        let (dx, dy) = (u - fx, v - fy);
        let r = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let radial = (-r / length).exp() * (1.0 - gauss(r, 0.02));
        let angular = rays
            .iter()
            .map(|&(t, w, a)| {
                let d = (theta - t + PI).rem_euclid(2.0 * PI) - PI;
                a * gauss(d, w)
            })
            .fold(0.0, f64::max);
        angular * radial + 0.3 * gauss(r, 0.04)
    })
}
