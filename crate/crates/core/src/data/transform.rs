//! Preprocessing and geometric augmentation of single-channel images.
//!
//! Sampling uses pixel-centre coordinates: output pixel `i` of an `n`-pixel
//! axis resized from `m` pixels reads input position `(i + 0.5)·m/n − 0.5`.
//! Bilinear interpolation treats pixels outside the image as zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Shape, Tensor};

/// Side of the central crop relative to the full frame (440 of 512 pixels).
pub const CROP_FRACTION: f64 = 440.0 / 512.0;

/// Smallest standard deviation used by [`standardize`].
pub const STD_FLOOR: f64 = 1e-6;

fn check_image(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 || s.h == 0 || s.w == 0 {
        return Err(invalid(format!("expected a (1, 1, H, W) image, got {s}")));
    }
    Ok((s.h, s.w))
}

/// Bilinear sample at `(y, x)` in pixel coordinates; zero outside.
fn sample(data: &[f32], (h, w): (usize, usize), y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            f64::from(data[yy as usize * w + xx as usize])
        }
    };
    let top = if fx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        at(y0 + 1.0, x0)
    } else {
        at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Central `side × side` crop.
pub fn center_crop(img: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    if side == 0 || side > h || side > w {
        return Err(invalid(format!("cannot crop {side}x{side} from {h}x{w}")));
    }
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    Ok(Tensor::from_fn(Shape::new(1, 1, side, side), |_, _, y, x| {
        img.at(0, 0, y + top, x + left)
    }))
}

/// Bilinear resize to `out_h × out_w`. Sample positions are clamped to the
/// image, so upscaling repeats border pixels rather than fading to zero.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let data = img.data();
    Ok(Tensor::from_fn(Shape::new(1, 1, out_h, out_w), |_, _, y, x| {
        let yy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let xx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        sample(data, (h, w), yy, xx) as f32
    }))
}

/// Subtracts the mean and divides by the standard deviation, floored at
/// [`STD_FLOOR`].
pub fn standardize(img: &Tensor<f32>) -> Tensor<f32> {
    let n = img.len().max(1) as f64;
    let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    img.map(|v| ((f64::from(v) - mean) / std) as f32)
}

/// Central crop to [`CROP_FRACTION`] of the side, bilinear resize to
/// `target × target`, then per-image standardization.
pub fn preprocess(img: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    if h != w {
        return Err(invalid(format!("preprocess expects a square image, got {h}x{w}")));
    }
    if h < target || target == 0 {
        return Err(invalid(format!("image side {h} is smaller than the target {target}")));
    }
    let side = ((h as f64 * CROP_FRACTION).round() as usize).max(target);
    let cropped = center_crop(img, side)?;
    Ok(standardize(&resize_bilinear(&cropped, target, target)?))
}

/// Geometry of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Content scale about the centre; > 1 zooms in.
    pub scale: f64,
    /// Fractions cropped from the left, right, top and bottom before the
    /// crop is stretched back to full size.
    pub crop: [f64; 4],
    /// Counter-clockwise rotation in degrees.
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
    pub const MAX_CROP: f64 = 0.05;
    pub const MAX_ANGLE_DEG: f64 = 15.0;

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            crop: [0.0; 4],
            angle_deg: 0.0,
        }
    }

    /// Draws parameters from `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            scale: rng.gen_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
            crop: std::array::from_fn(|_| rng.gen_range(0.0..=Self::MAX_CROP)),
            angle_deg: rng.gen_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG),
        }
    }

    /// Input position sampled for output pixel `(y, x)` of an `h × w` image.
    pub fn source(&self, (h, w): (usize, usize), y: f64, x: f64) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        // undo the rotation about the centre
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (y - cy, x - cx);
        let (ry, rx) = (cy + c * dy + s * dx, cx - s * dy + c * dx);
        // undo the scale about the centre
        let (qy, qx) = (cy + (ry - cy) / self.scale, cx + (rx - cx) / self.scale);
        // undo the crop-and-stretch
        let [l, r, t, b] = self.crop;
        let (ch, cw) = (1.0 - t - b, 1.0 - l - r);
        let sy = t * h as f64 + (qy + 0.5) * ch - 0.5;
        let sx = l * w as f64 + (qx + 0.5) * cw - 0.5;
        (sy, sx)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let hw = check_image(img)?;
        let data = img.data();
        Ok(Tensor::from_fn(img.shape(), |_, _, y, x| {
            let (sy, sx) = self.source(hw, y as f64, x as f64);
            sample(data, hw, sy, sx) as f32
        }))
    }
}

/// Random scale, crop and rotation drawn from `seed`; zero fill outside the
/// source image.
pub fn augment(img: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    AugmentParams::sample(seed).apply(img)
}

/// Applies one draw to every view so their geometry stays aligned.
pub fn augment_views(views: &[Tensor<f32>], seed: u64) -> Result<Vec<Tensor<f32>>> {
    let p = AugmentParams::sample(seed);
    views.iter().map(|v| p.apply(v)).collect()
}
