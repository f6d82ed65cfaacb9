//! Class activation maps from the linear head.
//!
//! Because the head is global average pooling followed by a linear layer,
//! the class score decomposes over spatial positions: the map of view `v`
//! for class `c` is `Σ_k w[c, k] · U_v[k, y, x]`, where `U_v` is the view's
//! final feature map and `w` the shared head weights. (For the ConvNeXt
//! baseline the head's layer norm is not folded in.)

use std::path::Path;

use crate::autograd::{ParamStore, Tape};
use crate::data::resize_bilinear;
use crate::error::{invalid, Result};
use crate::models::{Fusion, Model};
use crate::nn::{Ctx, Phase};
use crate::tensor::{Shape, Tensor};

/// Heatmap of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// Index of the view in the model's input order.
    pub view: usize,
    /// Label of the view, such as its wavelength.
    pub tag: String,
    /// Class the map explains.
    pub class: usize,
    /// Class the model predicts for the sample.
    pub predicted: usize,
    /// `(1, 1, H, W)` map at input resolution with values in `[0, 1]`.
    pub heatmap: Tensor<f32>,
}

/// `Σ_k weights[k] · features[k]` for a `(1, K, h, w)` feature map, as a
/// `(1, 1, h, w)` map. Linear in `weights`.
pub fn weighted_feature_sum(features: &Tensor<f32>, weights: &[f32]) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.n != 1 || s.c != weights.len() {
        return Err(invalid(format!("{} weights for feature map {s}", weights.len())));
    }
    let mut out = vec![0f64; s.plane()];
    for (k, &wk) in weights.iter().enumerate() {
        for (o, &u) in out.iter_mut().zip(features.plane(0, k)) {
            *o += f64::from(wk) * f64::from(u);
        }
    }
    Tensor::from_vec(Shape::new(1, 1, s.h, s.w), out.into_iter().map(|v| v as f32).collect())
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(map: &Tensor<f32>) -> Tensor<f32> {
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Unnormalized maps at feature resolution for one sample, plus the
/// predicted class. `views` are `(1, C, H, W)` tensors; `class` defaults to
/// the prediction. `head_weights` overrides the stored head weight.
pub fn cam_raw(
    model: &Model,
    store: &ParamStore<f32>,
    phase: Phase,
    views: &[Tensor<f32>],
    class: Option<usize>,
    head_weights: Option<&Tensor<f32>>,
) -> Result<(Vec<Tensor<f32>>, usize, usize)> {
    if views.iter().any(|v| v.shape().n != 1) {
        return Err(invalid("cam expects one sample per view"));
    }
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, store, false, phase);
    let vars: Vec<_> = views.iter().map(|v| ctx.tape.constant(v.clone())).collect();
    let out = model.forward_full(&mut ctx, &vars)?;
    let logits = tape.value(out.logits).data().to_vec();
    let predicted = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let class = class.unwrap_or(predicted);
    let k = model.config.num_classes;
    if class >= k {
        return Err(invalid(format!("class {class} is not in 0..{k}")));
    }
    let w = match head_weights {
        Some(w) => w,
        None => store.require(&model.head_weight_name())?,
    };
    let feats = tape.value(out.features);
    let fs = feats.shape();
    let c = model.feature_channels();
    let head_in = w.len() / k.max(1);
    if w.len() != k * head_in || fs.c != c {
        return Err(invalid(format!("head weight {} does not match {k} classes", w.shape())));
    }
    let row = &w.data()[class * head_in..(class + 1) * head_in];
    let maps = (0..views.len())
        .map(|v| {
            let u = feats.batch_slice(v, 1)?;
            // With concatenation each view has its own slice of the head.
            let wv = if model.config.fusion == Fusion::Concat && head_in == c * views.len() {
                &row[v * c..(v + 1) * c]
            } else {
                row
            };
            weighted_feature_sum(&u, wv)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, class, predicted))
}

/// Normalized heatmaps, upsampled to the input size, for every view of one
/// sample. `tags` label the views.
pub fn cam(
    model: &Model,
    store: &ParamStore<f32>,
    phase: Phase,
    views: &[Tensor<f32>],
    tags: &[String],
    class: Option<usize>,
) -> Result<Vec<CamMap>> {
    let (maps, class, predicted) = cam_raw(model, store, phase, views, class, None)?;
    maps.iter()
        .zip(views)
        .enumerate()
        .map(|(v, (m, x))| {
            let s = x.shape();
            Ok(CamMap {
                view: v,
                tag: tags.get(v).cloned().unwrap_or_else(|| v.to_string()),
                class,
                predicted,
                heatmap: normalize_map(&resize_bilinear(m, s.h, s.w)?),
            })
        })
        .collect()
}

/// Blue → cyan → yellow → red, 256 entries; red marks high attention.
pub const COLORMAP: [[u8; 3]; 256] = build_colormap();

const fn build_colormap() -> [[u8; 3]; 256] {
    // Anchors at 0, 85, 170 and 255.
    const ANCHORS: [[i32; 3]; 4] = [[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]];
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let seg = if i >= 255 { 2 } else { i / 85 };
        let f = (i - seg * 85) as i32;
        let mut ch = 0;
        while ch < 3 {
            let a = ANCHORS[seg][ch];
            let b = ANCHORS[seg + 1][ch];
            t[i][ch] = (a + (b - a) * f / 85) as u8;
            ch += 1;
        }
        i += 1;
    }
    t
}

fn to_bytes(map: &Tensor<f32>) -> Vec<u8> {
    map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes a heatmap as an 8-bit grayscale PGM.
pub fn write_heatmap_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    crate::data::write_pgm(path, map)
}

/// Writes a heatmap as a pseudo-color PPM using [`COLORMAP`].
pub fn write_heatmap_ppm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};
    let s = map.shape();
    let rgb: Vec<u8> = to_bytes(map).into_iter().flat_map(|v| COLORMAP[v as usize]).collect();
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&rgb, s.w as u32, s.h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| invalid(format!("encoding PPM: {e}")))?;
    crate::util::write_atomic(path, &bytes)
}
