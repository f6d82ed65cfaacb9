//! 8-bit binary PGM (P5) images, encoded and decoded by the `image` crate.
//! Pixel values map to `[0, 1]` as `v / 255`; encoding rounds to nearest.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{invalid, io_err, Error, Result};
use crate::tensor::{Shape, Tensor};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(1, 1, H, W)` image as P5 bytes.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 1 {
        return Err(invalid(format!("PGM images are single-channel, got {s}")));
    }
    let pixels: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pixels, s.w as u32, s.h as u32, ExtendedColorType::L8)
        .map_err(|e| invalid(format!("PGM encoding failed: {e}")))?;
    Ok(out)
}

/// Decodes P5 bytes into a `(1, 1, H, W)` image. `path` only labels errors.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |reason: String| Error::Pgm {
        path: path.to_path_buf(),
        reason,
    };
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| fail(e.to_string()))?;
    if dec.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(fail(format!("expected binary graymap (P5), found {:?}", dec.subtype())));
    }
    if dec.color_type() != ColorType::L8 {
        return Err(fail(format!("expected 8-bit samples, found {:?}", dec.color_type())));
    }
    let (w, h) = dec.dimensions();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| fail(e.to_string()))?;
    let data = buf.into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data)
}

/// Writes atomically (temporary file, then rename).
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    crate::util::write_atomic(path, &encode_pgm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes, path)
}
