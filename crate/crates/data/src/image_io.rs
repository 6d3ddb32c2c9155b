//! Image decoding, resizing and the `[0, 255] <-> [-1, 1]` pixel mapping.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use protoguide_core::ImageTensor;
use sha2::{Digest, Sha256};

use crate::error::{DataError, Result};

pub fn normalize(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decodes any supported image as RGB (grayscale is replicated across
/// channels, alpha is dropped), resizes bilinearly to a square of
/// `target_size` unless it already is one, and maps pixels to `[-1, 1]`.
pub fn load_and_normalize(path: &Path, target_size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?;
    let mut rgb = img.to_rgb8();
    let t = target_size as u32;
    if rgb.dimensions() != (t, t) {
        rgb = image::imageops::resize(&rgb, t, t, FilterType::Triangle);
    }
    Ok(from_rgb(&rgb))
}

fn from_rgb(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = normalize(px[c]);
        }
    }
    ImageTensor::new([3, h, w], data).expect("sized from the image")
}

/// Encodes a `(3, H, W)` or `(1, H, W)` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape();
    if c != 3 && c != 1 {
        return Err(protoguide_core::Error::ShapeMismatch { expected: vec![3, h, w], got: vec![c, h, w] }.into());
    }
    let d = img.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| denormalize(d[ch * h * w + y as usize * w + x as usize]);
        if c == 3 {
            image::Rgb([at(0), at(1), at(2)])
        } else {
            image::Rgb([at(0); 3])
        }
    });
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| DataError::Image { path: "<memory>".into(), source })?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = encode_png(img)?;
    protoguide_core::fsutil::write_atomic(path, &bytes).map_err(|e| DataError::io(path, e))
}

/// SHA-256 over the shape and the little-endian pixel values.
pub fn pixel_hash(img: &ImageTensor) -> String {
    let mut h = Sha256::new();
    for s in img.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
