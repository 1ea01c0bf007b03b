//! Resize the short side, center-crop, scale to `[0, 1]`, normalise.

use std::path::{Path, PathBuf};

use crate::data::image::{read_image, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to per-channel standard deviations.
pub const STD_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Self {
        Normalization {
            mean,
            std: std.map(|s| s.max(STD_EPS)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    /// Target length of the shorter image side after resizing.
    pub resize_short: usize,
    /// Side of the square center crop.
    pub crop: usize,
    pub norm: Normalization,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            resize_short: 256,
            crop: 224,
            norm: Normalization::identity(),
        }
    }
}

impl Preprocess {
    /// Crop `size`, resizing to `floor(size · 256 / 224)` first.
    pub fn for_image_size(size: usize) -> Self {
        Preprocess {
            resize_short: size * 256 / 224,
            crop: size,
            norm: Normalization::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize_short < self.crop {
            return Err(Error::Config(format!(
                "resize_short {} must be at least the crop size {} (and positive)",
                self.resize_short, self.crop
            )));
        }
        Ok(())
    }
}

/// Output size when the short side becomes `short`: the long side is
/// `floor(short · long / short_in)`.
pub fn resized_dims(width: usize, height: usize, short: usize) -> (usize, usize) {
    if width <= height {
        (short, short * height / width)
    } else {
        (short * width / height, short)
    }
}

/// Top-left corner `(x, y)` of a centered `crop × crop` window.
pub fn crop_offset(width: usize, height: usize, crop: usize) -> (usize, usize) {
    ((width - crop) / 2, (height - crop) / 2)
}

/// Source taps `(i0, i1, t)` for output coordinates `from..from+len` along an
/// axis resized from `src` to `dst` samples, with half-pixel centers.
fn taps(src: usize, dst: usize, from: usize, len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (from..from + len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resample of the window `[x0, x0+w) × [y0, y0+h)` of the image as
/// it would look resized to `out_w × out_h`. Interleaved RGB in `[0, 255]`.
pub fn resample_region(
    img: &RgbImage,
    out_w: usize,
    out_h: usize,
    (x0, y0): (usize, usize),
    (w, h): (usize, usize),
) -> Vec<f32> {
    let xs = taps(img.width, out_w, x0, w);
    let ys = taps(img.height, out_h, y0, h);
    let px = |x: usize, y: usize, c: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;
    let mut out = Vec::with_capacity(w * h * 3);
    for &(r0, r1, ty) in &ys {
        for &(c0, c1, tx) in &xs {
            for c in 0..3 {
                let top = px(c0, r0, c) * (1.0 - tx) + px(c1, r0, c) * tx;
                let bottom = px(c0, r1, c) * (1.0 - tx) + px(c1, r1, c) * tx;
                out.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    resample_region(img, out_w, out_h, (0, 0), (out_w, out_h))
}

/// Resized-then-cropped pixels, interleaved RGB in `[0, 255]`.
pub fn resize_and_crop(img: &RgbImage, prep: &Preprocess) -> std::result::Result<Vec<f32>, String> {
    if img.width == 0 || img.height == 0 {
        return Err(format!("degenerate image {}x{}", img.width, img.height));
    }
    let (w, h) = resized_dims(img.width, img.height, prep.resize_short);
    if w < prep.crop || h < prep.crop {
        return Err(format!(
            "{}x{} image resizes to {w}x{h}, smaller than the {} crop",
            img.width, img.height, prep.crop
        ));
    }
    let off = crop_offset(w, h, prep.crop);
    if (w, h) == (img.width, img.height) {
        let mut out = Vec::with_capacity(prep.crop * prep.crop * 3);
        for y in off.1..off.1 + prep.crop {
            let row =
                &img.pixels[(y * img.width + off.0) * 3..(y * img.width + off.0 + prep.crop) * 3];
            out.extend(row.iter().map(|&v| v as f32));
        }
        return Ok(out);
    }
    Ok(resample_region(img, w, h, off, (prep.crop, prep.crop)))
}

fn to_tensor(hwc: &[f32], crop: usize, norm: &Normalization) -> Tensor<f32> {
    let plane = crop * crop;
    let mut data = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c].max(STD_EPS));
        for p in 0..plane {
            data[c * plane + p] = ((hwc[p * 3 + c] as f64 / 255.0 - m) / s) as f32;
        }
    }
    Tensor::new(vec![3, crop, crop], data).expect("crop shape")
}

/// Full pipeline to a `[3, crop, crop]` tensor.
pub fn preprocess(img: &RgbImage, prep: &Preprocess) -> Result<Tensor<f32>> {
    let hwc = resize_and_crop(img, prep).map_err(|reason| Error::Ingestion {
        path: PathBuf::from("<memory>"),
        reason,
    })?;
    Ok(to_tensor(&hwc, prep.crop, &prep.norm))
}

pub fn load_preprocessed(path: &Path, prep: &Preprocess) -> Result<Tensor<f32>> {
    let img = read_image(path)?;
    let hwc = resize_and_crop(&img, prep).map_err(|reason| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(to_tensor(&hwc, prep.crop, &prep.norm))
}
