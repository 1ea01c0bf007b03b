//! 8-bit RGB rasters and their on-disk codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Binary PPM (`P6`) with `#` comments in the header and maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!(
            "unsupported magic {:?}, expected binary PPM P6",
            fields[0]
        ));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad PPM {what} {s:?}"))
    };
    let (w, h, maxval) = (
        num(&fields[1], "width")?,
        num(&fields[2], "height")?,
        num(&fields[3], "maxval")?,
    );
    if w == 0 || h == 0 {
        return Err(format!("degenerate image {w}x{h}"));
    }
    if maxval != 255 {
        return Err(format!(
            "only 8-bit PPM (maxval 255) is supported, got {maxval}"
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("PPM raster truncated: need {need} bytes"))?;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: raster.to_vec(),
    })
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("indexed PNG was not expanded".into()),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Decode PPM, or PNG when built with the `png` feature.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if bytes.starts_with(b"\x89PNG") {
        #[cfg(feature = "png")]
        return decode_png(bytes);
        #[cfg(not(feature = "png"))]
        return Err("PNG input requires the `png` feature".into());
    }
    decode_ppm(bytes)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// File extensions accepted when scanning a dataset directory.
pub fn is_image_file(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => true,
        Some("png") => cfg!(feature = "png"),
        _ => false,
    }
}
