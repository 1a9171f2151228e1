//! Binary PPM (P6, 8-bit) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image with channel values in `[0, 1]`, stored row-major as
/// `height * width * 3` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    /// From an `[H, W, C]` tensor with one (grey) or three channels.
    pub fn from_tensor(image: &Tensor<f32>) -> Result<Self> {
        let &[h, w, c] = image.shape() else {
            return Err(Error::Contract(format!(
                "expected an [H, W, C] image, got {:?}",
                image.shape()
            )));
        };
        let pixels = match c {
            3 => image.data().to_vec(),
            1 => image.data().iter().flat_map(|&v| [v, v, v]).collect(),
            _ => return Err(Error::Contract(format!("images need 1 or 3 channels, got {c}"))),
        };
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.height, self.width, 3], self.pixels.clone()).expect("consistent image")
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Quantize a unit-range value to a byte, rounding half up.
pub fn quantize(v: f32) -> u8 {
    let scaled = (v as f64).clamp(0.0, 1.0) * 255.0;
    (scaled + 0.5).floor() as u8
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |detail: &str| Error::Format {
        what: "PPM",
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images (maxval 255) are supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes.get(pos..).filter(|r| r.len() == need).ok_or_else(|| {
        bad(&format!(
            "expected {need} raster bytes, found {}",
            bytes.len().saturating_sub(pos)
        ))
    })?;
    Ok(RgbImage {
        width,
        height,
        pixels: raster.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
