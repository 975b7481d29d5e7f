//! Frame images: 8-bit quantization, binary PGM and PNG.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ExtendedColorType, ImageEncoder};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            _ => Err(Error::invalid(format!(
                "unknown image format `{s}` (expected pgm or png)"
            ))),
        }
    }
}

/// `round(p · 255)` with halves rounded up, for `p` in `[0, 1]`.
pub fn quantize(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("pixel value {p} is outside [0, 1]")));
    }
    Ok((p * 255.0 + 0.5).floor() as u8)
}

/// One `H × W` frame as 8-bit gray levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn from_values<T: Scalar>(width: usize, height: usize, values: &[T]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "{} values do not fill a {width}x{height} frame",
                values.len()
            )));
        }
        let pixels = values
            .iter()
            .map(|v| quantize(v.to_f64().unwrap_or(f64::NAN)))
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5 {} {} 255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses the binary PGM variant written by [`to_pgm`](Self::to_pgm),
    /// accepting any whitespace between header fields.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("pgm: {m}"));
        let mut pos = 0;
        let mut field = || -> Result<&[u8]> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(&bytes[start..pos])
        };
        if field()? != b"P5" {
            return Err(bad("not a binary graymap"));
        }
        let mut number = || -> Result<usize> {
            std::str::from_utf8(field()?)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header number"))
        };
        let (width, height, maxval) = (number()?, number()?, number()?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if data.len() != width * height {
            return Err(bad("raster size does not match the header"));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(
                &self.pixels,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
        Ok(out)
    }

    pub fn encode(&self, format: ImageFormat) -> Result<Vec<u8>> {
        match format {
            ImageFormat::Pgm => Ok(self.to_pgm()),
            ImageFormat::Png => self.to_png(),
        }
    }

    /// Frames placed left to right; all must share one height.
    pub fn strip(frames: &[GrayFrame]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::invalid("a strip needs at least one frame"));
        };
        let height = first.height;
        if frames.iter().any(|f| f.height != height) {
            return Err(Error::shape("strip frames differ in height"));
        }
        let width = frames.iter().map(|f| f.width).sum();
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for f in frames {
                pixels.extend_from_slice(&f.pixels[y * f.width..(y + 1) * f.width]);
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Splits `(T, 1, H, W)` values into frames.
pub fn frames_of<T: Scalar>(frames: &Tensor<T>) -> Result<Vec<GrayFrame>> {
    let &[_, 1, h, w] = frames.shape() else {
        return Err(Error::shape(format!(
            "expected (T, 1, H, W) frames, got {:?}",
            frames.shape()
        )));
    };
    frames
        .data()
        .chunks(h * w)
        .map(|c| GrayFrame::from_values(w, h, c))
        .collect()
}

/// `{prefix}_{index}.{ext}` with the index zero-padded to at least three
/// digits, so names sort in frame order.
pub fn frame_file_name(prefix: &str, index: usize, count: usize, format: ImageFormat) -> String {
    let width = count.saturating_sub(1).to_string().len().max(3);
    format!("{prefix}_{index:0width$}.{}", format.extension())
}

/// Writes every frame of `(T, 1, H, W)` values as one image file and returns
/// the paths in frame order.
pub fn export_frames<T: Scalar>(
    frames: &Tensor<T>,
    dir: &Path,
    prefix: &str,
    format: ImageFormat,
) -> Result<Vec<PathBuf>> {
    let images = frames_of(frames)?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = dir.join(frame_file_name(prefix, i, images.len(), format));
        write_atomic(&path, &img.encode(format)?)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0).unwrap(), 0);
        assert_eq!(quantize(1.0).unwrap(), 255);
        assert_eq!(quantize(0.5).unwrap(), 128);
        assert_eq!(quantize(127.4 / 255.0).unwrap(), 127);
        assert!(quantize(1.01).is_err());
        assert!(quantize(f64::NAN).is_err());
    }

    #[test]
    fn zero_frame_pgm_bytes() {
        let f = GrayFrame::from_values(64, 64, &[0.0f32; 64 * 64]).unwrap();
        let bytes = f.to_pgm();
        assert!(bytes.starts_with(b"P5 64 64 255\n"));
        assert_eq!(bytes.len(), 13 + 64 * 64);
        assert!(bytes[13..].iter().all(|&b| b == 0));
        assert_eq!(GrayFrame::from_pgm(&bytes).unwrap(), f);
        assert_eq!(
            GrayFrame::from_pgm(b"P5\n2 1\n255\n\x01\x02")
                .unwrap()
                .pixels,
            vec![1, 2]
        );
        assert!(GrayFrame::from_pgm(b"P2 1 1 255\n0").is_err());
        assert!(GrayFrame::from_pgm(b"P5 2 2 255\n\x00").is_err());
    }

    #[test]
    fn strip_and_names() {
        let a = GrayFrame::from_values(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = GrayFrame::from_values(1, 2, &[0.5, 0.5]).unwrap();
        let s = GrayFrame::strip(&[a, b]).unwrap();
        assert_eq!((s.width, s.height), (3, 2));
        assert_eq!(s.pixels, vec![0, 255, 128, 255, 0, 128]);
        assert_eq!(
            frame_file_name("pred", 7, 10, ImageFormat::Pgm),
            "pred_007.pgm"
        );
        assert_eq!(
            frame_file_name("t", 12, 1500, ImageFormat::Png),
            "t_0012.png"
        );
    }

    #[test]
    fn png_decodes_to_the_same_pixels() {
        let f = GrayFrame::from_values(3, 2, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let png = f.to_png().unwrap();
        let img = image::load_from_memory(&png).unwrap().into_luma8();
        assert_eq!(img.into_raw(), f.pixels);
    }
}
