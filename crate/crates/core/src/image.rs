//! Image tensors and 8-bit PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `C x H x W` image. Dataset images live in `[-1, 1]`;
/// intermediate diffusion states are unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                context: "image data",
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maps `[-1, 1]` onto `[0, 1]`, clamping.
    pub fn to_unit_range(&self) -> ImageTensor {
        ImageTensor {
            data: self
                .data
                .iter()
                .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect(),
            ..*self
        }
    }

    /// Maps `[0, 1]` onto `[-1, 1]`.
    pub fn from_unit_range(unit: &ImageTensor) -> ImageTensor {
        ImageTensor {
            data: unit.data.iter().map(|v| v * 2.0 - 1.0).collect(),
            ..*unit
        }
    }

    /// Central crop to `size x size`.
    pub fn center_crop(&self, size: usize) -> Result<ImageTensor> {
        if size > self.height || size > self.width {
            return Err(Error::InvalidConfig(format!(
                "crop {size} larger than image {}x{}",
                self.height, self.width
            )));
        }
        let y0 = (self.height - size) / 2;
        let x0 = (self.width - size) / 2;
        let mut data = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            for y in y0..y0 + size {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + size]);
            }
        }
        ImageTensor::new(self.channels, size, size, data)
    }

    /// Interleaved 8-bit RGB of a `[-1, 1]` image.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(hw * 3);
        for i in 0..hw {
            for c in 0..3 {
                let v = if self.channels == 1 {
                    self.data[i]
                } else {
                    self.data[c.min(self.channels - 1) * hw + i]
                };
                out.push((((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<ImageTensor> {
        let hw = width * height;
        if rgb.len() != hw * 3 {
            return Err(Error::DimensionMismatch {
                context: "rgb buffer",
                expected: hw * 3,
                actual: rgb.len(),
            });
        }
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = rgb[i * 3 + c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        ImageTensor::new(3, height, width, data)
    }
}

pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format("png", e.to_string()))?;
        writer
            .write_image_data(&image.to_rgb8())
            .map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(bytes)
}

pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let bytes = encode_png(image)?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format("png", e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("png", e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(Error::format("png", format!("unsupported color type {other:?}"))),
    };
    ImageTensor::from_rgb8(w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let img = ImageTensor::new(
            3,
            4,
            5,
            (0..60).map(|i| (i as f64 / 30.0) - 1.0).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }

    #[test]
    fn center_crop_takes_middle() {
        let img = ImageTensor::new(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
        let c = img.center_crop(2).unwrap();
        assert_eq!(c.data, vec![5.0, 6.0, 9.0, 10.0]);
        assert!(img.center_crop(5).is_err());
    }
}
