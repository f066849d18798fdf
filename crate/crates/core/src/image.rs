//! RGB images with values in `[0, 1]`, stored height-major with interleaved
//! channels, plus lossless 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3`, row-major, RGB interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Channel-first `[3, 1, H, W]` tensor, the per-view encoder layout.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::lit(self.data[p * 3 + c] as f64);
            }
        }
        Tensor::from_vec(&[3, 1, self.height, self.width], out).expect("image tensor shape")
    }

    /// Inverse of [`Image::to_tensor`] for a `[3, 1, H, W]` or `[3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, 1, h, w] | [3, h, w] => (*h, *w),
            _ => return Err(Error::invalid_shape("image from tensor", format!("{s:?}"))),
        };
        let hw = h * w;
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = t.data()[c * hw + p].as_f64() as f32;
            }
        }
        Image::new(h, w, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Invalid(format!("png header {}: {e}", path.display())))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Invalid(format!("png write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::parse(&name, "png", e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::parse(&name, "png", e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::parse(&name, "png", "expected 8-bit RGB"));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..w * h * 3].iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(h, w, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i as f32 * 0.0731).fract()).collect();
        let img = Image::new(4, 5, data).unwrap().quantized();
        img.write_png(&path).unwrap();
        assert_eq!(Image::read_png(&path).unwrap(), img);
    }

    #[test]
    fn tensor_layout_round_trip() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f32 / 18.0).collect()).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 1, 2, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
