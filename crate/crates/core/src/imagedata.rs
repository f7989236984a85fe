//! Image and mask containers plus lossless PNG round trips.
//!
//! Pixel values live on the 256-level grid (v/255 as f64), so writing a PNG
//! and reading it back reproduces the in-memory data exactly.

use crate::error::{Result, SeasError};
use std::path::Path;

/// RGB image in [C,H,W] layout with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        ImageF {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Snap every value to the nearest 1/255 level, clamping to [0,1].
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            let q = (v.clamp(0.0, 1.0) * 255.0).round();
            *v = q / 255.0;
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if self.c != 3 {
            return Err(SeasError::Dimension(format!("png export needs 3 channels, got {}", self.c)));
        }
        let mut buf = vec![0u8; self.h * self.w * 3];
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..3 {
                    let v = self.get(ch, y, x).clamp(0.0, 1.0);
                    buf[(y * self.w + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, buf)
            .ok_or_else(|| SeasError::Data("png buffer size mismatch".into()))?;
        img.save(path).map_err(|e| SeasError::Data(format!("write {}: {}", path.display(), e)))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SeasError::Data(format!("read {}: {}", path.display(), e)))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageF::new(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    out.set(ch, y, x, p.0[ch] as f64 / 255.0);
                }
            }
        }
        Ok(out)
    }
}

/// Binary mask in [H,W] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        MaskImage {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_f64(h: usize, w: usize, data: &[f64]) -> Result<Self> {
        if data.len() != h * w {
            return Err(SeasError::Dimension(format!("mask data {} != {}x{}", data.len(), h, w)));
        }
        let mut out = vec![0u8; data.len()];
        for (o, &v) in out.iter_mut().zip(data) {
            if v == 0.0 {
                *o = 0;
            } else if v == 1.0 {
                *o = 1;
            } else {
                return Err(SeasError::Validation(format!("mask value {} is not binary", v)));
            }
        }
        Ok(MaskImage { h, w, data: out })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, buf)
            .ok_or_else(|| SeasError::Data("mask buffer size mismatch".into()))?;
        img.save(path).map_err(|e| SeasError::Data(format!("write {}: {}", path.display(), e)))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SeasError::Data(format!("read {}: {}", path.display(), e)))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = img.get_pixel(x as u32, y as u32).0[0];
                data[y * w + x] = if v >= 128 { 1 } else { 0 };
            }
        }
        Ok(MaskImage { h, w, data })
    }
}
