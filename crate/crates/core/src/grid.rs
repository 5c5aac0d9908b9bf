//! Plain 2-D pixel maps: grayscale images / confidence maps ([`GrayMap`])
//! and boolean target masks ([`Mask`]). Row-major, `data[r * w + c]`.
//!
//! These are deliberately not tensors: they carry no gradient machinery and
//! their values live on the [0, 1] intensity scale used by the dataset files
//! and the detector's output.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(h: usize, w: usize) -> GrayMap {
        GrayMap { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<GrayMap> {
        if data.len() != h * w {
            return Err(Error::Data(format!(
                "gray map {h}×{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("gray map contains NaN or Inf".to_string()));
        }
        Ok(GrayMap { h, w, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clamps every value into [0, 1].
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes an 8-bit grayscale PNG; values are clamped to [0, 1] and
    /// rounded to the nearest of 256 levels.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, pixels)
            .expect("pixel buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }

    /// Reads an 8-bit grayscale PNG back onto the [0, 1] scale. Non-gray
    /// inputs are converted by luminance.
    pub fn load_png(path: &Path) -> Result<GrayMap> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&p| p as f64 / 255.0).collect();
        GrayMap::from_vec(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Mask> {
        if data.len() != h * w {
            return Err(Error::Data(format!(
                "mask {h}×{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Binary PNG: target pixels white, background black.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, pixels)
            .expect("pixel buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }

    /// Loads a mask PNG; any pixel above half intensity counts as target.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&p| p >= 128).collect();
        Mask::from_vec(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graymap_stats() {
        let g = GrayMap::from_vec(1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.mean(), 0.5);
        assert_eq!(g.std(), 0.5);
        assert_eq!(g.max(), 1.0);
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(GrayMap::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Mask::from_vec(2, 2, vec![false; 5]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_the_256_level_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let vals: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
        let g = GrayMap::from_vec(4, 4, vals).unwrap();
        g.save_png(&path).unwrap();
        let back = GrayMap::load_png(&path).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = Mask::new(3, 3);
        m.set(1, 1, true);
        m.set(0, 2, true);
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap(), m);
    }
}
