use std::fmt;
use std::path::Path;

use crate::{EnvError, Result};

pub const OBS_WIDTH: usize = 64;
pub const OBS_HEIGHT: usize = 64;
pub const OBS_CHANNELS: usize = 3;
/// Number of scalar entries in one observation.
pub const OBS_LEN: usize = OBS_WIDTH * OBS_HEIGHT * OBS_CHANNELS;

/// A 64×64 RGB frame, row-major, channels last.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pixels: Vec<u8>,
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sum: u64 = self.pixels.iter().map(|&p| p as u64).sum();
        write!(f, "Observation(64x64x3, checksum={sum})")
    }
}

impl Observation {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != OBS_LEN {
            return Err(EnvError::Observation(format!(
                "expected {OBS_LEN} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn filled(rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(OBS_LEN);
        for _ in 0..OBS_WIDTH * OBS_HEIGHT {
            pixels.extend_from_slice(&rgb);
        }
        Self { pixels }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * OBS_WIDTH + x) * OBS_CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * OBS_WIDTH + x) * OBS_CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixels mapped to [-0.5, 0.5], the convention used at model input and
    /// for preference densities.
    pub fn normalized(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| normalize_pixel(p)).collect()
    }

    pub fn write_normalized(&self, out: &mut [f32]) {
        for (o, &p) in out.iter_mut().zip(&self.pixels) {
            *o = normalize_pixel(p);
        }
    }

    /// Inverse of [`Observation::normalized`], clamping out-of-range values.
    pub fn from_normalized(values: &[f32]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(pixels)
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(OBS_WIDTH as u32, OBS_HEIGHT as u32, self.pixels.clone())
            .expect("observation buffer has the image size")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save(path)?;
        Ok(())
    }

    /// Number of pixels (not bytes) matching a predicate on the color.
    pub fn count_pixels(&self, pred: impl Fn([u8; 3]) -> bool) -> usize {
        self.pixels
            .chunks_exact(3)
            .filter(|c| pred([c[0], c[1], c[2]]))
            .count()
    }
}

#[inline]
pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 255.0 - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_length_is_rejected() {
        assert!(Observation::new(vec![0; 10]).is_err());
        assert!(Observation::new(vec![0; OBS_LEN]).is_ok());
    }

    #[test]
    fn normalization_range() {
        let black = Observation::filled([0, 0, 0]).normalized();
        let white = Observation::filled([255, 255, 255]).normalized();
        assert!(black.iter().all(|&v| v == -0.5));
        assert!(white.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn normalized_round_trip() {
        let mut obs = Observation::filled([10, 20, 30]);
        obs.set(5, 7, [255, 0, 128]);
        let back = Observation::from_normalized(&obs.normalized()).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.png");
        let obs = Observation::filled([1, 2, 3]);
        obs.save_png(&path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.into_raw(), obs.pixels());
    }
}
