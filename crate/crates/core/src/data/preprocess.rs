use std::path::Path;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, ImageTensor, Normalization};
use crate::error::{MmrError, Result};
use crate::resample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize_to: usize,
    pub crop_to: usize,
    pub normalization: Normalization,
    /// Side fraction range of the random source crop used for augmentation.
    pub augment_scale: (f32, f32),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resize_to: 256,
            crop_to: 224,
            normalization: Normalization::default(),
            augment_scale: (0.8, 1.0),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || !self.crop_to.is_multiple_of(16) {
            return Err(MmrError::config(
                "data.preprocess.crop_to",
                format!("{} is not a positive multiple of 16", self.crop_to),
            ));
        }
        if self.resize_to < self.crop_to {
            return Err(MmrError::config(
                "data.preprocess.resize_to",
                format!("resize_to {} is smaller than crop_to {}", self.resize_to, self.crop_to),
            ));
        }
        let (lo, hi) = self.augment_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(MmrError::config("data.preprocess.augment_scale", "expected 0 < lo <= hi <= 1"));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(MmrError::config("data.preprocess.normalization.std", "must be positive"));
        }
        Ok(())
    }
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(MmrError::NotFound(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

/// Resize (bilinear), centre-crop and normalize a decoded image.
///
/// `augment` carries the seed of an optional random source crop applied before
/// resizing; `None` gives the deterministic evaluation transform.
pub fn preprocess_image(raw: &DynamicImage, cfg: &PreprocessConfig, augment: Option<u64>) -> Result<ImageTensor> {
    cfg.validate()?;
    if raw.color().channel_count() < 3 {
        log::warn!("grayscale input replicated to 3 channels");
    }
    let rgb = raw.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes: Vec<Vec<f32>> = (0..3)
        .map(|c| rgb.pixels().map(|p| p.0[c]).collect())
        .collect();
    let (mut h, mut w) = (h, w);

    if let Some(seed) = augment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = cfg.augment_scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let ch = ((h as f32 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f32 * scale).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        for p in planes.iter_mut() {
            *p = resample::crop(p, w, top, left, ch, cw);
        }
        h = ch;
        w = cw;
    }

    let side = cfg.resize_to;
    if h != side || w != side {
        for p in planes.iter_mut() {
            *p = resample::bilinear(p, h, w, side, side);
        }
    }
    let crop = cfg.crop_to;
    let norm = cfg.normalization;
    let mut data = Vec::with_capacity(3 * crop * crop);
    for (c, p) in planes.iter().enumerate() {
        let window = resample::center_crop(p, side, side, crop, crop);
        data.extend(window.into_iter().map(|v| (v - norm.mean[c]) / norm.std[c]));
    }
    ImageTensor::new(data, 3, crop, crop, norm)
}

/// Apply the evaluation geometry (nearest resize, centre crop) to a mask.
pub fn preprocess_mask(raw: &DynamicImage, cfg: &PreprocessConfig) -> BinaryMask {
    let luma = raw.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let plane: Vec<bool> = luma.pixels().map(|p| p.0[0] > 127).collect();
    let side = cfg.resize_to;
    let resized = resample::nearest(&plane, h, w, side, side);
    let crop = cfg.crop_to;
    BinaryMask {
        data: resample::center_crop(&resized, side, side, crop, crop),
        height: crop,
        width: crop,
    }
}

/// Load a ground-truth mask; an anomalous sample's mask must be non-empty.
pub fn load_mask(path: &Path, cfg: &PreprocessConfig) -> Result<BinaryMask> {
    let raw = load_image(path)?;
    let mask = preprocess_mask(&raw, cfg);
    if mask.positives() == 0 {
        return Err(MmrError::Manifest {
            path: path.to_path_buf(),
            message: "ground-truth mask of an anomalous sample has no positive pixel".into(),
        });
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn noise_image(w: u32, h: u32) -> DynamicImage {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()])))
    }

    #[test]
    fn large_source_resized_then_cropped() {
        let t = preprocess_image(&noise_image(500, 500), &PreprocessConfig::default(), None).unwrap();
        assert_eq!((t.channels, t.height, t.width), (3, 224, 224));
    }

    #[test]
    fn exact_size_source_is_only_cropped() {
        let raw = noise_image(256, 256);
        let cfg = PreprocessConfig::default();
        let t = preprocess_image(&raw, &cfg, None).unwrap();
        let rgb = raw.to_rgb32f();
        for c in 0..3 {
            for (y, x) in [(0, 0), (100, 57), (223, 223)] {
                let v = rgb.get_pixel(x as u32 + 16, y as u32 + 16).0[c];
                let expected = (v - cfg.normalization.mean[c]) / cfg.normalization.std[c];
                assert_eq!(t.at(c, y, x), expected);
            }
        }
    }

    #[test]
    fn constant_gray_normalizes_per_channel() {
        // 0.5 is not representable in 8 bits; 128/255 is the stored value.
        let raw = DynamicImage::ImageLuma8(GrayImage::from_pixel(300, 260, Luma([128])));
        let cfg = PreprocessConfig::default();
        let t = preprocess_image(&raw, &cfg, None).unwrap();
        let v = 128.0f32 / 255.0;
        for c in 0..3 {
            let expected = (v - cfg.normalization.mean[c]) / cfg.normalization.std[c];
            assert!(t.plane(c).iter().all(|&x| (x - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn crop_must_be_multiple_of_16() {
        let cfg = PreprocessConfig { crop_to: 220, ..Default::default() };
        let err = preprocess_image(&noise_image(256, 256), &cfg, None).unwrap_err();
        assert!(matches!(err, MmrError::Config { .. }));
    }

    #[test]
    fn augmentation_deterministic_given_seed() {
        let raw = noise_image(300, 280);
        let cfg = PreprocessConfig::default();
        let a = preprocess_image(&raw, &cfg, Some(11)).unwrap();
        let b = preprocess_image(&raw, &cfg, Some(11)).unwrap();
        let c = preprocess_image(&raw, &cfg, Some(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_stay_binary_after_resizing() {
        let raw = DynamicImage::ImageLuma8(GrayImage::from_fn(300, 300, |x, y| {
            Luma([if (x / 37 + y / 23) % 2 == 0 { 255 } else { 0 }])
        }));
        let m = preprocess_mask(&raw, &PreprocessConfig::default());
        assert_eq!((m.height, m.width), (224, 224));
        assert!(m.positives() > 0 && m.positives() < 224 * 224);
    }
}
