//! Reconstruction objective and test-time anomaly maps.
//!
//! Both compare student and teacher features position by position with the
//! cosine over channels. Per-position anomaly is `1 − cos`, so a perfectly
//! reconstructed feature scores 0 and an opposite one scores 2.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::MultiScaleFeatures;
use crate::error::{MmrError, Result};
use crate::exec::{self, Execution};
use crate::resample;

/// Guards every norm denominator.
pub const NORM_EPS: f64 = 1e-8;

/// `B × H × W` cosine similarity over the channel axis of two `B × C × H × W`
/// maps, clamped to `[-1, 1]`.
fn channel_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    // sqrt(|a|²|b|² + ε²) ≈ |a||b| + ε, differentiable even at zero vectors.
    let denom = ((na * nb)? + NORM_EPS * NORM_EPS)?.sqrt()?;
    Ok((dot / denom)?.clamp(-1.0, 1.0)?)
}

/// Sum over scales of the mean (over positions and batch) of `1 − cos`.
pub fn mmr_loss(z_masked: &MultiScaleFeatures, z_frozen: &MultiScaleFeatures) -> Result<Tensor> {
    z_masked.check_aligned(z_frozen)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in z_masked.maps.iter().zip(&z_frozen.maps) {
        let term = channel_cosine(a, b)?.affine(-1.0, 1.0)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("aligned features are non-empty"))
}

/// Per-pixel anomaly intensity at input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub map: Vec<f32>,
    /// Largest entry of `map`.
    pub score: f32,
}

impl AnomalyMap {
    pub fn new(map: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if map.len() != height * width || map.is_empty() {
            return Err(MmrError::shape(format!("{} values for a {height}x{width} map", map.len())));
        }
        let score = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Ok(AnomalyMap { height, width, map, score })
    }

    pub fn min(&self) -> f32 {
        self.map.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Row-major `1 − cos` maps at native resolution: `[scale][image] → h_i·w_i`.
pub fn scale_maps(z_masked: &MultiScaleFeatures, z_frozen: &MultiScaleFeatures) -> Result<Vec<Vec<Vec<f32>>>> {
    z_masked.check_aligned(z_frozen)?;
    z_masked
        .maps
        .iter()
        .zip(&z_frozen.maps)
        .map(|(a, b)| {
            let a = row_normalize(a)?;
            let b = row_normalize(b)?;
            // inner product of unit rows = cosine similarity
            let cos = (a * b)?.sum(1)?.clamp(-1.0, 1.0)?;
            let am = cos.affine(-1.0, 1.0)?.to_dtype(DType::F32)?;
            let (n, h, w) = am.dims3()?;
            Ok(am.reshape((n, h * w))?.to_vec2::<f32>()?)
        })
        .collect()
}

fn row_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = z.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(NORM_EPS, f64::INFINITY)?;
    Ok(z.broadcast_div(&norm)?)
}

/// Anomaly maps for every image of the batch: per-scale `1 − cos`, bilinear
/// upsampling to `out_h × out_w`, summed over scales. Score is the maximum.
pub fn anomaly_map(
    z_masked: &MultiScaleFeatures,
    z_frozen: &MultiScaleFeatures,
    out_h: usize,
    out_w: usize,
    mode: Execution,
) -> Result<Vec<AnomalyMap>> {
    let dims: Vec<(usize, usize)> = z_masked.maps.iter().map(|m| (m.dims()[2], m.dims()[3])).collect();
    if let Some(&(h, w)) = dims.iter().find(|&&(h, w)| h > out_h || w > out_w) {
        return Err(MmrError::config(
            "anomaly_map.out_size",
            format!("output {out_h}x{out_w} is smaller than a {h}x{w} feature map"),
        ));
    }
    let per_scale = scale_maps(z_masked, z_frozen)?;
    let batch = z_masked.batch_size();
    exec::map_range(mode, batch, |i| {
        let mut acc = vec![0f64; out_h * out_w];
        for (maps, &(h, w)) in per_scale.iter().zip(&dims) {
            let up = resample::bilinear(&maps[i], h, w, out_h, out_w);
            for (a, u) in acc.iter_mut().zip(up) {
                *a += u as f64;
            }
        }
        AnomalyMap::new(acc.into_iter().map(|v| v as f32).collect(), out_h, out_w)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn feats(maps: Vec<Tensor>) -> MultiScaleFeatures {
        let stages = (0..maps.len()).map(|i| 3 - i).collect();
        MultiScaleFeatures::new(maps, stages).unwrap()
    }

    #[test]
    fn identical_features_give_zero() {
        let dev = Device::Cpu;
        let a = Tensor::randn(0f32, 1.0, (2, 8, 4, 4), &dev).unwrap();
        let b = Tensor::randn(0f32, 1.0, (2, 16, 8, 8), &dev).unwrap();
        let z = feats(vec![a, b]);
        let l = mmr_loss(&z, &z).unwrap().to_scalar::<f32>().unwrap();
        assert!(l.abs() < 1e-6);
        let maps = anomaly_map(&z, &z, 32, 32, Execution::Sequential).unwrap();
        for m in maps {
            assert!(m.score.abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_channels_give_one_per_scale() {
        let dev = Device::Cpu;
        let make = |ch: usize| {
            let mut a = vec![0f32; 2 * 3 * 3];
            let mut b = vec![0f32; 2 * 3 * 3];
            for k in 0..9 {
                a[ch * 9 + k] = 1.5;
                b[(1 - ch) * 9 + k] = 0.5;
            }
            (
                Tensor::from_vec(a, (1, 2, 3, 3), &dev).unwrap(),
                Tensor::from_vec(b, (1, 2, 3, 3), &dev).unwrap(),
            )
        };
        let (a1, b1) = make(0);
        let (a2, b2) = make(1);
        let (a3, b3) = make(0);
        let l = mmr_loss(&feats(vec![a1, a2, a3]), &feats(vec![b1, b2, b3]))
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!((l - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vectors_never_produce_nan() {
        let dev = Device::Cpu;
        let a = Tensor::zeros((1, 4, 2, 2), DType::F32, &dev).unwrap();
        let b = Tensor::ones((1, 4, 2, 2), DType::F32, &dev).unwrap();
        let l = mmr_loss(&feats(vec![a.clone()]), &feats(vec![b.clone()])).unwrap();
        assert_eq!(l.to_scalar::<f32>().unwrap(), 1.0);
        let m = anomaly_map(&feats(vec![a]), &feats(vec![b]), 4, 4, Execution::Sequential).unwrap();
        assert!(m[0].map.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn opposite_vector_at_one_position() {
        let dev = Device::Cpu;
        let b = Tensor::randn(0f32, 1.0, (1, 8, 14, 14), &dev).unwrap();
        let mut a = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pos = 3 * 14 + 5;
        for c in 0..8 {
            a[c * 196 + pos] = -a[c * 196 + pos];
        }
        let a = Tensor::from_vec(a, (1, 8, 14, 14), &dev).unwrap();
        let maps = scale_maps(&feats(vec![a]), &feats(vec![b])).unwrap();
        for (k, v) in maps[0][0].iter().enumerate() {
            let expected = if k == pos { 2.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-5, "{k}: {v}");
        }
    }

    #[test]
    fn misaligned_scales_rejected() {
        let dev = Device::Cpu;
        let a = Tensor::zeros((1, 4, 2, 2), DType::F32, &dev).unwrap();
        let b = Tensor::zeros((1, 4, 3, 3), DType::F32, &dev).unwrap();
        assert!(matches!(mmr_loss(&feats(vec![a]), &feats(vec![b])), Err(MmrError::Shape(_))));
    }

    #[test]
    fn output_smaller_than_features_is_config_error() {
        let dev = Device::Cpu;
        let a = Tensor::ones((1, 4, 8, 8), DType::F32, &dev).unwrap();
        let z = feats(vec![a]);
        assert!(matches!(
            anomaly_map(&z, &z, 4, 4, Execution::Sequential),
            Err(MmrError::Config { .. })
        ));
    }
}
