//! Simple feature pyramid: parallel branches decode one token grid into maps
//! at ×4, ×2 and ×1 the grid resolution, with no lateral connections.
//!
//! Branch ×4 pairs with teacher stage 1, ×2 with stage 2 and ×1 with stage 3.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::{normalize_stages, MultiScaleFeatures};
use crate::error::{MmrError, Result};
use crate::nn::{gelu, LayerNorm, Linear, ParamInit, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpnConfig {
    /// Upsampling factor of each branch (4, 2 or 1), coarse first.
    pub scales: Vec<usize>,
    /// Output channels of each branch; must equal the paired teacher stage.
    pub out_channels: Vec<usize>,
    pub in_width: usize,
}

impl FpnConfig {
    /// Branches matching the given teacher stages and their channel counts.
    pub fn paired(stages: &[usize], channels: &[usize], in_width: usize) -> Result<Self> {
        let stages = normalize_stages(stages)?;
        if stages.len() != channels.len() {
            return Err(MmrError::shape(format!(
                "{} stages but {} channel counts",
                stages.len(),
                channels.len()
            )));
        }
        Ok(FpnConfig {
            scales: stages.iter().map(|&s| scale_for_stage(s)).collect(),
            out_channels: channels.to_vec(),
            in_width,
        })
    }

    pub fn stages(&self) -> Vec<usize> {
        self.scales.iter().map(|&s| stage_for_scale(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(MmrError::config("fpn.scales", "at least one branch is required"));
        }
        if self.scales.len() != self.out_channels.len() {
            return Err(MmrError::shape("every fpn branch needs an output channel count"));
        }
        if self.scales.iter().any(|s| ![1, 2, 4].contains(s)) {
            return Err(MmrError::config("fpn.scales", format!("{:?} must be drawn from 4, 2, 1", self.scales)));
        }
        if self.scales.contains(&4) && !self.in_width.is_multiple_of(4) || self.scales.contains(&2) && !self.in_width.is_multiple_of(2) {
            return Err(MmrError::config("fpn.in_width", "width must be divisible by the upsampling factor"));
        }
        Ok(())
    }

    /// Fails unless branch channels equal the teacher's for the same stages.
    pub fn check_against(&self, stages: &[usize], channels: &[usize]) -> Result<()> {
        if self.stages() != stages || self.out_channels != channels {
            return Err(MmrError::shape(format!(
                "fpn branches {:?} with channels {:?} do not match teacher stages {:?} with channels {:?}",
                self.scales, self.out_channels, stages, channels
            )));
        }
        Ok(())
    }
}

pub fn scale_for_stage(stage: usize) -> usize {
    1 << (3 - stage)
}

pub fn stage_for_scale(scale: usize) -> usize {
    match scale {
        4 => 1,
        2 => 2,
        _ => 3,
    }
}

/// 2×2 transposed convolution with stride 2. The kernel tiles never overlap,
/// so it is a per-pixel linear map to a 2×2 block of output pixels.
struct Deconv2x2 {
    /// `(out·2·2) × in`, rows ordered `(c', dy, dx)`.
    weight: Tensor,
    bias: Tensor,
    out_ch: usize,
}

impl Deconv2x2 {
    fn new(store: &ParamStore, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Deconv2x2 {
            weight: store.get((out_ch * 4, in_ch), "weight", ParamInit::TruncNormal { std: 0.02 })?,
            bias: store.get(out_ch, "bias", ParamInit::Const(0.0))?,
            out_ch,
        })
    }

    /// `B × H × W × C` → `B × 2H × 2W × C'`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let y = Linear::from_parts(self.weight.clone(), None).forward(x)?;
        let y = y
            .reshape((b, h, w, self.out_ch, 2, 2))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, 2 * h, 2 * w, self.out_ch))?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Bias-free 3×3 convolution with zero padding 1 on channel-last data,
/// computed as a sum of one matmul per kernel tap.
struct Conv3x3 {
    /// `out × in × 3 × 3`.
    weight: Tensor,
}

impl Conv3x3 {
    fn new(store: &ParamStore, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Conv3x3 {
            weight: store.get((out_ch, in_ch, 3, 3), "weight", ParamInit::TruncNormal { std: 0.02 })?,
        })
    }

    /// `B × H × W × C` → `B × H × W × C'`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let out = self.weight.dims()[0];
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..3 {
            for kx in 0..3 {
                let tap = padded.narrow(1, ky, h)?.narrow(2, kx, w)?.contiguous()?.reshape((b * h * w, c))?;
                let k = self.weight.narrow(2, ky, 1)?.narrow(3, kx, 1)?.reshape((out, c))?;
                let y = tap.matmul(&k.t()?)?;
                acc = Some(match acc {
                    Some(a) => (a + y)?,
                    None => y,
                });
            }
        }
        Ok(acc.expect("nine taps").reshape((b, h, w, out))?)
    }
}

struct Branch {
    scale: usize,
    up: Vec<Deconv2x2>,
    up_norm: Option<LayerNorm>,
    reduce: Linear,
    reduce_norm: LayerNorm,
    refine: Conv3x3,
    refine_norm: LayerNorm,
}

impl Branch {
    fn new(store: &ParamStore, scale: usize, d: usize, out: usize) -> Result<Self> {
        let (up, up_norm, mid) = match scale {
            4 => (
                vec![
                    Deconv2x2::new(&store.pp("up.0"), d, d / 2)?,
                    Deconv2x2::new(&store.pp("up.1"), d / 2, d / 4)?,
                ],
                Some(LayerNorm::new(&store.pp("up_norm"), d / 2, LN_EPS)?),
                d / 4,
            ),
            2 => (vec![Deconv2x2::new(&store.pp("up.0"), d, d / 2)?], None, d / 2),
            _ => (Vec::new(), None, d),
        };
        let reduce = Linear::new(&store.pp("reduce"), mid, out, false)?;
        let reduce_norm = LayerNorm::new(&store.pp("reduce_norm"), out, LN_EPS)?;
        let refine = Conv3x3::new(&store.pp("refine"), out, out)?;
        let refine_norm = LayerNorm::new(&store.pp("refine_norm"), out, LN_EPS)?;
        Ok(Branch {
            scale,
            up,
            up_norm,
            reduce,
            reduce_norm,
            refine,
            refine_norm,
        })
    }

    /// `B × g × g × d` → `B × C × (s·g) × (s·g)`.
    fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let mut x = grid.clone();
        for (i, up) in self.up.iter().enumerate() {
            x = up.forward(&x)?;
            if i == 0 {
                if let Some(norm) = &self.up_norm {
                    x = gelu(&norm.forward(&x)?)?;
                }
            }
        }
        // 1×1 convolution on channel-last data is a per-pixel linear map.
        let x = self.reduce_norm.forward(&self.reduce.forward(&x)?)?;
        let x = self.refine_norm.forward(&self.refine.forward(&x)?)?;
        Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

pub struct SimpleFpn {
    cfg: FpnConfig,
    branches: Vec<Branch>,
}

impl SimpleFpn {
    pub fn new(store: &ParamStore, cfg: &FpnConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .scales
            .iter()
            .zip(&cfg.out_channels)
            .map(|(&s, &c)| Branch::new(&store.pp(format!("x{s}")), s, cfg.in_width, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(SimpleFpn { cfg: cfg.clone(), branches })
    }

    pub fn config(&self) -> &FpnConfig {
        &self.cfg
    }

    /// Decode a `B × g × g × d` grid into one map per branch, coarse first.
    pub fn fpn_decode(&self, grid: &Tensor) -> Result<MultiScaleFeatures> {
        let (_, _, _, d) = grid.dims4()?;
        if d != self.cfg.in_width {
            return Err(MmrError::shape(format!("grid width {d}, decoder expects {}", self.cfg.in_width)));
        }
        let maps = self.branches.iter().map(|b| b.forward(grid)).collect::<Result<Vec<_>>>()?;
        let stages = self.branches.iter().map(|b| stage_for_scale(b.scale)).collect();
        MultiScaleFeatures::new(maps, stages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, D};

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(D::Minus1).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn conv3x3_matches_reference_convolution() {
        let dev = Device::Cpu;
        let store = ParamStore::new(3, DType::F32, &dev);
        let conv = Conv3x3::new(&store, 5, 7).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 6, 4, 5), &dev).unwrap();
        let ours = conv.forward(&x).unwrap().permute((0, 3, 1, 2)).unwrap();
        let weight = &store.tensors()["weight"];
        let nchw = x.permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        let reference = nchw.conv2d(weight, 1, 1, 1, 1).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-5);
    }

    #[test]
    fn deconv_matches_transposed_convolution() {
        let dev = Device::Cpu;
        let store = ParamStore::new(4, DType::F32, &dev);
        let deconv = Deconv2x2::new(&store, 6, 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 6), &dev).unwrap();
        let ours = deconv.forward(&x).unwrap().permute((0, 3, 1, 2)).unwrap();
        // Our weight is (out·2·2, in); the transposed-conv kernel is (in, out, 2, 2).
        let w = store.tensors()["weight"].reshape((3, 2, 2, 6)).unwrap().permute((3, 0, 1, 2)).unwrap().contiguous().unwrap();
        let nchw = x.permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        let reference = nchw.conv_transpose2d(&w, 0, 0, 2, 1).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-5);
    }

    #[test]
    fn decoded_shapes_follow_the_scales() {
        let dev = Device::Cpu;
        let cfg = FpnConfig::paired(&[3, 2, 1], &[32, 16, 8], 16).unwrap();
        let fpn = SimpleFpn::new(&ParamStore::new(0, DType::F32, &dev), &cfg).unwrap();
        let grid = Tensor::randn(0f32, 1.0, (2, 4, 4, 16), &dev).unwrap();
        let z = fpn.fpn_decode(&grid).unwrap();
        assert_eq!(z.shapes_by_stage(), vec![(8, 16, 16), (16, 8, 8), (32, 4, 4)]);
    }
}
