//! Residual networks up to their third stage, with torchvision parameter names
//! so converted checkpoints load directly.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, ParamInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResNetKind {
    ResNet18,
    WideResNet50,
}

/// Batch normalization with frozen running statistics.
struct FrozenBatchNorm {
    scale: Tensor,
    shift: Tensor,
}

impl FrozenBatchNorm {
    fn new(store: &ParamStore, ch: usize) -> Result<Self> {
        let gamma = store.get(ch, "weight", ParamInit::Const(1.0))?;
        let beta = store.get(ch, "bias", ParamInit::Const(0.0))?;
        let mean = store.get(ch, "running_mean", ParamInit::Const(0.0))?;
        let var = store.get(ch, "running_var", ParamInit::Const(1.0))?;
        let scale = (gamma / (var + 1e-5)?.sqrt()?)?;
        let shift = (beta - (&mean * &scale)?)?;
        Ok(FrozenBatchNorm {
            scale: scale.reshape((1, ch, 1, 1))?,
            shift: shift.reshape((1, ch, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

fn conv(store: &ParamStore, i: usize, o: usize, k: usize, stride: usize, pad: usize) -> Result<Conv2d> {
    // torchvision initialises with He-normal over fan-out.
    let w = store.get((o, i, k, k), "weight", ParamInit::Kaiming { fan_in: o * k * k })?;
    Ok(Conv2d::from_parts(w, None, stride, pad))
}

struct Block {
    convs: Vec<(Conv2d, FrozenBatchNorm)>,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Block {
    fn basic(store: &ParamStore, inp: usize, planes: usize, stride: usize) -> Result<Self> {
        let convs = vec![
            (conv(&store.pp("conv1"), inp, planes, 3, stride, 1)?, FrozenBatchNorm::new(&store.pp("bn1"), planes)?),
            (conv(&store.pp("conv2"), planes, planes, 3, 1, 1)?, FrozenBatchNorm::new(&store.pp("bn2"), planes)?),
        ];
        let downsample = Self::downsample(store, inp, planes, stride)?;
        Ok(Block { convs, downsample })
    }

    fn bottleneck(store: &ParamStore, inp: usize, planes: usize, width: usize, stride: usize) -> Result<Self> {
        let out = planes * 4;
        let convs = vec![
            (conv(&store.pp("conv1"), inp, width, 1, 1, 0)?, FrozenBatchNorm::new(&store.pp("bn1"), width)?),
            (conv(&store.pp("conv2"), width, width, 3, stride, 1)?, FrozenBatchNorm::new(&store.pp("bn2"), width)?),
            (conv(&store.pp("conv3"), width, out, 1, 1, 0)?, FrozenBatchNorm::new(&store.pp("bn3"), out)?),
        ];
        let downsample = Self::downsample(store, inp, out, stride)?;
        Ok(Block { convs, downsample })
    }

    fn downsample(store: &ParamStore, inp: usize, out: usize, stride: usize) -> Result<Option<(Conv2d, FrozenBatchNorm)>> {
        if stride == 1 && inp == out {
            return Ok(None);
        }
        let s = store.pp("downsample");
        Ok(Some((conv(&s.pp("0"), inp, out, 1, stride, 0)?, FrozenBatchNorm::new(&s.pp("1"), out)?)))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (c, bn)) in self.convs.iter().enumerate() {
            h = bn.forward(&c.forward(&h)?)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let identity = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }
}

pub struct ResNet {
    stem: (Conv2d, FrozenBatchNorm),
    layers: Vec<Vec<Block>>,
}

impl ResNet {
    pub fn new(store: &ParamStore, kind: ResNetKind) -> Result<Self> {
        let stem = (conv(&store.pp("conv1"), 3, 64, 7, 2, 3)?, FrozenBatchNorm::new(&store.pp("bn1"), 64)?);
        let mut layers = Vec::new();
        let mut inp = 64;
        let plan: [(usize, usize); 3] = match kind {
            ResNetKind::ResNet18 => [(64, 2), (128, 2), (256, 2)],
            ResNetKind::WideResNet50 => [(64, 3), (128, 4), (256, 6)],
        };
        for (li, &(planes, count)) in plan.iter().enumerate() {
            let ls = store.pp(format!("layer{}", li + 1));
            let mut blocks = Vec::with_capacity(count);
            for bi in 0..count {
                let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                let bs = ls.pp(bi.to_string());
                let block = match kind {
                    ResNetKind::ResNet18 => Block::basic(&bs, inp, planes, stride)?,
                    ResNetKind::WideResNet50 => Block::bottleneck(&bs, inp, planes, planes * 2, stride)?,
                };
                inp = match kind {
                    ResNetKind::ResNet18 => planes,
                    ResNetKind::WideResNet50 => planes * 4,
                };
                blocks.push(block);
            }
            layers.push(blocks);
        }
        Ok(ResNet { stem, layers })
    }

    /// Outputs of layer1..=`deepest`.
    pub fn forward(&self, x: &Tensor, deepest: usize) -> Result<Vec<Tensor>> {
        let h = self.stem.1.forward(&self.stem.0.forward(x)?)?.relu()?;
        // Inputs are non-negative after ReLU, so zero padding acts as -inf padding.
        let mut h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        let mut out = Vec::new();
        for layer in self.layers.iter().take(deepest) {
            for block in layer {
                h = block.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}
