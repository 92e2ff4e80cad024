use candle_core::{Tensor, D};

use super::{ParamInit, ParamStore};
use crate::error::Result;

/// Affine map over the last dimension, `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &ParamStore, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = store.get((out_dim, in_dim), "weight", ParamInit::TruncNormal { std: 0.02 })?;
        let bias = if bias {
            Some(store.get(out_dim, "bias", ParamInit::Const(0.0))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has a last dimension");
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.weight.dims()[0];
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.get(dim, "weight", ParamInit::Const(1.0))?,
            bias: store.get(dim, "bias", ParamInit::Const(0.0))?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Layer norm across the channels of an `N × C × H × W` map.
pub fn layer_norm_channels(ln: &LayerNorm, x: &Tensor) -> Result<Tensor> {
    let y = ln.forward(&x.permute((0, 2, 3, 1))?)?;
    Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Square-kernel 2-D convolution on `N × C × H × W`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_standardizes_rows() {
        let dev = Device::Cpu;
        let store = ParamStore::new(0, DType::F64, &dev);
        let ln = LayerNorm::new(&store, 4, 1e-6).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 14.0]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
