//! Parameter storage and the small set of layers the models are built from.

mod layers;
mod params;

pub use layers::{gelu, layer_norm_channels, Conv2d, LayerNorm, Linear};
pub use params::{tensors_digest, ParamInit, ParamStore};
