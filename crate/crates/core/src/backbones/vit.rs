use std::path::PathBuf;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::nn::{gelu, LayerNorm, Linear, ParamInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitVariant {
    VitBPretrainedMae,
    VitTinyScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenEncoderConfig {
    pub variant: VitVariant,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub include_class_token: bool,
    /// Converted MAE checkpoint; required for the pretrained variant.
    pub weights_path: Option<PathBuf>,
}

impl Default for TokenEncoderConfig {
    fn default() -> Self {
        Self::vit_b()
    }
}

impl TokenEncoderConfig {
    pub fn vit_b() -> Self {
        TokenEncoderConfig {
            variant: VitVariant::VitBPretrainedMae,
            width: 768,
            depth: 12,
            heads: 12,
            patch: 16,
            mlp_ratio: 4,
            include_class_token: true,
            weights_path: None,
        }
    }

    pub fn tiny(width: usize, depth: usize, heads: usize, patch: usize) -> Self {
        TokenEncoderConfig {
            variant: VitVariant::VitTinyScratch,
            width,
            depth,
            heads,
            patch,
            mlp_ratio: 4,
            include_class_token: false,
            weights_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(MmrError::config(
                "encoder.heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.depth == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return Err(MmrError::config("encoder", "depth, patch and mlp_ratio must be positive"));
        }
        if self.variant == VitVariant::VitBPretrainedMae
            && (self.width, self.depth, self.heads) != (768, 12, 12)
        {
            return Err(MmrError::config("encoder.variant", "vit_b requires width 768, depth 12, 12 heads"));
        }
        Ok(())
    }
}

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // The shift cancels in the ratio, so it carries no gradient.
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }
}

/// Pre-norm vision transformer that only ever sees visible patches.
pub struct TokenEncoder {
    cfg: TokenEncoderConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    cls: Option<(Tensor, Tensor)>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    grid: (usize, usize),
}

impl TokenEncoder {
    /// Build for an input of `grid_h × grid_w` patches.
    pub fn new(store: &ParamStore, cfg: &TokenEncoderConfig, grid_h: usize, grid_w: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant == VitVariant::VitBPretrainedMae && !store.has_preloaded("patch_embed.weight") {
            return Err(MmrError::WeightsUnavailable(match &cfg.weights_path {
                Some(p) => format!("{} holds no encoder.patch_embed.weight", p.display()),
                None => "vit_b_pretrained_mae needs encoder.weights_path".into(),
            }));
        }
        let d = cfg.width;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let patch_embed = Linear::new(&store.pp("patch_embed"), patch_dim, d, true)?;
        let n = grid_h * grid_w;
        // Fixed 2-D sine-cosine positions, as in masked-autoencoder encoders.
        let pos_embed = match store.has_preloaded("pos_embed") {
            true => store.frozen().get((n, d), "pos_embed", ParamInit::Const(0.0))?,
            false => sincos_2d(grid_h, grid_w, d, store)?,
        };
        let cls = if cfg.include_class_token {
            let token = store.get((1, d), "cls_token", ParamInit::TruncNormal { std: 0.02 })?;
            let pos = store.frozen().get((1, d), "cls_pos", ParamInit::Const(0.0))?;
            Some((token, pos))
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let s = store.pp(format!("blocks.{i}"));
                Ok(Block {
                    norm1: LayerNorm::new(&s.pp("norm1"), d, 1e-6)?,
                    attn: Attention {
                        qkv: Linear::new(&s.pp("attn.qkv"), d, 3 * d, true)?,
                        proj: Linear::new(&s.pp("attn.proj"), d, d, true)?,
                        heads: cfg.heads,
                    },
                    norm2: LayerNorm::new(&s.pp("norm2"), d, 1e-6)?,
                    fc1: Linear::new(&s.pp("mlp.fc1"), d, cfg.mlp_ratio * d, true)?,
                    fc2: Linear::new(&s.pp("mlp.fc2"), cfg.mlp_ratio * d, d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&store.pp("norm"), d, 1e-6)?;
        Ok(TokenEncoder {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            cls,
            blocks,
            norm,
            grid: (grid_h, grid_w),
        })
    }

    pub fn config(&self) -> &TokenEncoderConfig {
        &self.cfg
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// `n × d` positional table indexed by grid position.
    pub fn pos_embed(&self) -> &Tensor {
        &self.pos_embed
    }

    /// Encode `B × |V| × (p·p·3)` visible patches whose grid positions are
    /// `positions` (`B × |V|`, original indices, not compacted order).
    /// Returns `B × |V| × d` after the final normalization, class token dropped.
    pub fn encode_visible_tokens(&self, patches: &Tensor, positions: &[Vec<usize>]) -> Result<Tensor> {
        let (b, v, _) = patches.dims3()?;
        if v == 0 {
            return Err(MmrError::config("masking.eta", "no visible tokens left to encode"));
        }
        if positions.len() != b || positions.iter().any(|p| p.len() != v) {
            return Err(MmrError::shape("visible positions do not match the patch batch"));
        }
        let d = self.cfg.width;
        let flat: Vec<u32> = positions.iter().flatten().map(|&k| k as u32).collect();
        let idx = Tensor::from_vec(flat, b * v, patches.device())?;
        let pos = self.pos_embed.index_select(&idx, 0)?.reshape((b, v, d))?;
        let mut x = (self.patch_embed.forward(patches)? + pos)?;
        if let Some((token, cls_pos)) = &self.cls {
            let c = (token + cls_pos)?.unsqueeze(0)?.broadcast_as((b, 1, d))?;
            x = Tensor::cat(&[&c, &x], 1)?;
        }
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        Ok(match self.cls {
            Some(_) => x.narrow(1, 1, v)?,
            None => x,
        })
    }
}

fn sincos_2d(gh: usize, gw: usize, d: usize, store: &ParamStore) -> Result<Tensor> {
    if !d.is_multiple_of(4) {
        return Err(MmrError::config("encoder.width", "width must be divisible by 4 for 2-D positions"));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            // first half encodes the column, second half the row
            for coord in [x as f64, y as f64] {
                table.extend(omega.iter().map(|w| (coord * w).sin()));
                table.extend(omega.iter().map(|w| (coord * w).cos()));
            }
        }
    }
    Ok(Tensor::from_vec(table, (gh * gw, d), store.device())?.to_dtype(store.dtype())?)
}
