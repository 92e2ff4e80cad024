//! The student: visible-token encoder, mask-token reassembly and simple FPN.

use candle_core::{DType, Device, Tensor};

use crate::backbones::{FrozenEncoder, MultiScaleFeatures, TokenEncoder, TokenEncoderConfig};
use crate::data::ImageTensor;
use crate::error::{MmrError, Result};
use crate::fpn::{FpnConfig, SimpleFpn};
use crate::masking::{assemble_full_grid, MaskSpec};
use crate::nn::{ParamInit, ParamStore};

/// Downsampling of the deepest teacher stage; the token grid must match it.
const TEACHER_STRIDE: usize = 16;

pub struct MmrModel {
    store: ParamStore,
    encoder: TokenEncoder,
    fpn: SimpleFpn,
    mask_token: Tensor,
    image_size: (usize, usize),
}

impl MmrModel {
    /// Build a student whose pyramid matches `teacher` for `image_h × image_w`
    /// inputs. Channel or stage mismatches fail here, not at run time.
    pub fn new(
        store: ParamStore,
        encoder_cfg: &TokenEncoderConfig,
        teacher: &FrozenEncoder,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        let fpn_cfg = FpnConfig::paired(teacher.stages(), &teacher.channels(), encoder_cfg.width)?;
        Self::with_fpn(store, encoder_cfg, &fpn_cfg, teacher, image_h, image_w)
    }

    pub fn with_fpn(
        store: ParamStore,
        encoder_cfg: &TokenEncoderConfig,
        fpn_cfg: &FpnConfig,
        teacher: &FrozenEncoder,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        let p = encoder_cfg.patch;
        for side in [image_h, image_w] {
            if side % p != 0 || side % 4 != 0 {
                return Err(MmrError::shape(format!(
                    "input side {side} must be divisible by patch {p} and by 4"
                )));
            }
        }
        fpn_cfg.check_against(teacher.stages(), &teacher.channels())?;
        if p != TEACHER_STRIDE {
            return Err(MmrError::shape(format!(
                "patch {p} puts the token grid off the teacher's 1/{TEACHER_STRIDE} stage; use patch {TEACHER_STRIDE}"
            )));
        }
        let encoder = TokenEncoder::new(&store.pp("encoder"), encoder_cfg, image_h / p, image_w / p)?;
        let fpn = SimpleFpn::new(&store.pp("fpn"), fpn_cfg)?;
        let mask_token = store.get(encoder_cfg.width, "mask_token", ParamInit::TruncNormal { std: 0.02 })?;
        Ok(MmrModel {
            store,
            encoder,
            fpn,
            mask_token,
            image_size: (image_h, image_w),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    pub fn fpn(&self) -> &SimpleFpn {
        &self.fpn
    }

    pub fn mask_token(&self) -> &Tensor {
        &self.mask_token
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn num_positions(&self) -> usize {
        let (gh, gw) = self.encoder.grid();
        gh * gw
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `B × 3 × H × W` → `B × n × (p·p·3)`, rows ordered like [`crate::masking::patchify`].
    pub fn patchify_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (h, w) != self.image_size {
            return Err(MmrError::shape(format!(
                "model built for {:?} inputs, got {h}x{w}",
                self.image_size
            )));
        }
        let p = self.encoder.config().patch;
        let (gh, gw) = (h / p, w / p);
        Ok(x
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 3, 5, 1))?
            .reshape((b, gh * gw, p * p * c))?)
    }

    /// Encode only the visible patches of each image (one spec per image),
    /// returning `B × |V| × d`.
    pub fn encode_visible(&self, x: &Tensor, specs: &[MaskSpec]) -> Result<Tensor> {
        let patches = self.patchify_batch(x)?;
        let (b, n, dim) = patches.dims3()?;
        if specs.len() != b {
            return Err(MmrError::shape(format!("{} mask specs for a batch of {b}", specs.len())));
        }
        let v = specs[0].visible_count();
        if specs.iter().any(|s| s.n != n || s.visible_count() != v) {
            return Err(MmrError::shape("mask specs disagree with the patch grid"));
        }
        let flat: Vec<u32> = specs
            .iter()
            .enumerate()
            .flat_map(|(bi, s)| s.visible_indices.iter().map(move |&k| (bi * n + k) as u32))
            .collect();
        let idx = Tensor::from_vec(flat, b * v, x.device())?;
        let visible = patches.reshape((b * n, dim))?.index_select(&idx, 0)?.reshape((b, v, dim))?;
        let positions: Vec<Vec<usize>> = specs.iter().map(|s| s.visible_indices.clone()).collect();
        self.encoder.encode_visible_tokens(&visible, &positions)
    }

    /// Student features for a batch under the given token-drop masks.
    pub fn forward_masked(&self, x: &Tensor, specs: &[MaskSpec]) -> Result<MultiScaleFeatures> {
        let visible = self.encode_visible(x, specs)?;
        let (gh, gw) = self.encoder.grid();
        let grid = assemble_full_grid(&visible, specs, &self.mask_token, self.encoder.pos_embed(), gh, gw)?;
        self.fpn.fpn_decode(&grid)
    }

    /// Student features with every token visible.
    pub fn forward_full(&self, x: &Tensor) -> Result<MultiScaleFeatures> {
        let b = x.dims()[0];
        let specs = vec![MaskSpec::unmasked(self.num_positions()); b];
        self.forward_masked(x, &specs)
    }
}

/// Stack images into a `B × C × H × W` tensor.
pub fn batch_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| MmrError::shape("empty image batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(MmrError::shape("images in a batch must share one size"));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}
