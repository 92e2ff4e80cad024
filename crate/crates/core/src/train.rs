//! Training loop: masked student against the frozen teacher.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{FrozenEncoder, MultiScaleFeatures};
use crate::data::{preprocess_image, ImageTensor, PreprocessConfig};
use crate::error::{MmrError, Result};
use crate::exec::{self, Execution};
use crate::masking::{apply_unit_mask, check_eta, sample_mask_indices, sample_unit_mask, MaskMode};
use crate::model::{batch_tensor, MmrModel};
use crate::scoring::mmr_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// `(epoch, multiplier)` pairs applied cumulatively from that 0-based
    /// epoch on. `None` decays by 0.1 at ⌈0.8·E⌉ and ⌈0.9·E⌉.
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    pub eta: f64,
    pub mask_mode: MaskMode,
    /// Side of a square masking unit in pixels. `None` masks whole patches.
    pub unit_q: Option<usize>,
    pub augment: bool,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            lr_schedule: None,
            eta: 0.4,
            mask_mode: MaskMode::TokenDrop,
            unit_q: None,
            augment: false,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MmrError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MmrError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MmrError::config("train.learning_rate", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(MmrError::config("train.betas", "each beta must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(MmrError::config("train.weight_decay", "must be non-negative"));
        }
        check_eta(self.eta).map_err(|_| MmrError::config("train.eta", format!("{} is outside [0, 1)", self.eta)))?;
        if let Some(schedule) = &self.lr_schedule {
            if schedule.iter().any(|&(_, m)| m.is_nan() || m <= 0.0) {
                return Err(MmrError::config("train.lr_schedule", "multipliers must be positive"));
            }
        }
        if self.unit_q == Some(0) {
            return Err(MmrError::config("train.unit_q", "must be positive"));
        }
        if self.mask_mode == MaskMode::InPlaceFill && self.unit_q.is_none() {
            return Err(MmrError::config("train.unit_q", "in_place_fill needs a unit size"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<(usize, f64)> {
        match &self.lr_schedule {
            Some(s) => s.clone(),
            None => {
                let e = self.epochs as f64;
                vec![((0.8 * e).ceil() as usize, 0.1), ((0.9 * e).ceil() as usize, 0.1)]
            }
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule()
            .iter()
            .filter(|&&(at, _)| epoch >= at)
            .fold(self.learning_rate, |lr, &(_, m)| lr * m)
    }

    /// Seed of the mask drawn for `image` in `epoch`.
    pub fn mask_seed(&self, epoch: usize, image: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) | image as u64);
        rng.next_u64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
}

/// Training images, either fixed tensors or raw sources re-cropped per epoch.
pub enum TrainImages {
    Fixed(Vec<ImageTensor>),
    Augmented {
        raw: Vec<DynamicImage>,
        preprocess: PreprocessConfig,
    },
}

impl TrainImages {
    pub fn len(&self) -> usize {
        match self {
            TrainImages::Fixed(v) => v.len(),
            TrainImages::Augmented { raw, .. } => raw.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the 0-based epoch index.
    fn on_epoch_end(&mut self, _epoch: usize, _model: &MmrModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Streams `epoch,step,loss` rows to a writer.
pub struct LossCsv<W: Write> {
    out: W,
}

impl<W: Write> LossCsv<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "epoch,step,loss")?;
        Ok(LossCsv { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrainObserver for LossCsv<W> {
    fn on_step(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.out, "{},{},{}", r.epoch, r.step, r.loss).map_err(|e| MmrError::io(Path::new("<loss csv>"), e))
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &MmrModel) -> Result<()> {
        self.out.flush().map_err(|e| MmrError::io(Path::new("<loss csv>"), e))
    }
}

fn cat_features(cache: &[MultiScaleFeatures], idx: &[usize]) -> Result<MultiScaleFeatures> {
    let scales = cache[idx[0]].len();
    let maps = (0..scales)
        .map(|s| {
            let parts: Vec<&Tensor> = idx.iter().map(|&i| &cache[i].maps[s]).collect();
            Tensor::cat(&parts, 0)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    MultiScaleFeatures::new(maps, cache[idx[0]].stages.clone())
}

/// Run the optimisation and return every per-step loss.
///
/// Each step draws a fresh mask per image, encodes the visible tokens,
/// decodes the assembled grid and pulls the pyramid towards the teacher's
/// features of the same unmasked image.
pub fn train(
    model: &MmrModel,
    teacher: &FrozenEncoder,
    images: &TrainImages,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mode: Execution,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(MmrError::config("data.train", "no training images"));
    }
    let (dtype, device) = (model.dtype(), model.device().clone());
    let n = model.num_positions();
    let (image_h, image_w) = model.image_size();
    let patch = model.encoder().config().patch;
    if cfg.mask_mode == MaskMode::TokenDrop && cfg.unit_q.is_some_and(|q| q != patch) {
        return Err(MmrError::config("train.unit_q", format!("token_drop masks whole {patch}-pixel patches")));
    }

    let cache = match images {
        TrainImages::Fixed(tensors) => {
            let mut cache = Vec::with_capacity(tensors.len());
            for chunk in tensors.chunks(cfg.batch_size) {
                let refs: Vec<&ImageTensor> = chunk.iter().collect();
                let feats = teacher.extract_frozen_features(&batch_tensor(&refs, dtype, &device)?)?;
                for i in 0..chunk.len() {
                    cache.push(feats.select(i)?);
                }
            }
            Some(cache)
        }
        TrainImages::Augmented { .. } => None,
    };

    let mut opt = AdamW::new(
        model.store().all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.set_learning_rate(cfg.learning_rate_at(epoch));
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(u64::MAX - epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let mut epoch_loss = 0.0;
        for (batch_index, idx) in order.chunks(cfg.batch_size).enumerate() {
            let augmented;
            let batch: Vec<&ImageTensor> = match images {
                TrainImages::Fixed(t) => idx.iter().map(|&i| &t[i]).collect(),
                TrainImages::Augmented { raw, preprocess } => {
                    augmented = exec::try_map(mode, idx, |&i| {
                        preprocess_image(&raw[i], preprocess, Some(cfg.mask_seed(epoch, i) ^ 0xa5a5))
                    })?;
                    augmented.iter().collect()
                }
            };
            let x = batch_tensor(&batch, dtype, &device)?;
            let z_frozen = match &cache {
                Some(c) => cat_features(c, idx)?,
                None => teacher.extract_frozen_features(&x)?,
            };
            let z_masked = match (cfg.mask_mode, cfg.unit_q) {
                (MaskMode::InPlaceFill, Some(q)) => {
                    let filled = exec::try_map(mode, &batch.iter().zip(idx).collect::<Vec<_>>(), |(img, &i)| {
                        let spec = sample_unit_mask(image_h, image_w, q, cfg.eta, cfg.mask_seed(epoch, i), MaskMode::InPlaceFill)?;
                        apply_unit_mask(img, &spec, 0.0)
                    })?;
                    let refs: Vec<&ImageTensor> = filled.iter().collect();
                    model.forward_full(&batch_tensor(&refs, dtype, &device)?)?
                }
                (MaskMode::TokenDrop, _) => {
                    let specs = idx
                        .iter()
                        .map(|&i| sample_mask_indices(n, cfg.eta, cfg.mask_seed(epoch, i)))
                        .collect::<Result<Vec<_>>>()?;
                    model.forward_masked(&x, &specs)?
                }
                (MaskMode::InPlaceFill, None) => unreachable!("validated"),
            };
            let loss = mmr_loss(&z_masked, &z_frozen)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(MmrError::NonFiniteLoss {
                    loss: value,
                    epoch,
                    batch: batch_index,
                    seed: cfg.seed,
                });
            }
            opt.backward_step(&loss)?;
            let record = LossRecord {
                epoch,
                step,
                loss: value as f32,
            };
            observer.on_step(&record)?;
            records.push(record);
            epoch_loss += value;
            step += 1;
        }
        let batches = images.len().div_ceil(cfg.batch_size);
        log::info!("epoch {}/{} loss {:.5}", epoch + 1, cfg.epochs, epoch_loss / batches as f64);
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_steps_twice() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.schedule(), vec![(160, 0.1), (180, 0.1)]);
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert!((cfg.learning_rate_at(170) - 1e-4).abs() < 1e-18);
        assert!((cfg.learning_rate_at(199) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn mask_seeds_differ_per_epoch_and_image() {
        let cfg = TrainConfig::default();
        let seeds = [cfg.mask_seed(0, 0), cfg.mask_seed(0, 1), cfg.mask_seed(1, 0)];
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[0], seeds[2]);
        assert_eq!(seeds[0], cfg.mask_seed(0, 0));
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig {
            eta: 1.0,
            ..Default::default()
        };
        match bad.validate() {
            Err(MmrError::Config { field, .. }) => assert_eq!(field, "train.eta"),
            other => panic!("{other:?}"),
        }
        let bad = TrainConfig {
            mask_mode: MaskMode::InPlaceFill,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
