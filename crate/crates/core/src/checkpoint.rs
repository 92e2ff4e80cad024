//! Unified checkpoint: student weights, optional persisted teacher, JSON sidecar.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::backbones::{FrozenEncoder, FrozenEncoderConfig, TeacherWeights, TokenEncoderConfig};
use crate::data::PreprocessConfig;
use crate::error::{MmrError, Result};
use crate::model::MmrModel;
use crate::nn::ParamStore;
use crate::train::TrainConfig;

pub const STUDENT_FILE: &str = "student.safetensors";
pub const TEACHER_FILE: &str = "teacher.safetensors";
pub const META_FILE: &str = "checkpoint.json";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub seed: u64,
    /// Epochs completed when the checkpoint was written.
    pub epochs_done: usize,
    pub image_size: (usize, usize),
    pub preprocess: PreprocessConfig,
    pub encoder: TokenEncoderConfig,
    pub teacher: FrozenEncoderConfig,
    pub teacher_digest: String,
    pub train: TrainConfig,
}

impl CheckpointMeta {
    pub fn new(
        model: &MmrModel,
        teacher: &FrozenEncoder,
        preprocess: &PreprocessConfig,
        train: &TrainConfig,
        epochs_done: usize,
    ) -> Result<Self> {
        Ok(CheckpointMeta {
            code_version: CODE_VERSION.to_string(),
            seed: train.seed,
            epochs_done,
            image_size: model.image_size(),
            preprocess: preprocess.clone(),
            encoder: model.encoder().config().clone(),
            teacher: teacher.config().clone(),
            teacher_digest: teacher.param_digest()?,
            train: train.clone(),
        })
    }
}

/// Write `dir/{student,teacher}.safetensors` and `dir/checkpoint.json`.
/// The teacher is stored only when its weights are random, since pretrained
/// weights are reloaded from their own file.
pub fn save_checkpoint(dir: &Path, model: &MmrModel, teacher: &FrozenEncoder, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MmrError::io(dir, e))?;
    let mut tensors = model.store().tensors();
    tensors.extend(model.store().frozen_tensors());
    let map: std::collections::HashMap<_, _> = tensors.into_iter().collect();
    candle_core::safetensors::save(&map, dir.join(STUDENT_FILE))?;
    if teacher.config().weights == TeacherWeights::Random {
        teacher.save(&dir.join(TEACHER_FILE))?;
    }
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| MmrError::io(&meta_path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(MmrError::NotFound(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| MmrError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuild student and teacher from a checkpoint directory. The teacher's
/// parameter digest must match the one recorded at save time.
pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<(MmrModel, FrozenEncoder, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let mut teacher_cfg = meta.teacher.clone();
    let persisted: PathBuf = dir.join(TEACHER_FILE);
    if persisted.exists() {
        teacher_cfg.weights_path = Some(persisted);
    }
    let teacher = FrozenEncoder::new(&teacher_cfg, dtype, device)?;
    let digest = teacher.param_digest()?;
    if digest != meta.teacher_digest {
        return Err(MmrError::WeightsUnavailable(format!(
            "teacher weights differ from the checkpoint (digest {digest}, expected {})",
            meta.teacher_digest
        )));
    }
    let store = ParamStore::from_safetensors(&dir.join(STUDENT_FILE), meta.seed, dtype, device)?;
    let (h, w) = meta.image_size;
    let model = MmrModel::new(store, &meta.encoder, &teacher, h, w)?;
    Ok((model, teacher, meta))
}
