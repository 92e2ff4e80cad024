//! Inference: full image through both branches, no masking.

use std::path::Path;

use crate::backbones::FrozenEncoder;
use crate::data::{load_image, load_mask, preprocess_image, ImageTensor, Label, PreprocessConfig, SampleRecord, Split};
use crate::error::{MmrError, Result};
use crate::exec::{self, Execution};
use crate::metrics::{EvalReport, ScoredSample};
use crate::model::{batch_tensor, MmrModel};
use crate::scoring::{anomaly_map, AnomalyMap};

/// Anomaly map of one image at its own resolution.
pub fn infer_heatmap(model: &MmrModel, teacher: &FrozenEncoder, x: &ImageTensor) -> Result<AnomalyMap> {
    let mut maps = infer_batch(model, teacher, &[x], Execution::Sequential)?;
    Ok(maps.pop().expect("one map per image"))
}

/// Anomaly maps for a batch of equally sized images.
pub fn infer_batch(model: &MmrModel, teacher: &FrozenEncoder, images: &[&ImageTensor], mode: Execution) -> Result<Vec<AnomalyMap>> {
    let first = images.first().ok_or_else(|| MmrError::shape("empty batch"))?;
    let patch = model.encoder().config().patch;
    first.check_divisible(patch)?;
    if (first.height, first.width) != model.image_size() {
        return Err(MmrError::shape(format!(
            "model expects {:?} inputs, got {}x{}",
            model.image_size(),
            first.height,
            first.width
        )));
    }
    let x = batch_tensor(images, model.dtype(), model.device())?;
    let z_frozen = teacher.extract_frozen_features(&x)?;
    let z_student = model.forward_full(&x)?;
    anomaly_map(&z_student, &z_frozen, first.height, first.width, mode)
}

/// Preprocess test records in parallel and score them batch by batch.
pub fn score_records(
    model: &MmrModel,
    teacher: &FrozenEncoder,
    records: &[SampleRecord],
    preprocess: &PreprocessConfig,
    batch_size: usize,
    mode: Execution,
) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let loaded = exec::try_map(mode, chunk, |r| -> Result<(ImageTensor, Option<_>)> {
            let image = preprocess_image(&load_image(&r.image_path)?, preprocess, None)?;
            let mask = r.mask_path.as_ref().map(|p| load_mask(p, preprocess)).transpose()?;
            Ok((image, mask))
        })?;
        let refs: Vec<&ImageTensor> = loaded.iter().map(|(i, _)| i).collect();
        let maps = infer_batch(model, teacher, &refs, mode)?;
        for ((r, (_, mask)), map) in chunk.iter().zip(loaded).zip(maps) {
            out.push(ScoredSample {
                domain: r.domain_tag,
                label: r.label,
                map,
                mask,
            });
        }
    }
    Ok(out)
}

/// Score every test record and summarise detection and localization.
pub fn evaluate(
    model: &MmrModel,
    teacher: &FrozenEncoder,
    records: &[SampleRecord],
    preprocess: &PreprocessConfig,
    batch_size: usize,
    fpr_limit: f64,
    mode: Execution,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let test: Vec<SampleRecord> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(MmrError::config("data.root", "manifest has no test samples"));
    }
    if !test.iter().any(|r| r.label == Label::Anomalous) {
        log::warn!("test split has no anomalous samples");
    }
    let scored = score_records(model, teacher, &test, preprocess, batch_size, mode)?;
    let report = EvalReport::compute(&scored, fpr_limit, mode)?;
    Ok((report, scored))
}

/// Convenience for a single file on disk.
pub fn infer_file(model: &MmrModel, teacher: &FrozenEncoder, path: &Path, preprocess: &PreprocessConfig) -> Result<AnomalyMap> {
    let x = preprocess_image(&load_image(path)?, preprocess, None)?;
    infer_heatmap(model, teacher, &x)
}
