//! End-to-end runs driven by a [`RunConfig`], writing into one run directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::backbones::FrozenEncoder;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CODE_VERSION};
use crate::config::RunConfig;
use crate::data::{
    generate_toy_dataset, load_image, load_manifest, preprocess_image, ImageTensor, Label, SampleRecord, Split,
    MANIFEST_FILE,
};
use crate::error::{MmrError, Result};
use crate::evaluate::evaluate;
use crate::exec;
use crate::metrics::{EvalReport, ScoredSample};
use crate::model::{batch_tensor, MmrModel};
use crate::nn::ParamStore;
use crate::train::{train, LossCsv, LossRecord, TrainImages, TrainObserver};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TOY_DIR: &str = "data";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
}

pub fn device(cfg: &RunConfig) -> Result<Device> {
    match cfg.run.device.as_str() {
        "cpu" => Ok(Device::Cpu),
        other => Err(MmrError::config("run.device", format!("`{other}` is not available"))),
    }
}

/// Echo the resolved configuration and run identity into `dir`.
pub fn write_run_header(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MmrError::io(dir, e))?;
    cfg.write(&dir.join(CONFIG_FILE))?;
    let info = RunInfo {
        command: command.to_string(),
        code_version: CODE_VERSION.to_string(),
        seed: cfg.train.seed,
    };
    let path = dir.join(RUN_INFO_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| MmrError::io(&path, e))
}

/// Records of the configured dataset. Without a data root the toy corpus is
/// rendered under `<run_dir>/data` (or reused if already there).
pub fn dataset(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<SampleRecord>> {
    match &cfg.data.root {
        Some(root) => load_manifest(root, cfg.data.layout),
        None => {
            let root = run_dir.join(TOY_DIR);
            if root.join(MANIFEST_FILE).exists() {
                load_manifest(&root, crate::data::Layout::ManifestFile)
            } else {
                generate_toy_dataset(&cfg.toy, &root, cfg.execution())
            }
        }
    }
}

pub fn build_models(cfg: &RunConfig) -> Result<(MmrModel, FrozenEncoder)> {
    let dev = device(cfg)?;
    let teacher = FrozenEncoder::new(&cfg.teacher, DType::F32, &dev)?;
    let store = match &cfg.encoder.weights_path {
        Some(path) => ParamStore::from_safetensors(path, cfg.train.seed, DType::F32, &dev)?,
        None => ParamStore::new(cfg.train.seed, DType::F32, &dev),
    };
    let side = cfg.data.preprocess.crop_to;
    let model = MmrModel::new(store, &cfg.encoder, &teacher, side, side)?;
    Ok((model, teacher))
}

/// Measure toy-teacher stage statistics on the un-augmented training images.
fn calibrate_teacher(teacher: &mut FrozenEncoder, images: &TrainImages, cfg: &RunConfig) -> Result<()> {
    let plain;
    let tensors: &[ImageTensor] = match images {
        TrainImages::Fixed(t) => t,
        TrainImages::Augmented { raw, preprocess } => {
            plain = exec::try_map(cfg.execution(), raw, |r| preprocess_image(r, preprocess, None))?;
            &plain
        }
    };
    let dev = device(cfg)?;
    let batches = tensors
        .chunks(cfg.train.batch_size)
        .map(|chunk| batch_tensor(&chunk.iter().collect::<Vec<_>>(), DType::F32, &dev))
        .collect::<Result<Vec<_>>>()?;
    log::info!("calibrating toy teacher statistics on {} images", tensors.len());
    teacher.calibrate(&batches)
}

struct RunObserver<'a> {
    csv: LossCsv<BufWriter<File>>,
    dir: PathBuf,
    cfg: &'a RunConfig,
    teacher: &'a FrozenEncoder,
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, record: &LossRecord) -> Result<()> {
        self.csv.on_step(record)
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &MmrModel) -> Result<()> {
        self.csv.on_epoch_end(epoch, model)?;
        let done = epoch + 1;
        if let Some(every) = self.cfg.train.checkpoint_every {
            if every > 0 && done.is_multiple_of(every) && done < self.cfg.train.epochs {
                let dir = self.dir.join("checkpoints").join(format!("epoch_{done:04}"));
                let meta = CheckpointMeta::new(model, self.teacher, &self.cfg.data.preprocess, &self.cfg.train, done)?;
                save_checkpoint(&dir, model, self.teacher, &meta)?;
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub losses: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub model: MmrModel,
    pub teacher: FrozenEncoder,
}

/// Train from scratch: echo config, stream `loss.csv`, write the final
/// checkpoint to `<run_dir>/checkpoint`.
pub fn train_run(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    write_run_header(run_dir, cfg, "train")?;
    let records = dataset(cfg, run_dir)?;
    let train_records: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train_records.is_empty() {
        return Err(MmrError::config("data.root", "manifest has no training samples"));
    }
    if let Some(bad) = train_records.iter().find(|r| r.label != Label::Normal) {
        return Err(MmrError::Manifest {
            path: bad.image_path.clone(),
            message: "training samples must be normal".into(),
        });
    }
    let mode = cfg.execution();
    let images = if cfg.train.augment {
        TrainImages::Augmented {
            raw: exec::try_map(mode, &train_records, |r| load_image(&r.image_path))?,
            preprocess: cfg.data.preprocess.clone(),
        }
    } else {
        TrainImages::Fixed(exec::try_map(mode, &train_records, |r| -> Result<ImageTensor> {
            preprocess_image(&load_image(&r.image_path)?, &cfg.data.preprocess, None)
        })?)
    };
    let (model, mut teacher) = build_models(cfg)?;
    if teacher.needs_calibration() {
        calibrate_teacher(&mut teacher, &images, cfg)?;
    }
    log::info!(
        "training {} parameters on {} images for {} epochs",
        model.store().num_trainable(),
        images.len(),
        cfg.train.epochs
    );
    let loss_path = run_dir.join(LOSS_FILE);
    let file = File::create(&loss_path).map_err(|e| MmrError::io(&loss_path, e))?;
    let mut observer = RunObserver {
        csv: LossCsv::new(BufWriter::new(file)).map_err(|e| MmrError::io(&loss_path, e))?,
        dir: run_dir.to_path_buf(),
        cfg,
        teacher: &teacher,
    };
    let losses = train(&model, &teacher, &images, &cfg.train, &mut observer, mode)?;
    let checkpoint = run_dir.join(CHECKPOINT_DIR);
    let meta = CheckpointMeta::new(&model, &teacher, &cfg.data.preprocess, &cfg.train, cfg.train.epochs)?;
    save_checkpoint(&checkpoint, &model, &teacher, &meta)?;
    Ok(TrainOutcome {
        losses,
        checkpoint,
        model,
        teacher,
    })
}

/// Load a checkpoint onto the configured device in single precision.
pub fn open_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<(MmrModel, FrozenEncoder, CheckpointMeta)> {
    load_checkpoint(checkpoint, DType::F32, &device(cfg)?)
}

/// Evaluate a checkpoint on the test split and write `report.{json,csv}`.
/// Without a data root, a toy corpus beside the checkpoint is reused.
pub fn evaluate_run(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<(EvalReport, Vec<ScoredSample>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| MmrError::io(out_dir, e))?;
    let (model, teacher, meta) = open_checkpoint(cfg, checkpoint)?;
    let home = match checkpoint.parent() {
        Some(run) if cfg.data.root.is_none() && run.join(TOY_DIR).join(MANIFEST_FILE).exists() => run,
        _ => out_dir,
    };
    let records = dataset(cfg, home)?;
    let (report, scored) = evaluate(
        &model,
        &teacher,
        &records,
        &meta.preprocess,
        cfg.eval.batch_size,
        cfg.eval.fpr_limit,
        cfg.execution(),
    )?;
    write_report(&report, out_dir)?;
    Ok((report, scored))
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    report.write_json(&dir.join(REPORT_JSON))?;
    let path = dir.join(REPORT_CSV);
    let file = File::create(&path).map_err(|e| MmrError::io(&path, e))?;
    report.write_csv(BufWriter::new(file))
}
