//! Heatmap throughput at a fixed input size.

use std::time::Instant;

use anyhow::{Context, Result};
use mmr_core::backbones::{TeacherWeights, VitVariant};
use mmr_core::config::RunConfig;
use mmr_core::data::{ImageTensor, Normalization};
use mmr_core::evaluate::infer_batch;
use mmr_core::pipeline;
use mmr_core::MmrError;
use serde::Serialize;

pub const BENCH_FILE: &str = "bench.json";

#[derive(Debug, Serialize)]
pub struct Hardware {
    pub cpu: String,
    pub logical_cpus: usize,
    pub os: &'static str,
    pub arch: &'static str,
    pub parallel: bool,
}

impl Hardware {
    pub fn detect(parallel: bool) -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|text| {
                text.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Hardware {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            parallel,
        }
    }
}

#[derive(Debug, Serialize)]
struct BenchReport {
    images_per_second: f64,
    seconds: f64,
    images: usize,
    size: usize,
    batch: usize,
    /// `pretrained`, or `random` when no weight files were available.
    weights: &'static str,
    encoder: String,
    teacher: String,
    hardware: Hardware,
}

pub fn size_overrides(size: usize) -> Vec<(String, String)> {
    vec![
        ("data.preprocess.resize_to".into(), size.to_string()),
        ("data.preprocess.crop_to".into(), size.to_string()),
        ("toy.image_size".into(), size.max(1).to_string()),
    ]
}

/// Same architecture with random parameters.
fn random_weights(cfg: &RunConfig) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.teacher.weights = TeacherWeights::Random;
    cfg.teacher.weights_path = None;
    cfg.encoder.variant = VitVariant::VitTinyScratch;
    cfg.encoder.weights_path = None;
    cfg
}

fn synthetic_image(size: usize, k: usize) -> mmr_core::Result<ImageTensor> {
    let data = (0..3 * size * size)
        .map(|i| ((i * 31 + k * 7) % 97) as f32 / 48.0 - 1.0)
        .collect();
    ImageTensor::new(data, 3, size, size, Normalization::default())
}

pub fn run(cfg: &RunConfig, batch: usize, warmup: usize, iters: usize) -> Result<()> {
    if batch == 0 || iters == 0 {
        return Err(MmrError::config("bench", "batch and iters must be positive").into());
    }
    let (built, weights) = match pipeline::build_models(cfg) {
        Ok(m) => (m, "pretrained"),
        Err(MmrError::WeightsUnavailable(why)) => {
            log::warn!("{why}; benchmarking random weights of the same architecture");
            (pipeline::build_models(&random_weights(cfg))?, "random")
        }
        Err(e) => return Err(e.into()),
    };
    let (model, teacher) = built;
    let size = cfg.data.preprocess.crop_to;
    let images: Vec<ImageTensor> = (0..batch).map(|k| synthetic_image(size, k)).collect::<mmr_core::Result<_>>()?;
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let mode = cfg.execution();
    for _ in 0..warmup {
        infer_batch(&model, &teacher, &refs, mode)?;
    }
    let start = Instant::now();
    for _ in 0..iters {
        infer_batch(&model, &teacher, &refs, mode)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let n = batch * iters;
    let report = BenchReport {
        images_per_second: n as f64 / seconds,
        seconds,
        images: n,
        size,
        batch,
        weights,
        encoder: format!(
            "{:?} width {} depth {} patch {}",
            cfg.encoder.variant, cfg.encoder.width, cfg.encoder.depth, cfg.encoder.patch
        ),
        teacher: format!("{:?} stages {:?}", cfg.teacher.family, cfg.teacher.stages_used),
        hardware: Hardware::detect(mode.is_parallel()),
    };
    let dir = &cfg.run.out_dir;
    pipeline::write_run_header(dir, cfg, "bench")?;
    let path = dir.join(BENCH_FILE);
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, &json).with_context(|| path.display().to_string())?;
    println!("{json}");
    Ok(())
}
