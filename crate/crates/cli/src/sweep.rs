//! Grid of train + evaluate runs over declared configuration axes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use mmr_core::data::{generate_toy_dataset, MANIFEST_FILE};
use mmr_core::pipeline;
use mmr_core::MmrError;
use serde::Serialize;

use crate::App;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parse `name=v1,v2,...`.
    pub fn parse(spec: &str) -> mmr_core::Result<Self> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| MmrError::config("sweep.axis", format!("`{spec}` should look like name=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if name.trim().is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(MmrError::config("sweep.axis", format!("`{spec}` has an empty name or value")));
        }
        Ok(Axis {
            name: name.trim().to_string(),
            values,
        })
    }

    /// Configuration overrides selecting `value` on this axis.
    pub fn overrides(&self, value: &str) -> Vec<(String, String)> {
        match self.name.as_str() {
            "eta" => vec![("train.eta".into(), value.into())],
            "q" => vec![
                ("train.mask_mode".into(), "\"in_place_fill\"".into()),
                ("train.unit_q".into(), value.into()),
            ],
            "stages" => vec![("teacher.stages_used".into(), format!("[{}]", value.replace('+', ",")))],
            key => vec![(key.into(), value.into())],
        }
    }
}

/// Cartesian product of axis values, first axis slowest.
pub fn grid(axes: &[Axis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|point| {
                axis.values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Serialize)]
struct Row {
    point: Vec<(String, String)>,
    run_dir: PathBuf,
    sample_auroc: Option<f64>,
    pixel_auroc: Option<f64>,
    pro: Option<f64>,
    final_loss: Option<f32>,
    error: Option<String>,
}

fn label(axes: &[Axis], point: &[String]) -> String {
    axes.iter()
        .zip(point)
        .map(|(a, v)| format!("{}-{}", a.name, v).replace(['/', '\\', ' ', '"'], "_"))
        .collect::<Vec<_>>()
        .join("_")
}

fn run_point(app: &App, shared: &[(String, String)], axes: &[Axis], point: &[String], dir: &Path) -> Result<Row> {
    let mut extra = shared.to_vec();
    for (axis, value) in axes.iter().zip(point) {
        extra.extend(axis.overrides(value));
    }
    extra.push(("run.out_dir".into(), format!("{:?}", dir.display().to_string())));
    let cfg = app.resolve_with(None, &extra)?;
    let outcome = pipeline::train_run(&cfg, dir)?;
    let last_epoch = outcome.losses.last().map(|r| r.epoch);
    let tail: Vec<f32> = outcome
        .losses
        .iter()
        .filter(|r| Some(r.epoch) == last_epoch)
        .map(|r| r.loss)
        .collect();
    let final_loss = (!tail.is_empty()).then(|| tail.iter().sum::<f32>() / tail.len() as f32);
    let (report, _) = pipeline::evaluate_run(&cfg, &outcome.checkpoint, dir)?;
    Ok(Row {
        point: Vec::new(),
        run_dir: dir.to_path_buf(),
        sample_auroc: Some(report.sample_auroc),
        pixel_auroc: report.pixel_auroc,
        pro: report.pro,
        final_loss,
        error: None,
    })
}

pub fn run(app: &App, axes: &[Axis], jobs: usize) -> Result<()> {
    let base = app.resolve()?;
    let root = base.run.out_dir.clone();
    std::fs::create_dir_all(&root).with_context(|| root.display().to_string())?;
    pipeline::write_run_header(&root, &base, "sweep")?;

    let mut shared = Vec::new();
    if base.data.root.is_none() {
        let data = root.join(pipeline::TOY_DIR);
        if !data.join(MANIFEST_FILE).exists() {
            generate_toy_dataset(&base.toy, &data, base.execution())?;
        }
        shared.push(("data.root".into(), format!("{:?}", data.display().to_string())));
        shared.push(("data.layout".into(), "\"manifest_file\"".into()));
    }

    let points = grid(axes);
    log::info!("sweep over {} runs", points.len());
    let rows: Mutex<Vec<Option<Row>>> = Mutex::new(vec![None; points.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(point) = points.get(i) else { break };
        let dir = root.join(format!("{i:02}_{}", label(axes, point)));
        let named: Vec<(String, String)> = axes.iter().map(|a| a.name.clone()).zip(point.iter().cloned()).collect();
        let mut row = run_point(app, &shared, axes, point, &dir).unwrap_or_else(|e| {
            log::error!("run {i} failed: {e:#}");
            Row {
                point: Vec::new(),
                run_dir: dir.clone(),
                sample_auroc: None,
                pixel_auroc: None,
                pro: None,
                final_loss: None,
                error: Some(format!("{e:#}")),
            }
        });
        row.point = named;
        rows.lock().expect("no worker panics while holding the lock")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(worker);
        }
    });
    let rows: Vec<Row> = rows.into_inner()?.into_iter().map(|r| r.expect("every point ran")).collect();

    write_table(&root.join(SWEEP_CSV), axes, &rows)?;
    let json = root.join(SWEEP_JSON);
    std::fs::write(&json, serde_json::to_string_pretty(&rows)?).with_context(|| json.display().to_string())?;
    for row in &rows {
        let point: Vec<String> = row.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match &row.error {
            None => println!(
                "{}\tauroc {}\tpixel {}\tpro {}",
                point.join(" "),
                crate::fmt_opt(row.sample_auroc),
                crate::fmt_opt(row.pixel_auroc),
                crate::fmt_opt(row.pro)
            ),
            Some(e) => println!("{}\terror: {e}", point.join(" ")),
        }
    }
    println!("table: {}", root.join(SWEEP_CSV).display());
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} sweep runs failed", rows.len());
    }
    Ok(())
}

fn write_table(path: &Path, axes: &[Axis], rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.extend(
        ["sample_auroc", "pixel_auroc", "pro", "final_loss", "run_dir", "error"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let mut rec: Vec<String> = row.point.iter().map(|(_, v)| v.clone()).collect();
        rec.push(opt(row.sample_auroc));
        rec.push(opt(row.pixel_auroc));
        rec.push(opt(row.pro));
        rec.push(row.final_loss.map(|v| v.to_string()).unwrap_or_default());
        rec.push(row.run_dir.display().to_string());
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmr_core::config::RunConfig;

    #[test]
    fn axis_parses_values() {
        let a = Axis::parse("eta=0, 0.4,0.9").unwrap();
        assert_eq!(a.name, "eta");
        assert_eq!(a.values, ["0", "0.4", "0.9"]);
        assert!(Axis::parse("eta").is_err());
        assert!(Axis::parse("eta=0,,1").is_err());
    }

    #[test]
    fn named_axes_expand_to_config_keys() {
        let q = Axis::parse("q=8").unwrap();
        assert_eq!(q.overrides("8")[1], ("train.unit_q".to_string(), "8".to_string()));
        let s = Axis::parse("stages=1+2").unwrap();
        assert_eq!(s.overrides("1+2"), [("teacher.stages_used".to_string(), "[1,2]".to_string())]);
        let cfg = RunConfig::resolve(RunConfig::toy(), None, &s.overrides("2+3")).unwrap();
        assert_eq!(cfg.teacher.stages_used, [2, 3]);
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let axes = [Axis::parse("eta=0,0.4,0.9").unwrap(), Axis::parse("q=4,8").unwrap()];
        let g = grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], ["0", "8"]);
        assert_eq!(label(&axes, &g[5]), "eta-0.9_q-8");
    }
}
