//! Procedural "blade" corpus with injected defects and synthetic domain shifts.
//!
//! Every image shows one tapered, rounded bar at a random angle on a flat
//! background. Anomalous test images receive exactly one defect whose binary
//! mask is written alongside the image. Shifts only touch test images.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, DomainTag, Label, SampleRecord, Split};
use super::manifest::{write_manifest, MANIFEST_FILE};
use crate::error::{MmrError, Result};
use crate::exec::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Hole,
    Blotch,
}

impl DefectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Hole => "hole",
            DefectKind::Blotch => "blotch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Background,
    Illumination,
    MirrorView,
}

impl ShiftKind {
    pub fn domain(self) -> DomainTag {
        match self {
            ShiftKind::None => DomainTag::Same,
            ShiftKind::Background => DomainTag::Background,
            ShiftKind::Illumination => DomainTag::Illumination,
            ShiftKind::MirrorView => DomainTag::View,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    /// Totals over all shift kinds, assigned round-robin.
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub image_size: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub shift_kinds: Vec<ShiftKind>,
    pub seed: u64,
    /// Brightness multiplier of the illumination shift.
    pub illumination_factor: f32,
    pub noise_std: f32,
    /// Multiplies every defect size, 1.0 = nominal.
    pub defect_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_train: 200,
            n_test_normal: 50,
            n_test_anomalous: 50,
            image_size: 128,
            defect_kinds: vec![DefectKind::Scratch, DefectKind::Hole, DefectKind::Blotch],
            shift_kinds: vec![ShiftKind::None],
            seed: 0,
            illumination_factor: 0.6,
            noise_std: 0.01,
            defect_scale: 1.4,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, n) in [
            ("toy.n_train", self.n_train),
            ("toy.n_test_normal", self.n_test_normal),
            ("toy.n_test_anomalous", self.n_test_anomalous),
        ] {
            if n == 0 {
                return Err(MmrError::config(field, "must be positive"));
            }
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(16) {
            return Err(MmrError::config(
                "toy.image_size",
                format!("{} must be a multiple of 16 and at least 32", self.image_size),
            ));
        }
        if self.defect_kinds.is_empty() {
            return Err(MmrError::config("toy.defect_kinds", "empty while anomalous test samples are requested"));
        }
        if self.shift_kinds.is_empty() {
            return Err(MmrError::config("toy.shift_kinds", "must name at least one shift (use `none`)"));
        }
        if !(self.illumination_factor > 0.0 && self.illumination_factor.is_finite()) {
            return Err(MmrError::config("toy.illumination_factor", "must be positive"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(MmrError::config("toy.noise_std", "must be non-negative"));
        }
        if !(self.defect_scale > 0.0 && self.defect_scale <= 3.0) {
            return Err(MmrError::config("toy.defect_scale", "must lie in (0, 3]"));
        }
        Ok(())
    }
}

const TRAIN_BACKGROUNDS: [[f32; 3]; 3] = [[0.1, 0.1, 0.1], [0.35, 0.35, 0.35], [0.1, 0.15, 0.4]];
const SHIFT_BACKGROUND: [f32; 3] = [0.45, 0.25, 0.1];
const BLADE_COLOR: [f32; 3] = [0.75, 0.72, 0.65];
const SCRATCH_VALUE: f32 = 0.08;
const BLOTCH_TINT: [f32; 3] = [0.6, 0.35, 0.2];
/// Sizes below are nominal for a 128-pixel image.
const NOMINAL_SIZE: f64 = 128.0;

/// Region a defect was rendered into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DefectGeometry {
    Disk { cy: f64, cx: f64, r: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Stroke { pixels: Vec<(usize, usize)> },
}

impl DefectGeometry {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f64, x as f64);
        match self {
            DefectGeometry::Disk { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
            DefectGeometry::Ellipse { cy, cx, ry, rx } => ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0,
            DefectGeometry::Stroke { pixels } => pixels.contains(&(y, x)),
        }
    }

    /// Pixels of a `size × size` image inside the geometry.
    pub fn area(&self, size: usize) -> usize {
        match self {
            DefectGeometry::Stroke { pixels } => pixels.len(),
            _ => (0..size * size).filter(|&i| self.contains(i / size, i % size)).count(),
        }
    }
}

/// One rendered image with its ground truth.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: RgbImage,
    pub mask: Option<BinaryMask>,
    pub defect: Option<(DefectKind, DefectGeometry)>,
    pub domain: DomainTag,
}

struct Blade {
    /// Hard inside test, defects must stay within it.
    inside: Vec<bool>,
    /// Anti-aliased coverage in `[0, 1]`.
    coverage: Vec<f32>,
    shade: Vec<f32>,
}

fn render_blade(size: usize, rng: &mut ChaCha8Rng, mirror: bool) -> Blade {
    let s = size as f64;
    let cx = s * (0.5 + rng.random_range(-0.06..0.06));
    let cy = s * (0.5 + rng.random_range(-0.06..0.06));
    let angle = rng.random_range(25.0f64..45.0).to_radians();
    let half_len = s * rng.random_range(0.30..0.36);
    let half_width = s * rng.random_range(0.10..0.13);
    let (sin, cos) = angle.sin_cos();
    let n = size * size;
    let mut blade = Blade {
        inside: vec![false; n],
        coverage: vec![0.0; n],
        shade: vec![0.0; n],
    };
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let local_width = half_width * (1.0 - 0.35 * u / half_len);
            let cap = ((u - u.clamp(-half_len, half_len)).powi(2) + v * v).sqrt();
            let inside = (v.abs() <= local_width && u.abs() <= half_len) || cap <= local_width;
            let signed = if u.abs() <= half_len { v.abs() - local_width } else { cap - local_width };
            let xo = if mirror { size - 1 - x } else { x };
            let i = y * size + xo;
            blade.inside[i] = inside;
            blade.coverage[i] = (0.5 - signed / 1.5).clamp(0.0, 1.0) as f32;
            blade.shade[i] = (0.55 + 0.25 * (u / half_len).clamp(-1.0, 1.0)) as f32;
        }
    }
    blade
}

fn place_defect(
    kind: DefectKind,
    size: usize,
    scale: f64,
    inside: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<DefectGeometry> {
    let candidates: Vec<usize> = (0..inside.len()).filter(|&i| inside[i]).collect();
    if candidates.is_empty() {
        return Err(MmrError::config("toy.image_size", "blade too small to host a defect"));
    }
    let unit = size as f64 / NOMINAL_SIZE;
    for attempt in 0..1000 {
        // Shrink slowly if the blade keeps rejecting placements.
        let scale = scale * unit * 0.9f64.powi(attempt / 100);
        let c = candidates[rng.random_range(0..candidates.len())];
        let (cy, cx) = ((c / size) as f64, (c % size) as f64);
        let geometry = match kind {
            DefectKind::Hole => DefectGeometry::Disk {
                cy,
                cx,
                r: rng.random_range(6.0..10.0) * scale,
            },
            DefectKind::Blotch => {
                let r = rng.random_range(7.0..11.0) * scale;
                DefectGeometry::Ellipse {
                    cy,
                    cx,
                    ry: r,
                    rx: r * rng.random_range(0.6..1.4),
                }
            }
            DefectKind::Scratch => {
                let a = rng.random_range(0.0..PI);
                let len = rng.random_range(22.0..34.0) * scale;
                let (sa, ca) = a.sin_cos();
                let mut pixels = Vec::new();
                let mut outside = false;
                for k in 0..200 {
                    let t = -len / 2.0 + len * k as f64 / 199.0;
                    for w in -2..=2 {
                        let w = w as f64 * 0.7;
                        let px = (cx + t * ca - w * sa).round();
                        let py = (cy + t * sa + w * ca).round();
                        if px < 0.0 || py < 0.0 || px >= size as f64 || py >= size as f64 {
                            outside = true;
                            continue;
                        }
                        pixels.push((py as usize, px as usize));
                    }
                }
                if outside {
                    continue;
                }
                pixels.sort_unstable();
                pixels.dedup();
                DefectGeometry::Stroke { pixels }
            }
        };
        let fits = (0..size * size).all(|i| !geometry.contains(i / size, i % size) || inside[i]);
        if fits {
            return Ok(geometry);
        }
    }
    Err(MmrError::config("toy.defect_scale", "could not place a defect inside the blade"))
}

/// Render one sample. `stream` selects an independent random stream so any
/// sample can be regenerated in isolation.
pub fn render_toy_sample(
    cfg: &ToyConfig,
    stream: u64,
    shift: ShiftKind,
    defect: Option<DefectKind>,
) -> Result<ToySample> {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream << 1);
    let mut defect_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    defect_rng.set_stream((stream << 1) | 1);

    let blade = render_blade(size, &mut rng, shift == ShiftKind::MirrorView);
    let background = if shift == ShiftKind::Background {
        SHIFT_BACKGROUND
    } else {
        TRAIN_BACKGROUNDS[rng.random_range(0..TRAIN_BACKGROUNDS.len())]
    };
    let mut pixels = vec![[0f32; 3]; size * size];
    for (i, px) in pixels.iter_mut().enumerate() {
        let (y, x) = (i / size, i % size);
        let stripes = 0.04 * ((x + y) as f32 * 0.8).sin();
        let cov = blade.coverage[i];
        for c in 0..3 {
            let fg = BLADE_COLOR[c] * blade.shade[i] + stripes;
            px[c] = background[c] * (1.0 - cov) + fg * cov;
        }
    }

    let mut mask = None;
    let mut placed = None;
    if let Some(kind) = defect {
        let geometry = place_defect(kind, size, cfg.defect_scale, &blade.inside, &mut defect_rng)?;
        let mut m = BinaryMask::empty(size, size);
        for (i, px) in pixels.iter_mut().enumerate() {
            if !geometry.contains(i / size, i % size) {
                continue;
            }
            m.data[i] = true;
            *px = match kind {
                DefectKind::Hole => background,
                DefectKind::Scratch => [SCRATCH_VALUE; 3],
                DefectKind::Blotch => {
                    let t: f32 = defect_rng.random();
                    BLOTCH_TINT.map(|v| v * t)
                }
            };
        }
        mask = Some(m);
        placed = Some((kind, geometry));
    }

    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| MmrError::config("toy.noise_std", e.to_string()))?;
    let gain = if shift == ShiftKind::Illumination { cfg.illumination_factor } else { 1.0 };
    let mut image = RgbImage::new(size as u32, size as u32);
    for (i, px) in pixels.iter().enumerate() {
        let rgb = px.map(|v| {
            let v = (v + noise.sample(&mut rng)) * gain;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        image.put_pixel((i % size) as u32, (i / size) as u32, Rgb(rgb));
    }
    Ok(ToySample {
        image,
        mask,
        defect: placed,
        domain: shift.domain(),
    })
}

/// Everything needed to render and place one corpus entry.
struct Job {
    stream: u64,
    shift: ShiftKind,
    defect: Option<DefectKind>,
    split: Split,
    image: PathBuf,
    mask: Option<PathBuf>,
}

fn plan(cfg: &ToyConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for i in 0..cfg.n_train {
        jobs.push(Job {
            stream: i as u64,
            shift: ShiftKind::None,
            defect: None,
            split: Split::Train,
            image: PathBuf::from(format!("train/good/{i:04}.png")),
            mask: None,
        });
    }
    let ns = cfg.shift_kinds.len();
    for i in 0..cfg.n_test_normal {
        let shift = cfg.shift_kinds[i % ns];
        jobs.push(Job {
            stream: (1 << 40) | i as u64,
            shift,
            defect: None,
            split: Split::Test,
            image: PathBuf::from(format!("test/{}/good/{i:04}.png", shift.domain())),
            mask: None,
        });
    }
    for i in 0..cfg.n_test_anomalous {
        let shift = cfg.shift_kinds[i % ns];
        let kind = cfg.defect_kinds[(i / ns) % cfg.defect_kinds.len()];
        let rel = format!("{}/{}/{i:04}.png", shift.domain(), kind.as_str());
        jobs.push(Job {
            stream: (2 << 40) | i as u64,
            shift,
            defect: Some(kind),
            split: Split::Test,
            image: PathBuf::from(format!("test/{rel}")),
            mask: Some(PathBuf::from(format!("ground_truth/{rel}"))),
        });
    }
    jobs
}

fn save_png(path: &Path, write: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MmrError::io(parent, e))?;
    }
    write(path)?;
    Ok(())
}

/// Render the corpus into `out_root` using the aebad directory layout and a
/// `manifest.jsonl` index. Returns the records in manifest order.
pub fn generate_toy_dataset(cfg: &ToyConfig, out_root: &Path, mode: Execution) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_root).map_err(|e| MmrError::io(out_root, e))?;
    let jobs = plan(cfg);
    let records = exec::try_map(mode, &jobs, |job| -> Result<SampleRecord> {
        let sample = render_toy_sample(cfg, job.stream, job.shift, job.defect)?;
        let image_path = out_root.join(&job.image);
        save_png(&image_path, |p| sample.image.save(p))?;
        let mask_path = match (&job.mask, &sample.mask) {
            (Some(rel), Some(m)) => {
                let path = out_root.join(rel);
                let gray = GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
                    Luma([if m.data[y as usize * m.width + x as usize] { 255 } else { 0 }])
                });
                save_png(&path, |p| gray.save(p))?;
                Some(path)
            }
            _ => None,
        };
        Ok(SampleRecord {
            image_path,
            label: if job.defect.is_some() { Label::Anomalous } else { Label::Normal },
            mask_path,
            domain_tag: if job.split == Split::Train { DomainTag::Train } else { sample.domain },
            split: job.split,
        })
    })?;
    write_manifest(&out_root.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            n_train: 4,
            n_test_normal: 4,
            n_test_anomalous: 6,
            image_size: 64,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn empty_defects_rejected() {
        let cfg = ToyConfig {
            defect_kinds: vec![],
            ..small()
        };
        match cfg.validate() {
            Err(MmrError::Config { field, .. }) => assert_eq!(field, "toy.defect_kinds"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_lies_inside_geometry() {
        let cfg = small();
        for (i, kind) in [DefectKind::Scratch, DefectKind::Hole, DefectKind::Blotch].into_iter().enumerate() {
            for s in 0..5u64 {
                let sample = render_toy_sample(&cfg, (2 << 40) | (i as u64 * 10 + s), ShiftKind::None, Some(kind)).unwrap();
                let mask = sample.mask.unwrap();
                let (_, geometry) = sample.defect.unwrap();
                assert!(mask.positives() > 0);
                for (p, &on) in mask.data.iter().enumerate() {
                    if on {
                        assert!(geometry.contains(p / 64, p % 64));
                    }
                }
            }
        }
    }

    #[test]
    fn hole_mask_matches_disk_area() {
        let cfg = small();
        let sample = render_toy_sample(&cfg, 3, ShiftKind::None, Some(DefectKind::Hole)).unwrap();
        let (_, geometry) = sample.defect.unwrap();
        assert_eq!(sample.mask.unwrap().positives(), geometry.area(64));
    }

    #[test]
    fn rendering_is_reproducible() {
        let cfg = small();
        let a = render_toy_sample(&cfg, 9, ShiftKind::Background, Some(DefectKind::Blotch)).unwrap();
        let b = render_toy_sample(&cfg, 9, ShiftKind::Background, Some(DefectKind::Blotch)).unwrap();
        assert_eq!(a.image, b.image);
        let c = render_toy_sample(&cfg, 10, ShiftKind::Background, Some(DefectKind::Blotch)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn corpus_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            shift_kinds: vec![ShiftKind::None, ShiftKind::MirrorView],
            ..small()
        };
        let written = generate_toy_dataset(&cfg, dir.path(), Execution::Sequential).unwrap();
        assert_eq!(written.len(), 14);
        let loaded = super::super::load_manifest(dir.path(), super::super::Layout::Aebad).unwrap();
        assert_eq!(loaded.len(), 14);
        assert_eq!(loaded.iter().filter(|r| r.domain_tag == DomainTag::View).count(), 5);
        assert!(loaded.iter().all(|r| r.label == Label::Normal || r.mask_path.is_some()));
    }
}
