//! Patchification, random unit masking and reassembly of the token grid.
//!
//! Patch rows are flattened in `(row, column, channel)` order within each
//! `p × p` block, and blocks are enumerated row-major over the grid.

use candle_core::{Tensor, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{MmrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `n × (p·p·c)` row-major.
    pub patches: Vec<f32>,
    pub patch: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Side of a square grid.
    pub fn grid_side(&self) -> Option<usize> {
        (self.grid_h == self.grid_w).then_some(self.grid_h)
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.patches[k * self.dim()..(k + 1) * self.dim()]
    }

    /// Rows at the given grid positions, concatenated in the order given.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &k in indices {
            out.extend_from_slice(self.row(k));
        }
        out
    }
}

pub fn patchify(x: &ImageTensor, p: usize) -> Result<PatchSequence> {
    if p == 0 || !x.height.is_multiple_of(p) || !x.width.is_multiple_of(p) {
        return Err(MmrError::shape(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            x.height, x.width
        )));
    }
    let (gh, gw, c) = (x.height / p, x.width / p, x.channels);
    let mut patches = Vec::with_capacity(x.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        patches.push(x.at(ch, gy * p + py, gx * p + px));
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        patch: p,
        channels: c,
        grid_h: gh,
        grid_w: gw,
    })
}

pub fn unpatchify(seq: &PatchSequence, normalization: crate::data::Normalization) -> Result<ImageTensor> {
    let (p, c) = (seq.patch, seq.channels);
    let (h, w) = (seq.grid_h * p, seq.grid_w * p);
    let mut data = vec![0f32; c * h * w];
    let mut it = seq.patches.iter();
    for gy in 0..seq.grid_h {
        for gx in 0..seq.grid_w {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        data[(ch * h + gy * p + py) * w + gx * p + px] = *it.next().unwrap();
                    }
                }
            }
        }
    }
    ImageTensor::new(data, c, h, w, normalization)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked patches never reach the encoder.
    #[default]
    TokenDrop,
    /// Masked pixels are overwritten and the full image is encoded.
    InPlaceFill,
}

/// Result of random unit masking. `visible_indices` and `masked_indices` are
/// sorted and partition `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub eta: f64,
    /// Unit side in pixels; `None` when the unit is the encoder patch.
    pub unit_q: Option<usize>,
    pub mode: MaskMode,
    pub seed: u64,
    pub n: usize,
    pub visible_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
}

impl MaskSpec {
    /// Every position visible.
    pub fn unmasked(n: usize) -> Self {
        MaskSpec {
            eta: 0.0,
            unit_q: None,
            mode: MaskMode::TokenDrop,
            seed: 0,
            n,
            visible_indices: (0..n).collect(),
            masked_indices: Vec::new(),
        }
    }

    pub fn with_unit(mut self, q: usize, mode: MaskMode) -> Self {
        self.unit_q = Some(q);
        self.mode = mode;
        self
    }

    pub fn visible_count(&self) -> usize {
        self.visible_indices.len()
    }

    pub fn is_masked(&self) -> Vec<bool> {
        let mut m = vec![false; self.n];
        for &k in &self.masked_indices {
            m[k] = true;
        }
        m
    }
}

/// Number of units kept visible: `⌊n·(1−η)⌋`.
pub fn visible_count(n: usize, eta: f64) -> usize {
    // The small slack keeps exact products such as 10·0.7 from flooring to 6.
    ((n as f64 * (1.0 - eta)) + 1e-9).floor() as usize
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(MmrError::config("masking.eta", format!("{eta} is outside [0, 1)")));
    }
    Ok(())
}

/// Uniformly random visible subset of size `⌊n·(1−η)⌋`, deterministic in `seed`.
pub fn sample_mask_indices(n: usize, eta: f64, seed: u64) -> Result<MaskSpec> {
    check_eta(eta)?;
    if n == 0 {
        return Err(MmrError::config("masking.n", "need at least one unit"));
    }
    let keep = visible_count(n, eta);
    let mut visible = if keep == n {
        (0..n).collect::<Vec<_>>()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, n, keep).into_vec()
    };
    visible.sort_unstable();
    let mut is_visible = vec![false; n];
    for &k in &visible {
        is_visible[k] = true;
    }
    let masked = (0..n).filter(|&k| !is_visible[k]).collect();
    Ok(MaskSpec {
        eta,
        unit_q: None,
        mode: MaskMode::TokenDrop,
        seed,
        n,
        visible_indices: visible,
        masked_indices: masked,
    })
}

/// Sample a mask over `q × q` pixel units of an `h × w` image.
pub fn sample_unit_mask(h: usize, w: usize, q: usize, eta: f64, seed: u64, mode: MaskMode) -> Result<MaskSpec> {
    if q == 0 || !h.is_multiple_of(q) || !w.is_multiple_of(q) {
        return Err(MmrError::shape(format!("unit {q} does not tile a {h}x{w} image")));
    }
    Ok(sample_mask_indices((h / q) * (w / q), eta, seed)?.with_unit(q, mode))
}

/// Overwrite every masked `q × q` unit with `fill`; visible pixels are untouched.
pub fn apply_unit_mask(x: &ImageTensor, spec: &MaskSpec, fill: f32) -> Result<ImageTensor> {
    if spec.mode != MaskMode::InPlaceFill {
        return Err(MmrError::config("masking.mode", "in-place masking needs mode in_place_fill"));
    }
    let q = spec
        .unit_q
        .ok_or_else(|| MmrError::config("masking.unit_q", "in-place masking needs a unit size"))?;
    if q == 0 || !x.height.is_multiple_of(q) || !x.width.is_multiple_of(q) {
        return Err(MmrError::shape(format!(
            "unit {q} does not tile a {}x{} image",
            x.height, x.width
        )));
    }
    let units_w = x.width / q;
    if (x.height / q) * units_w != spec.n {
        return Err(MmrError::shape(format!(
            "mask covers {} units but the image has {}",
            spec.n,
            (x.height / q) * units_w
        )));
    }
    let mut out = x.clone();
    for &u in &spec.masked_indices {
        let (uy, ux) = (u / units_w, u % units_w);
        for c in 0..x.channels {
            for y in uy * q..(uy + 1) * q {
                let row = (c * x.height + y) * x.width;
                out.data[row + ux * q..row + (ux + 1) * q].fill(fill);
            }
        }
    }
    Ok(out)
}

/// Scatter encoder outputs and mask tokens back onto the full grid.
///
/// `visible` is `B × |V| × d`; position `k` of image `b` receives its encoder
/// row when `k` is visible and `mask_token + pos_emb[k]` otherwise. Returns
/// `B × grid_h × grid_w × d`.
pub fn assemble_full_grid(
    visible: &Tensor,
    specs: &[MaskSpec],
    mask_token: &Tensor,
    pos_emb: &Tensor,
    grid_h: usize,
    grid_w: usize,
) -> Result<Tensor> {
    let (b, v, d) = visible.dims3()?;
    let (n, pd) = pos_emb.dims2()?;
    if specs.len() != b {
        return Err(MmrError::shape(format!("{} mask specs for a batch of {b}", specs.len())));
    }
    if pd != d || mask_token.elem_count() != d {
        return Err(MmrError::shape(format!("embedding width {d} does not match positional width {pd}")));
    }
    if n != grid_h * grid_w {
        return Err(MmrError::shape(format!("{n} positions do not fill a {grid_h}x{grid_w} grid")));
    }
    let device = visible.device();
    let mask_token = mask_token.reshape((1, d))?;
    let mut pieces = Vec::with_capacity(2 * b);
    let mut order = vec![0u32; b * n];
    let mut offset = 0usize;
    for (bi, spec) in specs.iter().enumerate() {
        if spec.n != n || spec.visible_count() != v {
            return Err(MmrError::shape(format!(
                "spec has {} of {} visible but the encoder produced {v} of {n}",
                spec.visible_count(),
                spec.n
            )));
        }
        pieces.push(visible.get(bi)?);
        for (j, &k) in spec.visible_indices.iter().enumerate() {
            order[bi * n + k] = (offset + j) as u32;
        }
        offset += v;
        if !spec.masked_indices.is_empty() {
            let idx: Vec<u32> = spec.masked_indices.iter().map(|&k| k as u32).collect();
            let idx = Tensor::from_vec(idx, spec.masked_indices.len(), device)?;
            pieces.push(pos_emb.index_select(&idx, 0)?.broadcast_add(&mask_token)?);
            for (j, &k) in spec.masked_indices.iter().enumerate() {
                order[bi * n + k] = (offset + j) as u32;
            }
            offset += spec.masked_indices.len();
        }
    }
    let stacked = Tensor::cat(&pieces, 0)?;
    let order = Tensor::from_vec(order, b * n, device)?;
    let grid = stacked.index_select(&order, 0)?;
    Ok(grid.reshape((b, grid_h, grid_w, d))?)
}

/// Count grid cells equal to `token` (up to `tol`) in a `B × h × w × d` grid,
/// per batch element.
pub fn cells_matching(grid: &Tensor, token: &Tensor, tol: f64) -> Result<Vec<Vec<usize>>> {
    let (b, h, w, d) = grid.dims4()?;
    let diff = grid
        .reshape((b, h * w, d))?
        .broadcast_sub(&token.reshape((1, 1, d))?)?
        .abs()?
        .max(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_vec2::<f64>()?;
    Ok(diff
        .into_iter()
        .map(|row| row.iter().enumerate().filter(|(_, &v)| v <= tol).map(|(k, _)| k).collect())
        .collect())
}
