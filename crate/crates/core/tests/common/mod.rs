//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use mmr_core::backbones::MultiScaleFeatures;
use mmr_core::data::BinaryMask;
use mmr_core::scoring::AnomalyMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One feature map held as nested vectors `[b][c][y][x]`.
pub type Plane4 = Vec<Vec<Vec<Vec<f64>>>>;

pub fn random_plane(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Plane4 {
    (0..b)
        .map(|_| {
            (0..c)
                .map(|_| (0..h).map(|_| (0..w).map(|_| rng.sample(StandardNormal)).collect()).collect())
                .collect()
        })
        .collect()
}

pub fn to_tensor(p: &Plane4, dtype: DType) -> Tensor {
    let (b, c, h, w) = (p.len(), p[0].len(), p[0][0].len(), p[0][0][0].len());
    let flat: Vec<f64> = p.iter().flatten().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (b, c, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn features(planes: &[Plane4], dtype: DType) -> MultiScaleFeatures {
    let maps = planes.iter().map(|p| to_tensor(p, dtype)).collect();
    let stages = (0..planes.len()).map(|i| 3 - i).collect();
    MultiScaleFeatures::new(maps, stages).unwrap()
}

/// `1 − cos` between the channel vectors of `a` and `b` at one position.
pub fn one_minus_cos(a: &Plane4, b: &Plane4, n: usize, y: usize, x: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for c in 0..a[n].len() {
        let (u, v) = (a[n][c][y][x], b[n][c][y][x]);
        dot += u * v;
        na += u * u;
        nb += v * v;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        1.0
    } else {
        1.0 - (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Sum over scales of the mean over batch and positions of `1 − cos`.
pub fn loss_oracle(student: &[Plane4], teacher: &[Plane4]) -> f64 {
    student
        .iter()
        .zip(teacher)
        .map(|(a, b)| {
            let (nb, h, w) = (a.len(), a[0][0].len(), a[0][0][0].len());
            let mut sum = 0.0;
            for n in 0..nb {
                for y in 0..h {
                    for x in 0..w {
                        sum += one_minus_cos(a, b, n, y, x);
                    }
                }
            }
            sum / (nb * h * w) as f64
        })
        .sum()
}

/// Source coordinate and weights of half-pixel bilinear sampling along one axis.
fn taps(j: usize, in_len: usize, out_len: usize) -> [(usize, f64); 2] {
    let src = ((j as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let t = if hi == lo { 0.0 } else { src - lo as f64 };
    [(lo, 1.0 - t), (hi, t)]
}

/// Anomaly value at output pixel `(y, x)` of image `n`, evaluated directly from
/// the features at the four neighbouring positions of every scale.
pub fn map_oracle(student: &[Plane4], teacher: &[Plane4], n: usize, y: usize, x: usize, out_h: usize, out_w: usize) -> f64 {
    student
        .iter()
        .zip(teacher)
        .map(|(a, b)| {
            let (h, w) = (a[0][0].len(), a[0][0][0].len());
            let mut v = 0.0;
            for (sy, wy) in taps(y, h, out_h) {
                for (sx, wx) in taps(x, w, out_w) {
                    v += wy * wx * one_minus_cos(a, b, n, sy, sx);
                }
            }
            v
        })
        .sum()
}

/// Probability that a random positive outranks a random negative, ties half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// 8-connected component labels via union-find.
pub fn union_find_labels(mask: &BinaryMask) -> Vec<Option<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.data[y * w + x] {
                continue;
            }
            for (dy, dx) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || nx >= w as i64 {
                    continue;
                }
                let k = ny as usize * w + nx as usize;
                if mask.data[k] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, k));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut roots = std::collections::BTreeMap::new();
    (0..h * w)
        .map(|i| {
            if !mask.data[i] {
                return None;
            }
            let r = find(&mut parent, i);
            let next = roots.len();
            Some(*roots.entry(r).or_insert(next))
        })
        .collect()
}

/// Normalized area under the per-region-overlap curve up to `limit`, from a
/// separate pass over every distinct threshold.
pub fn pro_oracle(maps: &[AnomalyMap], masks: &[BinaryMask], limit: f64) -> f64 {
    let mut regions: Vec<Vec<f32>> = Vec::new();
    let mut normal: Vec<f32> = Vec::new();
    for (m, mask) in maps.iter().zip(masks) {
        let labels = union_find_labels(mask);
        let base = regions.len();
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(r) => {
                    if base + r >= regions.len() {
                        regions.resize(base + r + 1, Vec::new());
                    }
                    regions[base + r].push(m.map[i]);
                }
                None => normal.push(m.map[i]),
            }
        }
    }
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.map.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = normal.iter().filter(|&&v| v >= t).count() as f64 / normal.len() as f64;
        let pro = regions
            .iter()
            .map(|r| r.iter().filter(|&&v| v >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_cut) / 2.0;
        }
    }
    area / limit
}

/// Random pyramid: 1..=3 scales halving in side, shared batch size.
pub fn random_pair(seed: u64) -> (Vec<Plane4>, Vec<Plane4>) {
    let mut r = rng(seed);
    let scales = r.random_range(1..=3);
    let batch = r.random_range(1..=3);
    let side = [2usize, 3, 4][r.random_range(0..3)];
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for k in 0..scales {
        let c = r.random_range(1..=8);
        let h = side << k;
        let w = (side + 1) << k;
        s.push(random_plane(&mut r, batch, c, h, w));
        let mut target = random_plane(&mut r, batch, c, h, w);
        // some positions exactly reconstructed
        if r.random_bool(0.5) {
            target[0][..].clone_from_slice(&s[k][0]);
        }
        t.push(target);
    }
    (s, t)
}

/// Random mask made of a few filled rectangles.
pub fn random_blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(h, w);
    for _ in 0..rng.random_range(0..4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(1..5), rng.random_range(1..5));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                mask.data[y * w + x] = true;
            }
        }
    }
    mask
}
