use serde::{Deserialize, Serialize};

use super::regions::label_components;
use crate::data::BinaryMask;
use crate::error::{MmrError, Result};
use crate::exec::{self, Execution};
use crate::scoring::AnomalyMap;

/// Above this many distinct values the sweep switches to quantile thresholds.
pub const MAX_EXACT_THRESHOLDS: usize = 100_000;
pub const QUANTILE_THRESHOLDS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSweep {
    Exact,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProResult {
    pub pro: f64,
    pub sweep: ThresholdSweep,
    pub thresholds: usize,
    pub regions: usize,
}

/// Ground truth flattened into per-region and normal-pixel score lists, each
/// sorted ascending so counts above a threshold are binary searches.
struct SweepData {
    regions: Vec<Vec<f32>>,
    normal: Vec<f32>,
}

impl SweepData {
    fn build(maps: &[AnomalyMap], masks: &[BinaryMask], mode: Execution) -> Result<Self> {
        if maps.len() != masks.len() {
            return Err(MmrError::shape(format!("{} maps for {} masks", maps.len(), masks.len())));
        }
        for (m, g) in maps.iter().zip(masks) {
            if (m.height, m.width) != (g.height, g.width) {
                return Err(MmrError::shape(format!(
                    "{}x{} map paired with a {}x{} mask",
                    m.height, m.width, g.height, g.width
                )));
            }
            if m.map.iter().any(|v| v.is_nan()) {
                return Err(MmrError::UndefinedMetric("anomaly map contains NaN".into()));
            }
        }
        let pairs: Vec<(&AnomalyMap, &BinaryMask)> = maps.iter().zip(masks).collect();
        let per_image = exec::map(mode, &pairs, |(m, g)| {
            let (labels, count) = label_components(g);
            let mut regions = vec![Vec::new(); count];
            let mut normal = Vec::new();
            for (&v, &l) in m.map.iter().zip(&labels) {
                if l == 0 {
                    normal.push(v);
                } else {
                    regions[l as usize - 1].push(v);
                }
            }
            (regions, normal)
        });
        let mut regions = Vec::new();
        let mut normal = Vec::new();
        for (r, n) in per_image {
            regions.extend(r);
            normal.extend(n);
        }
        if regions.is_empty() {
            return Err(MmrError::UndefinedMetric("no anomalous region in the ground truth".into()));
        }
        if normal.is_empty() {
            return Err(MmrError::UndefinedMetric("no normal pixel to measure false positives on".into()));
        }
        for r in regions.iter_mut() {
            r.sort_unstable_by(f32::total_cmp);
        }
        normal.sort_unstable_by(f32::total_cmp);
        Ok(SweepData { regions, normal })
    }

    fn at_least(sorted: &[f32], t: f32) -> usize {
        sorted.len() - sorted.partition_point(|&v| v < t)
    }

    /// `(fpr, mean region overlap)` for predictions `map ≥ t`.
    fn point(&self, t: f32) -> (f64, f64) {
        let fpr = Self::at_least(&self.normal, t) as f64 / self.normal.len() as f64;
        let overlap: f64 = self
            .regions
            .iter()
            .map(|r| Self::at_least(r, t) as f64 / r.len() as f64)
            .sum::<f64>()
            / self.regions.len() as f64;
        (fpr, overlap)
    }

    fn thresholds(&self) -> (Vec<f32>, ThresholdSweep) {
        let mut all: Vec<f32> = self.normal.iter().chain(self.regions.iter().flatten()).copied().collect();
        all.sort_unstable_by(f32::total_cmp);
        all.dedup();
        if all.len() <= MAX_EXACT_THRESHOLDS {
            all.reverse();
            return (all, ThresholdSweep::Exact);
        }
        let last = all.len() - 1;
        let mut q: Vec<f32> = (0..QUANTILE_THRESHOLDS)
            .map(|j| all[(j as f64 / (QUANTILE_THRESHOLDS - 1) as f64 * last as f64).round() as usize])
            .collect();
        q.dedup();
        q.reverse();
        (q, ThresholdSweep::Quantile)
    }
}

/// Per-region-overlap curve: points `(fpr, mean overlap)` for a descending
/// threshold sweep, starting at `(0, 0)` above the largest value.
pub fn pro_curve(maps: &[AnomalyMap], masks: &[BinaryMask], mode: Execution) -> Result<(Vec<(f64, f64)>, ThresholdSweep)> {
    let data = SweepData::build(maps, masks, mode)?;
    let (thresholds, sweep) = data.thresholds();
    let mut curve = vec![(0.0, 0.0)];
    curve.extend(exec::map(mode, &thresholds, |&t| data.point(t)));
    Ok((curve, sweep))
}

/// Area under a piecewise-linear curve from `x = 0` to `x_max`.
pub fn area_up_to(curve: &[(f64, f64)], x_max: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= x_max {
            break;
        }
        if x1 <= x_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += (x_max - x0) * (y0 + y_cut) / 2.0;
        }
    }
    area
}

/// Per-region overlap integrated over false-positive rates `[0, fpr_limit]`,
/// normalized by `fpr_limit`. Regions are 8-connected mask components and each
/// counts equally regardless of its size.
pub fn pro_score(maps: &[AnomalyMap], masks: &[BinaryMask], fpr_limit: f64, mode: Execution) -> Result<ProResult> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MmrError::config("metrics.fpr_limit", format!("{fpr_limit} is outside (0, 1]")));
    }
    let data = SweepData::build(maps, masks, mode)?;
    let (thresholds, sweep) = data.thresholds();
    let mut curve = vec![(0.0, 0.0)];
    curve.extend(exec::map(mode, &thresholds, |&t| data.point(t)));
    Ok(ProResult {
        pro: area_up_to(&curve, fpr_limit) / fpr_limit,
        sweep,
        thresholds: thresholds.len(),
        regions: data.regions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(h: usize, w: usize, boxes: &[(usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y0, x0, s) in boxes {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    m.data[y * w + x] = true;
                }
            }
        }
        m
    }

    #[test]
    fn perfect_map_scores_one() {
        let mask = square_mask(16, 16, &[(3, 4, 5)]);
        let map = AnomalyMap::new(mask.data.iter().map(|&b| b as u8 as f32).collect(), 16, 16).unwrap();
        let r = pro_score(&[map], &[mask], 0.3, Execution::Sequential).unwrap();
        assert_eq!(r.pro, 1.0);
        assert_eq!(r.sweep, ThresholdSweep::Exact);
    }

    #[test]
    fn half_detected_regions_overlap_one_half_at_zero_fpr() {
        let mask = square_mask(16, 16, &[(1, 1, 4), (10, 10, 4)]);
        let mut values = vec![0f32; 256];
        for y in 1..5 {
            for x in 1..5 {
                values[y * 16 + x] = 1.0;
            }
        }
        let map = AnomalyMap::new(values, 16, 16).unwrap();
        let (curve, _) = pro_curve(std::slice::from_ref(&map), std::slice::from_ref(&mask), Execution::Sequential).unwrap();
        let at_zero: Vec<f64> = curve.iter().skip(1).filter(|p| p.0 == 0.0).map(|p| p.1).collect();
        assert_eq!(at_zero, vec![0.5]);
        // Integral: flat 0.5 at fpr 0, then linear to (1, 1).
        let r = pro_score(&[map], &[mask], 0.3, Execution::Sequential).unwrap();
        assert!((r.pro - 0.3 * (0.5 + 0.65) / 2.0 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn no_regions_is_undefined() {
        let map = AnomalyMap::new(vec![0.2; 16], 4, 4).unwrap();
        assert!(matches!(
            pro_score(&[map], &[BinaryMask::empty(4, 4)], 0.3, Execution::Sequential),
            Err(MmrError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn fpr_limit_validated() {
        let map = AnomalyMap::new(vec![0.2; 16], 4, 4).unwrap();
        for limit in [0.0, 1.5] {
            assert!(pro_score(std::slice::from_ref(&map), &[BinaryMask::empty(4, 4)], limit, Execution::Sequential).is_err());
        }
    }

    #[test]
    fn trapezoid_cut_interpolates() {
        let curve = [(0.0, 0.0), (1.0, 1.0)];
        assert!((area_up_to(&curve, 0.5) - 0.125).abs() < 1e-15);
        assert!((area_up_to(&curve, 1.0) - 0.5).abs() < 1e-15);
    }
}
