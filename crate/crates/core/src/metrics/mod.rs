//! Detection and localization metrics.

mod auroc;
mod pro;
mod regions;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, DomainTag, Label};
use crate::error::{MmrError, Result};
use crate::exec::Execution;
use crate::scoring::AnomalyMap;

pub use auroc::{pixel_auroc, sample_auroc};
pub use pro::{area_up_to, pro_curve, pro_score, ProResult, ThresholdSweep, MAX_EXACT_THRESHOLDS, QUANTILE_THRESHOLDS};
pub use regions::label_components;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// One scored test image.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub domain: DomainTag,
    pub label: Label,
    pub map: AnomalyMap,
    /// Required for anomalous samples if pixel metrics are wanted; normal
    /// samples without a mask count as all-normal.
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub sample_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub pro_fpr_limit: f64,
    pub pro_sweep: Option<ThresholdSweep>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub per_domain: BTreeMap<String, MetricTriple>,
    /// Unweighted mean of the per-domain values that are defined.
    pub domain_mean: MetricTriple,
}

fn triple(samples: &[&ScoredSample], fpr_limit: f64, mode: Execution) -> (MetricTriple, Option<ThresholdSweep>) {
    let labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Anomalous).collect();
    let scores: Vec<f32> = samples.iter().map(|s| s.map.score).collect();
    let n_anomalous = labels.iter().filter(|&&l| l).count();
    let mut out = MetricTriple {
        sample_auroc: sample_auroc(&scores, &labels).ok(),
        n_normal: samples.len() - n_anomalous,
        n_anomalous,
        ..Default::default()
    };
    let pixel_ready = samples.iter().all(|s| s.label == Label::Normal || s.mask.is_some());
    let mut sweep = None;
    if pixel_ready && n_anomalous > 0 {
        let maps: Vec<AnomalyMap> = samples.iter().map(|s| s.map.clone()).collect();
        let masks: Vec<BinaryMask> = samples
            .iter()
            .map(|s| s.mask.clone().unwrap_or_else(|| BinaryMask::empty(s.map.height, s.map.width)))
            .collect();
        out.pixel_auroc = pixel_auroc(&maps, &masks).ok();
        if let Ok(p) = pro_score(&maps, &masks, fpr_limit, mode) {
            out.pro = Some(p.pro);
            sweep = Some(p.sweep);
        }
    }
    (out, sweep)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn compute(samples: &[ScoredSample], fpr_limit: f64, mode: Execution) -> Result<Self> {
        if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
            return Err(MmrError::config("metrics.fpr_limit", format!("{fpr_limit} is outside (0, 1]")));
        }
        let all: Vec<&ScoredSample> = samples.iter().collect();
        let (overall, pro_sweep) = triple(&all, fpr_limit, mode);
        let sample_auroc = overall.sample_auroc.ok_or_else(|| {
            MmrError::UndefinedMetric("the test set needs both normal and anomalous samples".into())
        })?;
        let mut per_domain = BTreeMap::new();
        let mut domains: Vec<DomainTag> = samples.iter().map(|s| s.domain).collect();
        domains.sort();
        domains.dedup();
        for d in domains {
            let subset: Vec<&ScoredSample> = samples.iter().filter(|s| s.domain == d).collect();
            per_domain.insert(d.to_string(), triple(&subset, fpr_limit, mode).0);
        }
        let domain_mean = MetricTriple {
            sample_auroc: mean_defined(per_domain.values().map(|t| t.sample_auroc)),
            pixel_auroc: mean_defined(per_domain.values().map(|t| t.pixel_auroc)),
            pro: mean_defined(per_domain.values().map(|t| t.pro)),
            n_normal: overall.n_normal,
            n_anomalous: overall.n_anomalous,
        };
        Ok(EvalReport {
            sample_auroc,
            pixel_auroc: overall.pixel_auroc,
            pro: overall.pro,
            pro_fpr_limit: fpr_limit,
            pro_sweep,
            n_normal: overall.n_normal,
            n_anomalous: overall.n_anomalous,
            per_domain,
            domain_mean,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| MmrError::io(path, e))
    }

    /// One row per domain plus `all` and `mean` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["domain", "sample_auroc", "pixel_auroc", "pro", "n_normal", "n_anomalous"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let overall = MetricTriple {
            sample_auroc: Some(self.sample_auroc),
            pixel_auroc: self.pixel_auroc,
            pro: self.pro,
            n_normal: self.n_normal,
            n_anomalous: self.n_anomalous,
        };
        let rows = self
            .per_domain
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain([("all", &overall), ("mean", &self.domain_mean)]);
        for (name, t) in rows {
            w.write_record([
                name.to_string(),
                fmt(t.sample_auroc),
                fmt(t.pixel_auroc),
                fmt(t.pro),
                t.n_normal.to_string(),
                t.n_anomalous.to_string(),
            ])?;
        }
        w.flush().map_err(|e| MmrError::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(domain: DomainTag, anomalous: bool, value: f32) -> ScoredSample {
        let mut mask = BinaryMask::empty(4, 4);
        let mut map = vec![0.1f32; 16];
        if anomalous {
            mask.data[5] = true;
            map[5] = value;
        }
        ScoredSample {
            domain,
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            map: AnomalyMap::new(map, 4, 4).unwrap(),
            mask: anomalous.then_some(mask),
        }
    }

    #[test]
    fn report_has_domains_and_mean() {
        let samples = vec![
            sample(DomainTag::Same, false, 0.0),
            sample(DomainTag::Same, true, 0.9),
            sample(DomainTag::View, false, 0.0),
            sample(DomainTag::View, true, 0.05),
        ];
        let r = EvalReport::compute(&samples, 0.3, Execution::Sequential).unwrap();
        assert_eq!(r.per_domain["same"].sample_auroc, Some(1.0));
        assert_eq!(r.per_domain["view"].sample_auroc, Some(0.5));
        assert_eq!(r.domain_mean.sample_auroc, Some(0.75));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(3).unwrap().starts_with("all,"));
    }

    #[test]
    fn single_class_test_set_is_an_error() {
        let samples = vec![sample(DomainTag::Same, false, 0.0)];
        assert!(matches!(
            EvalReport::compute(&samples, 0.3, Execution::Sequential),
            Err(MmrError::UndefinedMetric(_))
        ));
    }
}
