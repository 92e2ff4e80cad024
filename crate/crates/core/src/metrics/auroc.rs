use crate::data::BinaryMask;
use crate::error::{MmrError, Result};
use crate::scoring::AnomalyMap;

/// Area under the ROC curve, equal to the Mann–Whitney statistic
/// `P(s_anomalous > s_normal) + ½·P(tie)`.
///
/// Scores are sorted once and tie groups contribute half credit, which is the
/// trapezoidal integral of the empirical ROC curve.
pub fn sample_auroc<T: Copy + PartialOrd>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MmrError::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(MmrError::UndefinedMetric("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MmrError::UndefinedMetric("AUROC needs both normal and anomalous samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN filtered"));

    // Doubled to stay in integers: 2·Σ pos_in_group·(neg_below + neg_in_group/2).
    let mut twice_concordant: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_concordant += pos as u128 * (2 * neg_below as u128 + neg as u128);
        neg_below += neg;
        i = j;
    }
    Ok(twice_concordant as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// AUROC over every pixel of every map, ground truth from the masks.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(MmrError::shape(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let total: usize = maps.iter().map(|m| m.map.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, g) in maps.iter().zip(masks) {
        if (m.height, m.width) != (g.height, g.width) {
            return Err(MmrError::shape(format!(
                "{}x{} map paired with a {}x{} mask",
                m.height, m.width, g.height, g.width
            )));
        }
        scores.extend_from_slice(&m.map);
        labels.extend_from_slice(&g.data);
    }
    sample_auroc(&scores, &labels)
}
