//! The trainable visible-token encoder and the frozen multi-scale teacher.

mod resnet;
mod teacher;
mod vit;

use candle_core::Tensor;

use crate::error::{MmrError, Result};

pub use teacher::{FrozenEncoder, FrozenEncoderConfig, TeacherFamily, TeacherWeights};
pub use vit::{TokenEncoder, TokenEncoderConfig, VitVariant};

/// Feature maps at several scales, each `B × C × H × W`.
///
/// Maps are held coarse to fine: the deepest teacher stage (smallest map)
/// comes first. `stages[i]` names the teacher stage (1, 2 or 3) that
/// `maps[i]` corresponds to.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub maps: Vec<Tensor>,
    pub stages: Vec<usize>,
}

impl MultiScaleFeatures {
    pub fn new(maps: Vec<Tensor>, stages: Vec<usize>) -> Result<Self> {
        if maps.len() != stages.len() || maps.is_empty() {
            return Err(MmrError::shape(format!(
                "{} maps labelled with {} stages",
                maps.len(),
                stages.len()
            )));
        }
        for m in &maps {
            m.dims4()?;
        }
        Ok(MultiScaleFeatures { maps, stages })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// `(c, h, w)` of every map, in stage order 1 → 3.
    pub fn shapes_by_stage(&self) -> Vec<(usize, usize, usize)> {
        let mut pairs: Vec<_> = self.stages.iter().zip(&self.maps).collect();
        pairs.sort_by_key(|(s, _)| **s);
        pairs
            .into_iter()
            .map(|(_, m)| {
                let d = m.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.maps[0].dims()[0]
    }

    /// The same scales restricted to one batch element.
    pub fn select(&self, index: usize) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| Ok(m.narrow(0, index, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleFeatures {
            maps,
            stages: self.stages.clone(),
        })
    }

    /// Checks two feature sets can be compared scale by scale.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.stages != other.stages {
            return Err(MmrError::shape(format!(
                "scale lists differ: {:?} vs {:?}",
                self.stages, other.stages
            )));
        }
        for (a, b) in self.maps.iter().zip(&other.maps) {
            if a.dims() != b.dims() {
                return Err(MmrError::shape(format!("feature shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
            }
        }
        Ok(())
    }
}

/// Stage subsets are non-empty, drawn from {1, 2, 3}, and kept coarse-first.
pub fn normalize_stages(stages: &[usize]) -> Result<Vec<usize>> {
    if stages.is_empty() {
        return Err(MmrError::config("teacher.stages_used", "at least one stage is required"));
    }
    let mut out = stages.to_vec();
    out.sort_unstable_by(|a, b| b.cmp(a));
    out.dedup();
    if out.iter().any(|s| !(1..=3).contains(s)) {
        return Err(MmrError::config("teacher.stages_used", format!("{stages:?} must lie in 1..=3")));
    }
    Ok(out)
}
