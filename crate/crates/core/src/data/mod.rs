//! Dataset manifests, image preprocessing and the procedural toy corpus.

mod manifest;
mod preprocess;
mod toy;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};

pub use manifest::{load_manifest, write_manifest, Layout, MANIFEST_FILE};
pub use preprocess::{load_image, load_mask, preprocess_image, preprocess_mask, PreprocessConfig};
pub use toy::{generate_toy_dataset, render_toy_sample, DefectGeometry, DefectKind, ShiftKind, ToyConfig, ToySample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Same,
    Background,
    Illumination,
    View,
    Train,
}

impl DomainTag {
    pub const TEST_DOMAINS: [DomainTag; 4] = [
        DomainTag::Same,
        DomainTag::Background,
        DomainTag::Illumination,
        DomainTag::View,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Same => "same",
            DomainTag::Background => "background",
            DomainTag::Illumination => "illumination",
            DomainTag::View => "view",
            DomainTag::Train => "train",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "same" => DomainTag::Same,
            "background" => DomainTag::Background,
            "illumination" => DomainTag::Illumination,
            "view" => DomainTag::View,
            "train" => DomainTag::Train,
            _ => return None,
        })
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    pub label: Label,
    #[serde(rename = "mask", default)]
    pub mask_path: Option<PathBuf>,
    #[serde(rename = "domain")]
    pub domain_tag: DomainTag,
    pub split: Split,
}

impl SampleRecord {
    /// Checks the one-class training invariant.
    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.label == Label::Anomalous {
            return Err(MmrError::Manifest {
                path: self.image_path.clone(),
                message: "training split may only contain normal samples".into(),
            });
        }
        Ok(())
    }
}

/// Per-channel statistics applied as `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics, the pre-training corpus of the standard teachers.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// A normalized image stored channel-major (`c × h × w`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub normalization: Normalization,
}

impl ImageTensor {
    pub fn new(
        data: Vec<f32>,
        channels: usize,
        height: usize,
        width: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(MmrError::shape(format!(
                "image buffer holds {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MmrError::shape("image contains non-finite values"));
        }
        Ok(ImageTensor {
            data,
            channels,
            height,
            width,
            normalization,
        })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Both sides divisible by the patch size and by 4.
    pub fn check_divisible(&self, patch: usize) -> Result<()> {
        for (name, side) in [("height", self.height), ("width", self.width)] {
            if side % patch != 0 || side % 4 != 0 {
                return Err(MmrError::shape(format!(
                    "image {name} {side} must be divisible by patch size {patch} and by 4"
                )));
            }
        }
        Ok(())
    }
}

/// A binary ground-truth mask at model resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub data: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            data: vec![false; height * width],
            height,
            width,
        }
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
