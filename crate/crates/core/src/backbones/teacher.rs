use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::resnet::{ResNet, ResNetKind};
use super::{normalize_stages, MultiScaleFeatures};
use crate::error::{MmrError, Result};
use crate::nn::{tensors_digest, Conv2d, ParamInit, ParamStore};

const TOY_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherFamily {
    Wideresnet50,
    Resnet18,
    ToyCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherWeights {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrozenEncoderConfig {
    pub family: TeacherFamily,
    pub stages_used: Vec<usize>,
    pub weights: TeacherWeights,
    /// Converted pretrained weights, or a persisted random teacher.
    pub weights_path: Option<PathBuf>,
    /// Seed for random weights.
    pub seed: u64,
    /// Stage widths of the toy network.
    pub toy_channels: [usize; 3],
    /// Standardize each toy stage per channel with statistics measured on
    /// the training images (see [`FrozenEncoder::calibrate`]).
    pub toy_standardize: bool,
}

impl Default for FrozenEncoderConfig {
    fn default() -> Self {
        FrozenEncoderConfig {
            family: TeacherFamily::Wideresnet50,
            stages_used: vec![1, 2, 3],
            weights: TeacherWeights::Pretrained,
            weights_path: None,
            seed: 0,
            toy_channels: [32, 64, 128],
            toy_standardize: true,
        }
    }
}

impl FrozenEncoderConfig {
    pub fn toy() -> Self {
        FrozenEncoderConfig {
            family: TeacherFamily::ToyCnn,
            weights: TeacherWeights::Random,
            ..Default::default()
        }
    }

    /// Channel count of each stage 1..=3.
    pub fn stage_channels(&self) -> [usize; 3] {
        match self.family {
            TeacherFamily::Wideresnet50 => [256, 512, 1024],
            TeacherFamily::Resnet18 => [64, 128, 256],
            TeacherFamily::ToyCnn => self.toy_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        normalize_stages(&self.stages_used)?;
        if self.family == TeacherFamily::ToyCnn && self.toy_channels.iter().any(|&c| c < 2) {
            return Err(MmrError::config("teacher.toy_channels", "toy stages need at least 2 channels"));
        }
        Ok(())
    }
}

/// Three strided convolution stages at 1/4, 1/8 and 1/16 of the input side,
/// each followed by a frozen per-channel standardization.
///
/// Each stage output is taken before its activation so features carry sign.
struct ToyCnn {
    stem: Conv2d,
    stages: [Conv2d; 3],
    /// Per-stage `(mean, std)` shaped `1 × C × 1 × 1`; identity until calibrated.
    norms: [(Tensor, Tensor); 3],
}

impl ToyCnn {
    fn new(store: &ParamStore, ch: [usize; 3]) -> Result<Self> {
        let init = |fan_in: usize| ParamInit::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        };
        let conv = |name: &str, i: usize, o: usize| -> Result<Conv2d> {
            let s = store.pp(name);
            let w = s.get((o, i, 3, 3), "weight", init(9 * i))?;
            let b = s.get(o, "bias", init(9 * i))?;
            Ok(Conv2d::from_parts(w, Some(b), 2, 1))
        };
        let norm = |k: usize| -> Result<(Tensor, Tensor)> {
            let s = store.pp(format!("norm{k}"));
            let mean = s.get(ch[k - 1], "mean", ParamInit::Const(0.0))?;
            let std = s.get(ch[k - 1], "std", ParamInit::Const(1.0))?;
            Ok((mean.reshape((1, ch[k - 1], 1, 1))?, std.reshape((1, ch[k - 1], 1, 1))?))
        };
        let stem_ch = (ch[0] / 2).max(1);
        Ok(ToyCnn {
            stem: conv("stem", 3, stem_ch)?,
            stages: [
                conv("stage1", stem_ch, ch[0])?,
                conv("stage2", ch[0], ch[1])?,
                conv("stage3", ch[1], ch[2])?,
            ],
            norms: [norm(1)?, norm(2)?, norm(3)?],
        })
    }

    fn forward(&self, x: &Tensor, deepest: usize) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(x)?;
        let mut out = Vec::with_capacity(deepest);
        for (conv, (mean, std)) in self.stages.iter().zip(&self.norms).take(deepest) {
            let z = conv.forward(&h.relu()?)?.broadcast_sub(mean)?.broadcast_div(std)?;
            h = z.clone();
            out.push(z);
        }
        Ok(out)
    }
}

enum Network {
    Toy(ToyCnn),
    ResNet(ResNet),
}

/// Pre-trained (or fixed random) hierarchical encoder whose parameters never
/// change after construction.
pub struct FrozenEncoder {
    cfg: FrozenEncoderConfig,
    stages: Vec<usize>,
    net: Network,
    params: BTreeMap<String, Tensor>,
    calibrated: bool,
}

impl FrozenEncoder {
    pub fn new(cfg: &FrozenEncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let stages = normalize_stages(&cfg.stages_used)?;
        let store = match (&cfg.weights_path, cfg.weights) {
            (Some(path), _) => {
                if !path.exists() {
                    return Err(MmrError::WeightsUnavailable(format!("{} does not exist", path.display())));
                }
                ParamStore::from_safetensors(path, cfg.seed, dtype, device)?
            }
            (None, TeacherWeights::Pretrained) => {
                return Err(MmrError::WeightsUnavailable(format!(
                    "{:?} teacher needs teacher.weights_path (or weights = \"random\")",
                    cfg.family
                )))
            }
            (None, TeacherWeights::Random) => ParamStore::new(cfg.seed, dtype, device),
        }
        .frozen();
        let calibrated = store.has_preloaded("norm1.mean");
        let net = match cfg.family {
            TeacherFamily::ToyCnn => Network::Toy(ToyCnn::new(&store, cfg.toy_channels)?),
            TeacherFamily::Resnet18 => Network::ResNet(ResNet::new(&store, ResNetKind::ResNet18)?),
            TeacherFamily::Wideresnet50 => Network::ResNet(ResNet::new(&store, ResNetKind::WideResNet50)?),
        };
        if cfg.weights_path.is_some() && cfg.weights == TeacherWeights::Pretrained {
            let expected = store.frozen_tensors().len();
            log::info!("loaded {expected} frozen teacher tensors");
        }
        Ok(FrozenEncoder {
            cfg: cfg.clone(),
            stages,
            params: store.frozen_tensors(),
            net,
            calibrated,
        })
    }

    pub fn config(&self) -> &FrozenEncoderConfig {
        &self.cfg
    }

    /// Stages produced, coarse first.
    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn channels(&self) -> Vec<usize> {
        let ch = self.cfg.stage_channels();
        self.stages.iter().map(|&s| ch[s - 1]).collect()
    }

    /// Encode an `N × 3 × H × W` batch. No gradient reaches the parameters.
    pub fn extract_frozen_features(&self, x: &Tensor) -> Result<MultiScaleFeatures> {
        let deepest = *self.stages.iter().max().expect("non-empty stages");
        let x = x.detach();
        let all = match &self.net {
            Network::Toy(n) => n.forward(&x, deepest)?,
            Network::ResNet(n) => n.forward(&x, deepest)?,
        };
        let maps = self.stages.iter().map(|&s| all[s - 1].detach()).collect();
        MultiScaleFeatures::new(maps, self.stages.clone())
    }

    /// True for a fresh toy teacher whose stage statistics have not been
    /// measured yet.
    pub fn needs_calibration(&self) -> bool {
        matches!(self.net, Network::Toy(_)) && self.cfg.toy_standardize && !self.calibrated
    }

    /// Measure the per-channel mean and standard deviation of every toy stage
    /// over `batches` of normal images, stage by stage so each stage sees
    /// standardized inputs. No-op for other families.
    pub fn calibrate(&mut self, batches: &[Tensor]) -> Result<()> {
        let Network::Toy(net) = &mut self.net else {
            return Ok(());
        };
        if batches.is_empty() {
            return Err(MmrError::config("data", "no images to calibrate the toy teacher on"));
        }
        for k in 0..3 {
            let (mut sum, mut sq, mut count) = (None::<Tensor>, None::<Tensor>, 0usize);
            for x in batches {
                let z = net.forward(&x.detach(), k + 1)?.pop().expect("stage output").to_dtype(DType::F64)?;
                let (n, _, h, w) = z.dims4()?;
                count += n * h * w;
                let s1 = z.sum_keepdim(0)?.sum_keepdim(2)?.sum_keepdim(3)?;
                let s2 = z.sqr()?.sum_keepdim(0)?.sum_keepdim(2)?.sum_keepdim(3)?;
                sum = Some(match sum {
                    Some(a) => (a + s1)?,
                    None => s1,
                });
                sq = Some(match sq {
                    Some(a) => (a + s2)?,
                    None => s2,
                });
            }
            let (old_mean, old_std) = &net.norms[k];
            let dtype = old_mean.dtype();
            let raw_mean = (sum.expect("non-empty") / count as f64)?;
            let raw_var = ((sq.expect("non-empty") / count as f64)? - raw_mean.sqr()?)?.relu()?;
            // Measured through the current norm; map back to raw stage units.
            let old_mean = old_mean.to_dtype(DType::F64)?;
            let old_std = old_std.to_dtype(DType::F64)?;
            let mean = ((raw_mean * &old_std)? + old_mean)?;
            let std = ((raw_var.sqrt()? * &old_std)? + TOY_NORM_EPS)?;
            let c = mean.elem_count();
            self.params.insert(format!("norm{}.mean", k + 1), mean.flatten_all()?.to_dtype(dtype)?);
            self.params.insert(format!("norm{}.std", k + 1), std.flatten_all()?.to_dtype(dtype)?);
            net.norms[k] = (mean.reshape((1, c, 1, 1))?.to_dtype(dtype)?, std.reshape((1, c, 1, 1))?.to_dtype(dtype)?);
        }
        self.calibrated = true;
        Ok(())
    }

    /// SHA-256 over every parameter value.
    pub fn param_digest(&self) -> Result<String> {
        tensors_digest(&self.params)
    }

    /// Persist the parameters so a random teacher can be reloaded exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.params.clone().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }
}
