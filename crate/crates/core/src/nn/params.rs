use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{MmrError, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    Uniform { bound: f64 },
    /// He-normal with the given fan-in, for ReLU networks.
    Kaiming { fan_in: usize },
}

/// Named parameters with seeded, name-keyed initialisation.
///
/// Each parameter's initial values depend only on the store seed and the
/// parameter's name, so the construction order of layers never changes the
/// weights. Parameters are either trainable (`Var`) or frozen (plain tensors
/// that never enter a gradient computation).
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    frozen: Arc<Mutex<BTreeMap<String, Tensor>>>,
    preloaded: Arc<HashMap<String, Tensor>>,
    prefix: String,
    seed: u64,
    dtype: DType,
    device: Device,
    trainable: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            frozen: Arc::new(Mutex::new(BTreeMap::new())),
            preloaded: Arc::new(HashMap::new()),
            prefix: String::new(),
            seed,
            dtype,
            device: device.clone(),
            trainable: true,
        }
    }

    /// A store whose parameters come from `tensors` whenever a name matches.
    pub fn with_tensors(tensors: HashMap<String, Tensor>, seed: u64, dtype: DType, device: &Device) -> Self {
        let mut s = Self::new(seed, dtype, device);
        s.preloaded = Arc::new(tensors);
        s
    }

    pub fn from_safetensors(path: &Path, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(MmrError::NotFound(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        Ok(Self::with_tensors(tensors, seed, dtype, device))
    }

    /// Parameters created through the returned store are frozen.
    pub fn frozen(&self) -> Self {
        ParamStore {
            trainable: false,
            ..self.clone()
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamStore { prefix, ..self.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn has_preloaded(&self, name: &str) -> bool {
        self.preloaded.contains_key(&self.full_name(name))
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Fetch or create the parameter `name`.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: ParamInit) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        let tensor = match self.preloaded.get(&full) {
            Some(t) => {
                if t.shape() != &shape {
                    return Err(MmrError::shape(format!(
                        "parameter {full} has shape {:?}, expected {:?}",
                        t.dims(),
                        shape.dims()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
            None => self.init_tensor(&full, &shape, init)?,
        };
        if !self.trainable {
            let mut map = self.frozen.lock().expect("parameter map poisoned");
            return Ok(map.entry(full).or_insert(tensor).clone());
        }
        let mut map = self.inner.lock().expect("parameter map poisoned");
        if let Some(v) = map.get(&full) {
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        map.insert(full, var);
        Ok(t)
    }

    fn init_tensor(&self, full: &str, shape: &Shape, init: ParamInit) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(full));
        let values: Vec<f64> = match init {
            ParamInit::Const(c) => vec![c; n],
            ParamInit::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            ParamInit::Uniform { bound } => {
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
            ParamInit::Kaiming { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let map = self.inner.lock().expect("parameter map poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    /// Frozen parameters in name order.
    pub fn frozen_tensors(&self) -> BTreeMap<String, Tensor> {
        self.frozen.lock().expect("parameter map poisoned").clone()
    }

    /// Save trainable parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_map(&self.tensors(), path)
    }

    /// Save frozen parameters.
    pub fn save_frozen(&self, path: &Path) -> Result<()> {
        save_map(&self.frozen_tensors(), path)
    }
}

fn save_map(map: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let tensors: HashMap<String, Tensor> = map.clone().into_iter().collect();
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// SHA-256 over names, shapes and raw values of a set of tensors.
pub fn tensors_digest<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let dev = Device::Cpu;
        let a = ParamStore::new(1, DType::F32, &dev);
        let x1 = a.get(8, "x", ParamInit::TruncNormal { std: 0.02 }).unwrap();
        let _ = a.get(8, "y", ParamInit::TruncNormal { std: 0.02 }).unwrap();
        let b = ParamStore::new(1, DType::F32, &dev);
        let _ = b.get(8, "y", ParamInit::TruncNormal { std: 0.02 }).unwrap();
        let x2 = b.get(8, "x", ParamInit::TruncNormal { std: 0.02 }).unwrap();
        assert_eq!(x1.to_vec1::<f32>().unwrap(), x2.to_vec1::<f32>().unwrap());
        assert!(x1.to_vec1::<f32>().unwrap().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn frozen_parameters_are_not_tracked() {
        let dev = Device::Cpu;
        let s = ParamStore::new(1, DType::F32, &dev);
        s.frozen().pp("teacher").get(4, "w", ParamInit::Const(1.0)).unwrap();
        s.pp("student").get(4, "w", ParamInit::Const(1.0)).unwrap();
        let names: Vec<_> = s.vars().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, ["student.w"]);
    }

    #[test]
    fn preloaded_shape_mismatch_is_an_error() {
        let dev = Device::Cpu;
        let mut m = HashMap::new();
        m.insert("w".to_string(), Tensor::zeros(3, DType::F32, &dev).unwrap());
        let s = ParamStore::with_tensors(m, 0, DType::F32, &dev);
        assert!(s.get(4, "w", ParamInit::Const(0.0)).is_err());
        assert_eq!(s.get(3, "w", ParamInit::Const(1.0)).unwrap().to_vec1::<f32>().unwrap(), vec![0.0; 3]);
    }
}
