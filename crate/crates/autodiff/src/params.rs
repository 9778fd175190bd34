use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Named, trainable tensors plus their accumulated gradients.
///
/// Insertion order is stable and defines the iteration order used by the
/// optimizer and by gradient checks.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

/// On-disk form of one tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` under `name`. Re-registering a name is an error.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            requires_grad: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Weight matrix drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    ///
    /// Each parameter gets its own generator derived from `(seed, name)`, so
    /// adding or removing other parameters never shifts its initial value.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = param_rng(seed, name);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Embedding table drawn from a standard normal.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], scale: f64, seed: u64) -> Result<ParamId> {
        let mut rng = param_rng(seed, name);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| scale * standard_normal(&mut rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Snapshot of every parameter as a `name -> {shape, data}` map.
    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites parameter values from a record map. Every registered
    /// parameter must be present with a matching shape; extra records are
    /// rejected as well.
    pub fn load_records(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        for name in records.keys() {
            if !self.index.contains_key(name) {
                return Err(AutodiffError::UnknownParameter(name.clone()));
            }
        }
        for p in &mut self.params {
            let rec = records
                .get(&p.name)
                .ok_or_else(|| AutodiffError::UnknownParameter(p.name.clone()))?;
            if rec.shape != p.value.shape() {
                return Err(AutodiffError::Shape {
                    op: "load",
                    lhs: p.value.shape().to_vec(),
                    rhs: rec.shape.clone(),
                });
            }
            p.value = Tensor::new(rec.shape.clone(), rec.data.clone())?;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_records())?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        let records: BTreeMap<String, TensorRecord> = serde_json::from_str(&text)?;
        self.load_records(&records)
    }
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Box-Muller draw; avoids pulling a distributions crate into the engine.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
