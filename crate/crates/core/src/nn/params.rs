use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::tape::Grads;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform Glorot initialisation scaled by a gain.
    Glorot(f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Append the weight/bias pair of a linear layer `in → out`.
pub fn linear_spec(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, output: usize, init: Init) {
    specs.push(ParamSpec::new(format!("{prefix}.w"), input, output, init));
    specs.push(ParamSpec::new(format!("{prefix}.b"), 1, output, Init::Zero));
}

/// Named parameter tensors with a version counter bumped on every update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
    pub version: u64,
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in specs {
            let mut m = Mat::zeros(spec.rows, spec.cols);
            if let Init::Glorot(gain) = spec.init {
                let a = gain * (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                for v in &mut m.data {
                    *v = rng.random_range(-a..a);
                }
            }
            store.tensors.insert(spec.name.clone(), m);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Mat) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data.len()).sum()
    }

    /// Set every tensor to zero.
    pub fn zero_all(&mut self) {
        for m in self.tensors.values_mut() {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flattened view used by finite-difference checks.
    pub fn flat_len(&self) -> usize {
        self.num_scalars()
    }

    /// Locate the `k`-th scalar in name order.
    pub fn flat_index(&self, mut k: usize) -> (String, usize) {
        for (name, m) in &self.tensors {
            if k < m.data.len() {
                return (name.clone(), k);
            }
            k -= m.data.len();
        }
        panic!("flat index out of range");
    }

    fn check_shapes_against(&self, other: &BTreeMap<String, Mat>) -> Result<()> {
        for (name, m) in &self.tensors {
            let Some(o) = other.get(name) else {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            };
            if o.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    m.shape()
                )));
            }
        }
        if let Some(extra) = other.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// On-disk checkpoint: `{version, widths, tensors}` with tensors as nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<W> {
    pub version: u32,
    pub widths: W,
    pub tensors: BTreeMap<String, Vec<Vec<f64>>>,
}

impl<W: Serialize + DeserializeOwned> Checkpoint<W> {
    pub fn from_store(widths: W, store: &ParamStore) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            widths,
            tensors: store.iter().map(|(k, m)| (k.clone(), m.to_nested())).collect(),
        }
    }

    /// Copy tensors into `template`, which fixes the expected names and shapes.
    pub fn into_store(self, template: &ParamStore) -> Result<ParamStore> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut loaded = BTreeMap::new();
        for (name, rows) in self.tensors {
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != c) {
                return Err(Error::Checkpoint(format!("tensor `{name}` is ragged")));
            }
            loaded.insert(name, Mat::from_vec(r, c, rows.into_iter().flatten().collect()));
        }
        template.check_shapes_against(&loaded)?;
        Ok(ParamStore {
            tensors: loaded,
            version: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    /// One descent step along `grads` (gradients of a loss to minimise).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let scale = match self.clip {
            Some(c) => {
                let n = grads.norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.0 {
            let Some(p) = store.tensors.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.version += 1;
    }
}
