//! Named parameter storage and the per-forward binding of parameters onto a
//! graph.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DiffError, Result};
use crate::graph::{Graph, Var};
use crate::ops::nn::{BatchNormMode, BatchNormStats};
use crate::ptns;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Trainable tensors keyed by dot-separated path, plus non-trainable buffers
/// (batch-norm running statistics). Iteration is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: DType,
    params: BTreeMap<String, Vec<usize>>,
    buffers: BTreeMap<String, Vec<usize>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) || self.buffers.contains_key(&path) {
            return Err(invalid("param store", format!("duplicate path `{path}`")));
        }
        self.params.insert(path, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) || self.buffers.contains_key(&path) {
            return Err(invalid("param store", format!("duplicate path `{path}`")));
        }
        self.buffers.insert(path, value);
        Ok(())
    }

    /// Registers `gamma`/`beta` parameters and running-statistics buffers of a
    /// batch-norm layer under `prefix`.
    pub fn insert_batchnorm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones([channels]))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros([channels]))?;
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels]))?;
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones([channels]))?;
        self.insert_buffer(format!("{prefix}.num_batches_tracked"), Tensor::zeros([1]))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.params.remove(path)
    }

    pub fn buffer(&self, path: &str) -> Option<&Tensor<T>> {
        self.buffers.get(path)
    }

    pub fn buffer_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Trainable scalars whose path starts with `prefix`.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Writes one `.ptns` per entry plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (path, t) in self.params.iter().chain(&self.buffers) {
            ptns::save(dir.join(format!("{path}.ptns")), t)?;
        }
        let manifest = Manifest {
            dtype: T::DTYPE,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for (is_buffer, entries) in [(false, &manifest.params), (true, &manifest.buffers)] {
            for (path, dims) in entries {
                let t: Tensor<T> = ptns::load(dir.join(format!("{path}.ptns")))?;
                if t.dims() != dims.as_slice() {
                    return Err(DiffError::Format(format!("`{path}` dims disagree with manifest")));
                }
                if is_buffer {
                    store.insert_buffer(path.clone(), t)?;
                } else {
                    store.insert(path.clone(), t)?;
                }
            }
        }
        Ok(store)
    }
}

/// A graph under construction together with the store its parameters come
/// from. Each parameter becomes a graph leaf the first time it is requested.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: BTreeMap<String, Var>,
    mode: BatchNormMode,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: BatchNormMode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(path) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(path)
            .ok_or_else(|| DiffError::UnknownParameter(path.to_string()))?
            .clone();
        let v = self.graph.leaf(t);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Batch norm using `{prefix}.gamma/.beta` and the running buffers under
    /// `prefix`; train mode updates the buffers in the store.
    pub fn batchnorm(&mut self, x: Var, prefix: &str, axis: usize) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let key = |s: &str| format!("{prefix}.{s}");
        let fetch = |store: &ParamStore<T>, s: &str| {
            store
                .buffer(&key(s))
                .cloned()
                .ok_or_else(|| DiffError::UnknownParameter(key(s)))
        };
        let mean = fetch(self.store, "running_mean")?;
        let var = fetch(self.store, "running_var")?;
        let count = fetch(self.store, "num_batches_tracked")?;
        let mut stats = BatchNormStats {
            mean: mean.into_data(),
            var: var.into_data(),
            updates: count.item().as_f64() as u64,
        };
        let y = self.graph.batchnorm(x, gamma, beta, axis, self.mode, &mut stats)?;
        if self.mode == BatchNormMode::Train {
            let c = stats.mean.len();
            *self.store.buffer_mut(&key("running_mean")).expect("fetched") = Tensor::new([c], stats.mean)?;
            *self.store.buffer_mut(&key("running_var")).expect("fetched") = Tensor::new([c], stats.var)?;
            *self.store.buffer_mut(&key("num_batches_tracked")).expect("fetched") =
                Tensor::full([1], T::lit(stats.updates as f64));
        }
        Ok(y)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Gradient of `loss` for every parameter bound so far (zeros where the
    /// loss does not depend on it).
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|(path, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.dims(*v).to_vec()));
                (path.clone(), g)
            })
            .collect())
    }
}
