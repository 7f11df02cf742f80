//! AdamW with decoupled weight decay and the serializable training state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use diffcore::{ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Parameters, moment estimates, step counter and RNG position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    /// First moments, same paths and dims as `params`.
    pub m: ParamStore<T>,
    /// Second moments.
    pub v: ParamStore<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    step: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParamStore<T>, seed: u64) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (path, t) in params.iter() {
            m.insert(path.clone(), Tensor::zeros(t.dims().to_vec())).expect("unique paths");
            v.insert(path.clone(), Tensor::zeros(t.dims().to_vec())).expect("unique paths");
        }
        TrainState {
            params,
            m,
            v,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Writes `params/`, `adam_m/`, `adam_v/` and `state.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.params.save(dir.join("params"))?;
        self.m.save(dir.join("adam_m"))?;
        self.v.save(dir.join("adam_v"))?;
        let meta = StateMeta {
            step: self.step,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: StateMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos);
        Ok(TrainState {
            params: ParamStore::load(dir.join("params"))?,
            m: ParamStore::load(dir.join("adam_m"))?,
            v: ParamStore::load(dir.join("adam_v"))?,
            step: meta.step,
            rng,
        })
    }
}

/// One AdamW update. Every gradient is checked for finiteness before any
/// parameter changes; a parameter with no gradient entry is treated as
/// having a zero gradient.
pub fn optimizer_step<T: Scalar>(state: &mut TrainState<T>, grads: &BTreeMap<String, Tensor<T>>, hyper: &AdamW) -> Result<()> {
    for (path, g) in grads {
        if !g.all_finite() {
            return Err(PcaError::NonFiniteGradient { path: path.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - hyper.beta1), T::lit(1.0 - hyper.beta2));
    let decay = T::lit(1.0 - hyper.lr * hyper.weight_decay);
    let step_size = T::lit(hyper.lr / bc1);
    let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
    let eps = T::lit(hyper.eps);
    let TrainState { params, m, v, .. } = state;
    for (path, p) in params.iter_mut() {
        let m = m.get_mut(path).expect("moments mirror params").data_mut();
        let v = v.get_mut(path).expect("moments mirror params").data_mut();
        let p = p.data_mut();
        match grads.get(path) {
            Some(g) => {
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    p[i] = p[i] * decay - step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
                }
            }
            None => {
                for i in 0..p.len() {
                    m[i] = b1 * m[i];
                    v[i] = b2 * v[i];
                    p[i] = p[i] * decay - step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
                }
            }
        }
    }
    Ok(())
}
