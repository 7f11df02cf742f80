//! Parameter initializers. Weights and biases are drawn from
//! `U(−1/√fan_in, 1/√fan_in)`; norm layers start at unit scale, zero shift.

use diffcore::{ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::error::Result;

/// `{prefix}.weight` `[fan_in, fan_out]` and `{prefix}.bias` `[fan_out]`.
pub fn linear<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::uniform([fan_in, fan_out], bound, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::uniform([fan_out], bound, rng))?;
    Ok(())
}

/// `{prefix}.weight` `[fan_in, fan_out]` alone, for maps followed by an
/// operation that absorbs a bias.
pub fn linear_no_bias<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::uniform([fan_in, fan_out], bound, rng))?;
    Ok(())
}

/// `{prefix}.weight` `[c_out, c_in, k, k]` and `{prefix}.bias` `[c_out]`.
pub fn conv<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<()> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::uniform([c_out, c_in, k, k], bound, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::uniform([c_out], bound, rng))?;
    Ok(())
}

pub fn layernorm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones([c]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([c]))?;
    Ok(())
}

/// Zeroes every parameter whose path starts with `prefix`.
pub fn zero_under<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    for (path, t) in store.iter_mut() {
        if path.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
