//! SVCCA-style canonical correlation between two feature sets, and the
//! expert-redundancy and stream-coupling analyses built on it.
//!
//! Protocol: each input (samples × features) is centered and projected onto
//! its top `k = min(20, features)` principal components; the projections
//! are whitened and the canonical correlations are the singular values of
//! the whitened cross-covariance. A component whose variance falls below
//! `1e-10` of the leading one marks the input rank deficient, and a ridge of
//! `1e-6` times the leading variance is then added before whitening.

use diffcore::{Scalar, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{PcaError, Result};

pub const MAX_COMPONENTS: usize = 20;
pub const RELATIVE_RIDGE: f64 = 1e-6;
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaProtocol {
    pub variant: String,
    pub max_components: usize,
    pub relative_ridge: f64,
    pub sample_layout: String,
}

impl Default for CcaProtocol {
    fn default() -> Self {
        CcaProtocol {
            variant: "svcca-mean".into(),
            max_components: MAX_COMPONENTS,
            relative_ridge: RELATIVE_RIDGE,
            sample_layout: "H*W*N samples x C features".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcaResult {
    /// Mean canonical correlation, clamped to `[0, 1]`.
    pub mean: f64,
    pub correlations: Vec<f64>,
    pub components: (usize, usize),
    /// Absolute ridge added to each side's whitening, if it was needed.
    pub ridge: (Option<f64>, Option<f64>),
}

/// Centered projection onto the top principal components, whitened.
fn whitened_components(x: &DMatrix<f64>) -> (DMatrix<f64>, Option<f64>) {
    let (n, p) = x.shape();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = xc.transpose() * &xc / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = p.min(MAX_COMPONENTS);
    let lead = eig.eigenvalues[order[0]].max(0.0);
    if lead <= f64::MIN_POSITIVE {
        // constant input: no variance, no correlation
        return (DMatrix::zeros(n, k), Some(0.0));
    }
    let deficient = order[..k].iter().any(|&i| eig.eigenvalues[i] <= RANK_TOL * lead);
    let ridge = deficient.then_some(RELATIVE_RIDGE * lead);
    let mut basis = DMatrix::zeros(p, k);
    for (j, &i) in order[..k].iter().enumerate() {
        let var = eig.eigenvalues[i].max(0.0) + ridge.unwrap_or(0.0);
        let scale = 1.0 / var.sqrt();
        basis.set_column(j, &(eig.eigenvectors.column(i) * scale));
    }
    (xc * basis, ridge)
}

/// Mean canonical correlation between `x` and `y` (rows are samples).
pub fn cca_mean_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<CcaResult> {
    if x.nrows() != y.nrows() {
        return Err(diffcore::DiffError::ShapeMismatch {
            op: "cca",
            lhs: vec![x.nrows(), x.ncols()],
            rhs: vec![y.nrows(), y.ncols()],
        }
        .into());
    }
    for m in [x, y] {
        if m.nrows() <= m.ncols() {
            return Err(PcaError::InsufficientSamples {
                what: "cca",
                samples: m.nrows(),
                features: m.ncols(),
            });
        }
    }
    let n = x.nrows() as f64;
    let (wx, rx) = whitened_components(x);
    let (wy, ry) = whitened_components(y);
    let cross = wx.transpose() * &wy / (n - 1.0);
    let mut corr: Vec<f64> = cross.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    corr.sort_by(|a, b| b.total_cmp(a));
    let mean = (corr.iter().sum::<f64>() / corr.len() as f64).clamp(0.0, 1.0);
    Ok(CcaResult {
        mean,
        correlations: corr,
        components: (wx.ncols(), wy.ncols()),
        ridge: (rx, ry),
    })
}

/// Flattens all leading axes into samples; the last axis is features.
pub fn feature_matrix<T: Scalar>(t: &Tensor<T>) -> DMatrix<f64> {
    let f = *t.dims().last().expect("rank >= 1");
    let n = t.numel() / f;
    DMatrix::from_row_iterator(n, f, t.data().iter().map(|v| v.as_f64()))
}

/// Symmetric `Z×Z` matrix of mean canonical correlations between expert
/// outputs; the diagonal is 1 by definition.
pub fn expert_redundancy<T: Scalar>(experts: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    let mats: Vec<DMatrix<f64>> = experts.iter().map(feature_matrix).collect();
    let z = mats.len();
    let mut out = vec![vec![1.0; z]; z];
    for i in 0..z {
        for j in i + 1..z {
            let r = cca_mean_correlation(&mats[i], &mats[j])?.mean;
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

/// Coupling between the two streams of a block.
pub fn stream_coupling<T: Scalar>(spatial: &Tensor<T>, semantic: &Tensor<T>) -> Result<f64> {
    Ok(cca_mean_correlation(&feature_matrix(spatial), &feature_matrix(semantic))?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    /// Pairwise expert redundancy of the last block; empty without experts.
    pub experts: Vec<Vec<f64>>,
    /// Final stream coupling per block.
    pub coupling: Vec<f64>,
    pub protocol: CcaProtocol,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let t = Tensor::<f64>::randn([n, p], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        DMatrix::from_row_slice(n, p, t.data())
    }

    #[test]
    fn self_pair_is_one() {
        let x = gaussian(300, 8, 0);
        let r = cca_mean_correlation(&x, &x).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-9);
        assert_eq!(r.ridge, (None, None));
    }

    #[test]
    fn too_few_samples() {
        let x = gaussian(5, 8, 0);
        assert!(matches!(cca_mean_correlation(&x, &x), Err(PcaError::InsufficientSamples { .. })));
    }

    #[test]
    fn wide_inputs_use_twenty_components() {
        let x = gaussian(400, 30, 1);
        let r = cca_mean_correlation(&x, &x).unwrap();
        assert_eq!(r.components, (20, 20));
        assert!((r.mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_deficiency_applies_ridge() {
        let mut x = gaussian(200, 4, 2);
        let c0 = x.column(0).clone_owned();
        x.set_column(3, &(c0 * 2.0));
        let r = cca_mean_correlation(&x, &gaussian(200, 4, 3)).unwrap();
        assert!(r.ridge.0.is_some() && r.ridge.1.is_none());
        assert!(r.mean.is_finite() && (0.0..=1.0).contains(&r.mean));
    }

    #[test]
    fn identical_experts_fully_redundant() {
        let t = Tensor::<f32>::randn([4, 4, 8, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let m = expert_redundancy(&[t.clone(), t.clone(), t]).unwrap();
        for row in &m {
            for v in row {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }
}
