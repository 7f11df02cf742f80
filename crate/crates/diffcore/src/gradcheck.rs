//! Central finite-difference verification of analytic gradients.
//!
//! Every entry of every checked leaf is perturbed by `±step` and the
//! resulting slope `(f(x+h) − f(x−h)) / 2h` is compared with the analytic
//! gradient using `|a − n| / max(|a|, |n|, 1e-8)`.

use crate::error::DiffError;
use crate::graph::Var;
use crate::ops::nn::BatchNormMode;
use crate::params::{ParamStore, Session};

pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Parameter paths to check; empty means every parameter in the store.
    pub leaves: Vec<String>,
    pub mode: BatchNormMode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            leaves: Vec::new(),
            mode: BatchNormMode::Train,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_leaves(mut self, leaves: &[&str]) -> Self {
        self.leaves = leaves.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub path: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar `f`
/// with respect to the selected parameters of `store`.
///
/// `f` must be deterministic. Each evaluation runs on a fresh copy of the
/// store so running statistics never leak between evaluations.
pub fn check_gradients<E, F>(
    store: &ParamStore<f64>,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: Fn(&mut Session<f64>) -> Result<Var, E>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut s = s.clone();
        let mut sess = Session::new(&mut s, cfg.mode);
        let out = f(&mut sess)?;
        let v = sess.graph.value(out);
        if v.numel() != 1 {
            return Err(DiffError::NonScalarLoss(v.dims().to_vec()).into());
        }
        Ok(v.item())
    };

    let analytic = {
        let mut s = store.clone();
        let mut sess = Session::new(&mut s, cfg.mode);
        let out = f(&mut sess)?;
        sess.gradients(out)?
    };

    let leaves: Vec<String> = if cfg.leaves.is_empty() {
        store.paths().cloned().collect()
    } else {
        cfg.leaves.clone()
    };

    let mut reports = Vec::with_capacity(leaves.len());
    let mut probe = store.clone();
    for path in leaves {
        let base = store
            .get(&path)
            .ok_or_else(|| DiffError::UnknownParameter(path.clone()))?
            .clone();
        let zeros = vec![0.0; base.numel()];
        let grad: &[f64] = analytic.get(&path).map_or(&zeros[..], |g| g.data());
        let mut leaf = LeafReport {
            path: path.clone(),
            entries: base.numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..base.numel() {
            let x0 = base.data()[i];
            probe.get_mut(&path).expect("present").data_mut()[i] = x0 + cfg.step;
            let fp = eval(&probe)?;
            probe.get_mut(&path).expect("present").data_mut()[i] = x0 - cfg.step;
            let fm = eval(&probe)?;
            probe.get_mut(&path).expect("present").data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = relative_error(grad[i], numeric);
            if err > leaf.max_rel_error || i == 0 {
                leaf.max_rel_error = err;
                leaf.worst_index = i;
                leaf.analytic = grad[i];
                leaf.numeric = numeric;
            }
        }
        reports.push(leaf);
    }
    Ok(GradCheckReport {
        leaves: reports,
        tol: cfg.tol,
    })
}
