//! Experiment specification files.
//!
//! A spec is JSON with an explicit `schema_version`. Every object rejects
//! unknown keys. Omitted fields take the desk defaults. A run directory's
//! `config.json` is itself a valid spec for that single run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcaagg::{AdamW, Architecture, FuseMode, ModelConfig, TaskConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub optimizer: AdamW,
    /// Stream-coupling cadence in steps; 0 logs none.
    pub coupling_every: usize,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 500,
            optimizer: AdamW::default(),
            coupling_every: 50,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Evaluate every this many steps into `eval.csv`; 0 evaluates only at
    /// the end.
    pub every: usize,
    /// Count classes with an empty union as IoU 0 instead of excluding them.
    pub undefined_as_zero: bool,
}

/// Ablation axes. Variants are the Cartesian product of the non-empty axes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub architecture: Vec<Architecture>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fuse_mode: Vec<FuseMode>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub z: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.architecture.is_empty() && self.fuse_mode.is_empty() && self.z.is_empty() && self.lambda.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    /// Default output directory of `compare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Sweep::is_empty")]
    pub sweep: Sweep,
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub spec: ExperimentSpec,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid spec {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("`schema_version` {} is not supported (expected {SCHEMA_VERSION})", self.schema_version);
        }
        self.task.validate()?;
        if self.sweep.z.contains(&0) {
            bail!("`sweep.z` must contain positive values");
        }
        if self.sweep.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            bail!("`sweep.lambda` must contain finite values >= 0");
        }
        for v in self.variants() {
            v.spec.model.validate().with_context(|| format!("variant `{}`", v.name))?;
        }
        Ok(())
    }

    /// The spec of a single run: no sweep, no output directory.
    pub fn single(&self) -> ExperimentSpec {
        ExperimentSpec {
            output_dir: None,
            sweep: Sweep::default(),
            ..self.clone()
        }
    }

    /// Sweep points in axis order architecture, fuse mode, Z, λ. Without
    /// axes there is one variant named `base`.
    pub fn variants(&self) -> Vec<Variant> {
        let base = self.single();
        let mut out = vec![(Vec::<String>::new(), base)];
        fn expand<V: Clone>(out: Vec<(Vec<String>, ExperimentSpec)>, axis: &[V], label: impl Fn(&V) -> String, set: impl Fn(&mut ModelConfig, V)) -> Vec<(Vec<String>, ExperimentSpec)> {
            if axis.is_empty() {
                return out;
            }
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for (names, spec) in out {
                for v in axis {
                    let mut s = spec.clone();
                    set(&mut s.model, v.clone());
                    let mut n = names.clone();
                    n.push(label(v));
                    next.push((n, s));
                }
            }
            next
        }
        out = expand(out, &self.sweep.architecture, |a| a.to_string(), |m, a| m.architecture = a);
        out = expand(out, &self.sweep.fuse_mode, |f| format!("fuse-{f}"), |m, f| m.fuse_mode = f);
        out = expand(out, &self.sweep.z, |z| format!("z{z}"), |m, z| m.z = z);
        out = expand(out, &self.sweep.lambda, |l| format!("lambda{l}"), |m, l| m.lambda = l);
        out.into_iter()
            .map(|(names, spec)| Variant {
                name: if names.is_empty() { "base".into() } else { names.join("_") },
                spec,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }
}
