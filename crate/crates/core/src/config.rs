//! Model and task hyperparameters with validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bad_config, PcaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `V_{n+1} = Γ(Φ(V_n))`.
    Serial,
    /// `B = Φ(V)`, `E = Γ(V)`, fused into `V_{n+1}`.
    Parallel,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Serial => "serial",
            Architecture::Parallel => "parallel",
        })
    }
}

/// How the two streams of a parallel block are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// Experts combined with learned per-location coefficients.
    Epl,
    /// One 1×1 conv on the concatenated streams, no experts.
    SingleConv,
    /// Elementwise mean of expert outputs.
    Average,
    /// Elementwise sum of expert outputs.
    Addition,
    /// 1×1 conv over channel-stacked expert outputs.
    Convolution,
}

impl FuseMode {
    pub fn uses_experts(self) -> bool {
        self != FuseMode::SingleConv
    }
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Epl => "epl",
            FuseMode::SingleConv => "single_conv",
            FuseMode::Average => "average",
            FuseMode::Addition => "addition",
            FuseMode::Convolution => "convolution",
        })
    }
}

impl FromStr for FuseMode {
    type Err = PcaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epl" => FuseMode::Epl,
            "single_conv" | "single-conv" => FuseMode::SingleConv,
            "average" => FuseMode::Average,
            "addition" => FuseMode::Addition,
            "convolution" | "convolution-fuse" => FuseMode::Convolution,
            other => return Err(PcaError::UnknownFuseMode(other.to_string())),
        })
    }
}

/// Per-pixel feature vector used by the orthogonality loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FodMode {
    /// Class and channel axes flattened into one vector per pixel.
    #[default]
    Pixel,
    /// Channel-only cosine per (pixel, class) cell.
    PerClass,
}

/// Which stream, if any, is cut off from orthogonality-loss gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FodStopGradient {
    #[default]
    None,
    Spatial,
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Side of the square attention window used by spatial aggregation.
    pub window: usize,
    pub residual: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 4,
            window: 4,
            residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    /// Number of classes.
    pub n: usize,
    /// Aggregation width.
    pub c: usize,
    /// Encoder width of the visual and text embeddings.
    pub c_enc: usize,
    /// Number of expert blocks.
    pub z: usize,
    pub num_blocks: usize,
    pub architecture: Architecture,
    pub fuse_mode: FuseMode,
    pub lambda: f64,
    pub fod_mode: FodMode,
    pub fod_stop_gradient: FodStopGradient,
    pub attention: AttentionConfig,
    /// Integer factor between cost-volume and label resolution.
    pub upsample: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 16,
            w: 16,
            n: 8,
            c: 64,
            c_enc: 32,
            z: 4,
            num_blocks: 2,
            architecture: Architecture::Parallel,
            fuse_mode: FuseMode::Epl,
            lambda: 0.01,
            fod_mode: FodMode::Pixel,
            fod_stop_gradient: FodStopGradient::None,
            attention: AttentionConfig::default(),
            upsample: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn label_dims(&self) -> (usize, usize) {
        (self.h * self.upsample, self.w * self.upsample)
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.attention.heads
    }

    /// Checks every divisibility and range constraint, naming the first
    /// offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("c_enc", self.c_enc),
            ("z", self.z),
            ("num_blocks", self.num_blocks),
            ("upsample", self.upsample),
            ("attention.heads", self.attention.heads),
            ("attention.window", self.attention.window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(bad_config(field, "must be positive"));
            }
        }
        if self.n < 2 {
            return Err(bad_config("n", format!("must be at least 2, got {}", self.n)));
        }
        if self.n > 254 {
            return Err(bad_config("n", "labels are stored as u8 with 255 reserved"));
        }
        if !self.c.is_multiple_of(self.attention.heads) {
            return Err(bad_config(
                "attention.heads",
                format!("{} does not divide c = {}", self.attention.heads, self.c),
            ));
        }
        if !self.h.is_multiple_of(self.attention.window) || !self.w.is_multiple_of(self.attention.window) {
            return Err(bad_config(
                "attention.window",
                format!("{} does not divide the {}x{} grid", self.attention.window, self.h, self.w),
            ));
        }
        if self.c < 4 || !self.c.is_multiple_of(4) {
            return Err(bad_config("c", "must be a positive multiple of 4 (mapper width c/4)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad_config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Parameters of the synthetic encoder outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Std of Gaussian noise added to each visual embedding.
    pub sigma: f64,
    /// Spatial correlation length of the label regions, in cost-volume pixels.
    pub rho: f64,
    /// Fraction of classes that are seen during training; 1 disables the split.
    pub seen_fraction: f64,
    /// Std of Gaussian noise added to the text embeddings.
    pub text_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            sigma: 0.05,
            rho: 2.0,
            seen_fraction: 1.0,
            text_noise: 0.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("sigma", self.sigma), ("rho", self.rho), ("text_noise", self.text_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad_config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction <= 1.0) {
            return Err(bad_config("seen_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn split_enabled(&self) -> bool {
        self.seen_fraction < 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.z, 4);
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.label_dims(), (64, 64));
        TaskConfig::default().validate().unwrap();
    }

    #[test]
    fn divisibility_names_field() {
        let mut c = ModelConfig::default();
        c.attention.window = 5;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("attention.window"), "{e}");
        c.attention.window = 4;
        c.attention.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("attention.heads"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"zz": 3}"#);
        assert!(r.is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"z": 3, "fuse_mode": "average"}"#).unwrap();
        assert_eq!((c.z, c.fuse_mode), (3, FuseMode::Average));
    }

    #[test]
    fn fuse_mode_parse() {
        assert_eq!("single-conv".parse::<FuseMode>().unwrap(), FuseMode::SingleConv);
        assert!(matches!("mystery".parse::<FuseMode>(), Err(PcaError::UnknownFuseMode(_))));
    }
}
