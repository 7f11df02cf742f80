//! Parallel cost aggregation for open-vocabulary segmentation at desk
//! scale.
//!
//! A cosine cost volume between synthetic visual and text embeddings is
//! lifted to `C` channels and refined by stacked blocks. The serial wiring
//! runs class aggregation on the output of spatial aggregation; the
//! parallel wiring runs both on the same input and fuses the two streams
//! with a set of experts and learned per-location coefficients, while an
//! orthogonality penalty pushes the streams apart.

pub mod aggregation;
pub mod cca;
pub mod config;
pub mod costvolume;
pub mod epl;
pub mod error;
pub mod fod;
pub mod gradsuite;
pub mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use aggregation::StreamPair;
pub use config::{Architecture, AttentionConfig, FodMode, FodStopGradient, FuseMode, ModelConfig, TaskConfig};
pub use costvolume::SyntheticTask;
pub use error::{PcaError, Result};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use optim::{AdamW, TrainState};
pub use train::{TrainOptions, TrainReport};
