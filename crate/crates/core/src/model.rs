//! End-to-end model: cost volume, embedding, stacked aggregation blocks,
//! fusion, and a linear readout upsampled to label resolution.
//!
//! Parameter layout:
//!
//! ```text
//! embed.{weight,bias}                      1→C
//! blocks.{n}.spatial.*, blocks.{n}.class.* Φ and Γ of block n (1-based)
//! blocks.{n}.epl.*                         fusion stage, parallel only
//! decoder.weight                           C→1, no bias (a shift shared by
//!                                          all classes changes nothing)
//! ```
//!
//! For the same reason the serial stack's last Γ has no `fc2.bias`: its
//! residual output feeds the decoder directly.

use diffcore::{Graph, ParamStore, Scalar, Session, Tensor, Var, IGNORE_LABEL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, StreamPair};
use crate::config::{Architecture, ModelConfig};
use crate::costvolume::{self, SyntheticTask};
use crate::epl::{self, FuseOutput};
use crate::error::{bad_config, PcaError, Result};
use crate::fod;
use crate::init;

/// ChaCha stream reserved for parameter initialization, so that a run's
/// task (stream 0) and weights never share random draws.
pub const INIT_STREAM: u64 = 1;

pub fn block_prefix(n: usize) -> String {
    format!("blocks.{n}")
}

pub fn fuse_prefix(n: usize) -> String {
    format!("blocks.{n}.epl")
}

/// Freshly initialized parameters for `cfg`, deterministic in `seed`.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut store = ParamStore::new();
    costvolume::init_embedding(&mut store, "embed", cfg.c, &mut rng)?;
    for n in 1..=cfg.num_blocks {
        aggregation::init_block(&mut store, &block_prefix(n), cfg.c, &mut rng)?;
        if cfg.architecture == Architecture::Parallel {
            epl::init_fuse(&mut store, &fuse_prefix(n), cfg.fuse_mode, cfg.c, cfg.z, &mut rng)?;
        }
    }
    init::linear_no_bias(&mut store, "decoder", cfg.c, 1, &mut rng)?;
    if cfg.architecture == Architecture::Serial {
        store.remove(&format!("{}.class.fc2.bias", block_prefix(cfg.num_blocks)));
    }
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[U·H, U·W, N]`.
    pub logits: Var,
    /// `[H, W, N]` before upsampling.
    pub coarse_logits: Var,
    pub cost: Var,
    pub embedding: Var,
    /// One per block: `(B_n, E_n)` for parallel, `(Φ out, Γ out)` for serial.
    pub pairs: Vec<StreamPair>,
    /// One per block for the parallel architecture.
    pub fused: Vec<FuseOutput>,
}

/// Full forward pass from encoder outputs `visual` `[H,W,C_enc]` and `text`
/// `[N,C_enc]`.
pub fn forward<T: Scalar>(s: &mut Session<T>, cfg: &ModelConfig, visual: Var, text: Var) -> Result<ForwardOutput> {
    let (vd, td) = (s.graph.dims(visual), s.graph.dims(text));
    if vd != [cfg.h, cfg.w, cfg.c_enc] || td != [cfg.n, cfg.c_enc] {
        return Err(bad_config(
            "h/w/n/c_enc",
            format!("task dims {vd:?}/{td:?} do not match config {}x{}x{}/{}", cfg.h, cfg.w, cfg.c_enc, cfg.n),
        ));
    }
    let cost = costvolume::build_cost_volume(&mut s.graph, visual, text)?;
    let embedding = costvolume::embed_cost_volume(s, cost, "embed")?;
    let mut v = embedding;
    let mut pairs = Vec::with_capacity(cfg.num_blocks);
    let mut fused = Vec::new();
    for n in 1..=cfg.num_blocks {
        let prefix = block_prefix(n);
        match cfg.architecture {
            Architecture::Serial => {
                let pair = aggregation::serial_block(s, v, &prefix, &cfg.attention, n)?;
                v = pair.semantic;
                pairs.push(pair);
            }
            Architecture::Parallel => {
                let pair = aggregation::parallel_block(s, v, &prefix, &cfg.attention, n)?;
                let out = epl::fuse(s, &pair, &fuse_prefix(n), cfg.fuse_mode, cfg.z)?;
                v = out.output;
                pairs.push(pair);
                fused.push(out);
            }
        }
    }
    let w = s.param("decoder.weight")?;
    let readout = s.graph.linear(v, w, None)?;
    let coarse_logits = s.graph.reshape(readout, &[cfg.h, cfg.w, cfg.n])?;
    let logits = if cfg.upsample == 1 {
        coarse_logits
    } else {
        s.graph.upsample_bilinear(coarse_logits, cfg.upsample)?
    };
    Ok(ForwardOutput {
        logits,
        coarse_logits,
        cost,
        embedding,
        pairs,
        fused,
    })
}

/// Binds the task's encoder outputs as graph constants.
pub fn task_inputs<T: Scalar>(s: &mut Session<T>, task: &SyntheticTask) -> (Var, Var) {
    let v = s.input(task.visual.cast());
    let t = s.input(task.text.cast());
    (v, t)
}

/// Mean per-pixel cross-entropy over non-ignored pixels.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let n = *g.dims(logits).last().expect("logits have a class axis");
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= n) {
        return Err(PcaError::LabelOutOfRange { label: bad, classes: n });
    }
    if labels.iter().all(|&l| l == IGNORE_LABEL) {
        return Err(PcaError::EmptySupervision);
    }
    Ok(g.cross_entropy(logits, labels)?)
}

/// `L = L_sup + λ·L_od`; without an orthogonality term this is `L_sup`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_sup: Var, l_od: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(bad_config("lambda", "must be >= 0"));
    }
    match l_od {
        Some(od) if lambda > 0.0 => {
            let w = g.mul_scalar(od, T::lit(lambda));
            Ok(g.add(l_sup, w)?)
        }
        _ => Ok(l_sup),
    }
}

/// Graph handles of one training objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub forward: ForwardOutput,
    pub l_sup: Var,
    /// Orthogonality loss of the stream pairs. For the serial architecture
    /// it is a diagnostic only and never enters `total`.
    pub l_od: Var,
    pub total: Var,
    /// `M` maps, one per block.
    pub similarity: Vec<Var>,
}

pub fn objective<T: Scalar>(s: &mut Session<T>, cfg: &ModelConfig, task: &SyntheticTask) -> Result<Objective> {
    let (v, t) = task_inputs(s, task);
    let forward = forward(s, cfg, v, t)?;
    let labels = task.training_labels();
    let l_sup = supervised_loss(&mut s.graph, forward.logits, &labels)?;
    let l_od = fod::fod_loss(&mut s.graph, &forward.pairs, cfg.fod_mode, cfg.fod_stop_gradient)?;
    let similarity = forward
        .pairs
        .iter()
        .map(|p| fod::stream_similarity(&mut s.graph, p, cfg.fod_mode))
        .collect::<Result<Vec<_>>>()?;
    let od_term = (cfg.architecture == Architecture::Parallel).then_some(l_od);
    let total = total_loss(&mut s.graph, l_sup, od_term, cfg.lambda)?;
    Ok(Objective {
        forward,
        l_sup,
        l_od,
        total,
        similarity,
    })
}

/// Mean absolute value of a similarity map.
pub fn mean_abs<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / t.numel() as f64
}
