//! Deterministic full-batch training on one synthetic task, and
//! evaluation in batch-norm eval mode.

use diffcore::{BatchNormMode, ParamStore, Scalar, Session, Tensor};

use crate::cca;
use crate::config::ModelConfig;
use crate::costvolume::{argmax_last, SyntheticTask};
use crate::error::{PcaError, Result};
use crate::metrics::{evaluate_predictions, EvalReport};
use crate::model::{self, mean_abs};
use crate::optim::{optimizer_step, AdamW, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub hyper: AdamW,
    /// Log stream coupling every this many steps (and at the last step);
    /// 0 disables.
    pub coupling_every: usize,
    /// Call the checkpoint hook every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            hyper: AdamW::default(),
            coupling_every: 50,
            checkpoint_every: 0,
        }
    }
}

/// Losses at one step, evaluated before that step's update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l_sup: f64,
    pub l_od: f64,
    pub total: f64,
    /// Mean `|M_i|` per block.
    pub mean_abs_m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingRow {
    pub step: usize,
    /// Stream coupling per block.
    pub per_block: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub coupling: Vec<CouplingRow>,
    /// Set when training stopped early. The state then holds the last good
    /// parameters.
    pub failure: Option<PcaError>,
}

fn snapshot_buffers<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    store.buffers().map(|(k, v)| (k.clone(), v.clone())).collect()
}

fn restore_buffers<T: Scalar>(store: &mut ParamStore<T>, saved: Vec<(String, Tensor<T>)>) {
    for (k, v) in saved {
        *store.buffer_mut(&k).expect("buffer set is fixed") = v;
    }
}

/// Runs `opts.steps` updates of forward → losses → backward → AdamW.
/// `checkpoint` is called with the state after every `checkpoint_every`-th
/// update. A non-finite loss or gradient stops training with the state
/// left at the last good step.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    task: &SyntheticTask,
    state: &mut TrainState<T>,
    opts: &TrainOptions,
    checkpoint: &mut dyn FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(opts.steps);
    let mut coupling = Vec::new();
    let mut failure = None;
    for k in 0..opts.steps {
        let saved = snapshot_buffers(&state.params);
        let mut s = Session::new(&mut state.params, BatchNormMode::Train);
        let obj = model::objective(&mut s, cfg, task)?;
        let g = &s.graph;
        let row = TraceRow {
            step: k,
            l_sup: g.value(obj.l_sup).item().as_f64(),
            l_od: g.value(obj.l_od).item().as_f64(),
            total: g.value(obj.total).item().as_f64(),
            mean_abs_m: obj.similarity.iter().map(|&m| mean_abs(g.value(m))).collect(),
        };
        if !row.total.is_finite() {
            drop(s);
            restore_buffers(&mut state.params, saved);
            failure = Some(PcaError::Divergence { step: k, loss: row.total });
            break;
        }
        let log_coupling = opts.coupling_every > 0 && (k % opts.coupling_every == 0 || k + 1 == opts.steps);
        if log_coupling {
            let per_block = obj
                .forward
                .pairs
                .iter()
                .map(|p| cca::stream_coupling(g.value(p.spatial), g.value(p.semantic)))
                .collect::<Result<Vec<_>>>()?;
            coupling.push(CouplingRow { step: k, per_block });
        }
        let grads = s.gradients(obj.total)?;
        drop(s);
        if let Err(e) = optimizer_step(state, &grads, &opts.hyper) {
            restore_buffers(&mut state.params, saved);
            if log_coupling {
                coupling.pop();
            }
            failure = Some(e);
            break;
        }
        trace.push(row);
        if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every as u64) {
            checkpoint(state)?;
        }
    }
    Ok(TrainReport {
        trace,
        coupling,
        failure,
    })
}

/// Forward values of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Argmax labels at label resolution.
    pub predictions: Vec<u8>,
    pub report: EvalReport,
    /// `D_z` per block, empty for architectures without experts.
    pub experts: Vec<Vec<Tensor<f32>>>,
    /// `(B_n, E_n)` per block.
    pub streams: Vec<(Tensor<f32>, Tensor<f32>)>,
}

/// Evaluates on all labels of `task` with batch norm in eval mode.
pub fn evaluate<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, task: &SyntheticTask, undefined_as_zero: bool) -> Result<Evaluation> {
    let mut store = params.clone();
    let mut s = Session::new(&mut store, BatchNormMode::Eval);
    let (v, t) = model::task_inputs(&mut s, task);
    let out = model::forward(&mut s, cfg, v, t)?;
    let g = &s.graph;
    let predictions = argmax_last(g.value(out.logits));
    let report = evaluate_predictions(&predictions, &task.labels, &task.seen, undefined_as_zero)?;
    let experts = out
        .fused
        .iter()
        .map(|f| f.experts.iter().map(|&d| g.value(d).cast()).collect())
        .collect();
    let streams = out
        .pairs
        .iter()
        .map(|p| (g.value(p.spatial).cast(), g.value(p.semantic).cast()))
        .collect();
    Ok(Evaluation {
        predictions,
        report,
        experts,
        streams,
    })
}
