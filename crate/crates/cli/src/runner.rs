//! One seeded run: synthesize the task, train, evaluate, and write the run
//! directory.
//!
//! ```text
//! config.json          resolved single-run spec, seed included
//! trace.csv            step,l_sup,l_od,total,mean_abs_m_block{n}...
//! coupling_trace.csv   step,block{n}...,mean
//! eval.csv             step,miou,seen_miou,unseen_miou,hiou
//! checkpoints/step-K/  parameters, AdamW moments, step and RNG state
//! features/            expert and stream outputs of the final model
//! final_metrics.json
//! ```
//!
//! Every file is a pure function of `config.json`; nothing records wall
//! time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use diffcore::{ParamStore, Scalar};
use pcaagg::cca::{self, CcaProtocol};
use pcaagg::costvolume::synthesize_task;
use pcaagg::model::{block_prefix, fuse_prefix, init_model};
use pcaagg::train::{evaluate, train, CouplingRow, Evaluation, TraceRow};
use pcaagg::{ModelConfig, SyntheticTask, TrainOptions, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::spec::ExperimentSpec;
use crate::table::Table;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub id: usize,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancySummary {
    /// Pairwise expert redundancy of the last block; empty without experts.
    pub experts: Vec<Vec<f64>>,
    /// Mean final stream coupling over blocks.
    pub coupling_final: Option<f64>,
    pub coupling_per_block: Vec<Option<f64>>,
    pub protocol: CcaProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub hiou: Option<f64>,
    pub samples: u64,
    pub redundancy: RedundancySummary,
    pub param_count: usize,
    pub task_checksum: String,
    pub init_checksum: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub metrics: FinalMetrics,
    pub trace: Vec<TraceRow>,
    pub coupling: Vec<CouplingRow>,
    pub wall_clock: Duration,
}

/// SHA-256 over every parameter and buffer in path order.
pub fn store_checksum<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (path, t) in store.iter().chain(store.buffers()) {
        h.update(path.as_bytes());
        h.update(diffcore::ptns::encode(t));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `spec` with the run seed written into the model config.
pub fn seeded(spec: &ExperimentSpec, seed: u64) -> ExperimentSpec {
    let mut s = spec.single();
    s.model.seed = seed;
    s
}

/// Trainable parameter count of every top-level group, in layout order.
pub fn param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let store = init_model::<f32>(cfg, 0)?;
    let mut rows = vec![("embed".to_string(), store.param_count_under("embed."))];
    for n in 1..=cfg.num_blocks {
        let b = block_prefix(n);
        rows.push((format!("{b}.spatial"), store.param_count_under(&format!("{b}.spatial."))));
        rows.push((format!("{b}.class"), store.param_count_under(&format!("{b}.class."))));
        let f = fuse_prefix(n);
        let fused = store.param_count_under(&format!("{f}."));
        if fused > 0 {
            rows.push((f, fused));
        }
    }
    rows.push(("decoder".to_string(), store.param_count_under("decoder.")));
    rows.push(("total".to_string(), store.param_count()));
    Ok(rows)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_trace(dir: &Path, trace: &[TraceRow], blocks: usize) -> Result<()> {
    let mut header = vec!["step".to_string(), "l_sup".into(), "l_od".into(), "total".into()];
    header.extend((1..=blocks).map(|n| format!("mean_abs_m_block{n}")));
    let mut t = Table::new(header);
    for r in trace {
        let mut row = vec![r.step.to_string(), num(r.l_sup), num(r.l_od), num(r.total)];
        row.extend(r.mean_abs_m.iter().map(|&v| num(v)));
        t.push(row);
    }
    t.write(dir.join("trace.csv"))
}

fn write_coupling(dir: &Path, coupling: &[CouplingRow], blocks: usize) -> Result<()> {
    let mut header = vec!["step".to_string()];
    header.extend((1..=blocks).map(|n| format!("block{n}")));
    header.push("mean".into());
    let mut t = Table::new(header);
    for r in coupling {
        let mut row = vec![r.step.to_string()];
        row.extend(r.per_block.iter().map(|&v| num(v)));
        row.push(num(r.per_block.iter().sum::<f64>() / r.per_block.len() as f64));
        t.push(row);
    }
    t.write(dir.join("coupling_trace.csv"))
}

/// Feature dump of one block: `(block, expert or stream name, file)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub block: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    /// Which input the features were computed on.
    pub probe: String,
    pub entries: Vec<DumpEntry>,
}

fn write_features(dir: &Path, ev: &Evaluation) -> Result<()> {
    let root = dir.join("features");
    let mut entries = Vec::new();
    for (i, (b, e)) in ev.streams.iter().enumerate() {
        let block = i + 1;
        let sub = format!("block-{block}");
        fs::create_dir_all(root.join(&sub))?;
        for (name, t) in [("spatial", b), ("semantic", e)] {
            let file = format!("{sub}/{name}.ptns");
            diffcore::ptns::save(root.join(&file), t)?;
            entries.push(DumpEntry {
                block,
                expert: None,
                stream: Some(name.into()),
                file,
            });
        }
        for (z, d) in ev.experts.get(i).into_iter().flatten().enumerate() {
            let file = format!("{sub}/expert-{z}.ptns");
            diffcore::ptns::save(root.join(&file), d)?;
            entries.push(DumpEntry {
                block,
                expert: Some(z),
                stream: None,
                file,
            });
        }
    }
    let manifest = DumpManifest {
        probe: "training task, batch-norm eval mode".into(),
        entries,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn redundancy(ev: &Evaluation) -> RedundancySummary {
    let experts = match ev.experts.last() {
        Some(ds) if !ds.is_empty() => cca::expert_redundancy(ds).unwrap_or_else(|e| {
            log::warn!("expert redundancy skipped: {e}");
            Vec::new()
        }),
        _ => Vec::new(),
    };
    let coupling_per_block: Vec<Option<f64>> = ev
        .streams
        .iter()
        .map(|(b, e)| match cca::stream_coupling(b, e) {
            Ok(v) => Some(v),
            Err(err) => {
                log::warn!("stream coupling skipped: {err}");
                None
            }
        })
        .collect();
    let defined: Vec<f64> = coupling_per_block.iter().flatten().copied().collect();
    RedundancySummary {
        experts,
        coupling_final: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        coupling_per_block,
        protocol: CcaProtocol::default(),
    }
}

fn final_metrics(task: &SyntheticTask, ev: &Evaluation, param_count: usize, task_checksum: String, init_checksum: String) -> FinalMetrics {
    let r = &ev.report;
    FinalMetrics {
        miou: r.miou,
        per_class: r
            .per_class
            .iter()
            .enumerate()
            .map(|(id, &iou)| ClassIou {
                id,
                name: task.class_names[id].clone(),
                iou,
            })
            .collect(),
        seen_miou: r.seen_miou,
        unseen_miou: r.unseen_miou,
        hiou: r.hiou,
        samples: r.samples,
        redundancy: redundancy(ev),
        param_count,
        task_checksum,
        init_checksum,
    }
}

/// Runs `spec` with `seed` into `out`. Training failures leave the partial
/// trace and the last good checkpoint behind and return an error.
pub fn execute(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    let spec = seeded(spec, seed);
    spec.validate()?;
    let cfg = &spec.model;
    fs::create_dir_all(out).with_context(|| format!("creating run directory {}", out.display()))?;
    fs::write(out.join("config.json"), spec.to_json())?;

    let task = synthesize_task(cfg, &spec.task, seed)?;
    let task_checksum = task.checksum();
    let mut state = TrainState::<f32>::new(init_model(cfg, seed)?, seed);
    let init_checksum = store_checksum(&state.params);
    let param_count = state.params.param_count();

    let ckpt_every = spec.train.checkpoint_every;
    let eval_every = spec.eval.every;
    let undefined_as_zero = spec.eval.undefined_as_zero;
    let ckpt_root = out.join("checkpoints");
    let mut evals = Table::new(["step", "miou", "seen_miou", "unseen_miou", "hiou"]);
    let mut eval_row = |step: u64, ev: &Evaluation| {
        let r = &ev.report;
        evals.push(vec![step.to_string(), num(r.miou), opt(r.seen_miou), opt(r.unseen_miou), opt(r.hiou)]);
    };
    let opts = TrainOptions {
        steps: spec.train.steps,
        hyper: spec.train.optimizer.clone(),
        coupling_every: spec.train.coupling_every,
        checkpoint_every: 1,
    };
    let mut hook = |st: &TrainState<f32>| -> pcaagg::Result<()> {
        if ckpt_every > 0 && st.step.is_multiple_of(ckpt_every as u64) {
            st.save(ckpt_root.join(format!("step-{}", st.step)))?;
        }
        if eval_every > 0 && st.step.is_multiple_of(eval_every as u64) {
            eval_row(st.step, &evaluate(cfg, &st.params, &task, undefined_as_zero)?);
        }
        if st.step.is_multiple_of(100) {
            log::debug!("{}: step {}", out.display(), st.step);
        }
        Ok(())
    };
    let report = train(cfg, &task, &mut state, &opts, &mut hook)?;
    write_trace(out, &report.trace, cfg.num_blocks)?;
    write_coupling(out, &report.coupling, cfg.num_blocks)?;
    let last_ckpt = ckpt_root.join(format!("step-{}", state.step));
    if !last_ckpt.exists() {
        state.save(&last_ckpt)?;
    }
    if let Some(e) = report.failure {
        evals.write(out.join("eval.csv"))?;
        return Err(anyhow::Error::new(e).context(format!(
            "run {} stopped; last good state kept in {}",
            out.display(),
            last_ckpt.display()
        )));
    }

    let ev = evaluate(cfg, &state.params, &task, undefined_as_zero)?;
    eval_row(state.step, &ev);
    evals.write(out.join("eval.csv"))?;
    write_features(out, &ev)?;
    let metrics = final_metrics(&task, &ev, param_count, task_checksum, init_checksum);
    fs::write(out.join("final_metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    log::info!(
        "{}: seed {seed}, {} steps, mIoU {:.4}",
        out.display(),
        report.trace.len(),
        metrics.miou
    );
    Ok(RunOutcome {
        dir: out.to_path_buf(),
        seed,
        metrics,
        trace: report.trace,
        coupling: report.coupling,
        wall_clock: start.elapsed(),
    })
}

/// Human-readable resolved config and parameter counts for `--dry-run`.
pub fn dry_run(spec: &ExperimentSpec, seed: u64) -> Result<String> {
    let spec = seeded(spec, seed);
    spec.validate()?;
    let mut s = spec.to_json();
    s.push_str("\nparameters:\n");
    for (name, count) in param_breakdown(&spec.model)? {
        s.push_str(&format!("  {name:<22} {count}\n"));
    }
    Ok(s)
}
