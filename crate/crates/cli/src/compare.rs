//! Paired-seed comparison of sweep variants.
//!
//! Every variant runs on the same seeds, and a seed fixes the task, so all
//! variants see bit-identical tasks; the harness checks this through the
//! task checksums. Runs execute on a worker pool capped by
//! `PCAAGG_THREADS`, each with its own fresh state and run directory, and
//! results merge in (variant, seed) order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::runner::{execute, RunOutcome};
use crate::spec::{ExperimentSpec, Variant};
use crate::table::Table;

pub const THREADS_ENV: &str = "PCAAGG_THREADS";

/// Worker count from `PCAAGG_THREADS`, else the available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// `None` on success, else the error chain.
    pub error: Option<String>,
    pub miou: Option<f64>,
    pub hiou: Option<f64>,
    pub coupling_final: Option<f64>,
    pub task_checksum: Option<String>,
    pub init_checksum: Option<String>,
    pub wall_clock_s: f64,
}

/// Mean and sample standard deviation; the deviation needs two values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub spec: ExperimentSpec,
    pub param_count: usize,
    pub miou: Option<Stat>,
    pub hiou: Option<Stat>,
    pub coupling_final: Option<Stat>,
    pub wall_clock_s: Option<Stat>,
    /// Seed-mean total loss per step.
    pub loss_curve: Vec<f64>,
    /// Seed-mean block-averaged stream coupling at each logged step.
    pub coupling_curve: Vec<(usize, f64)>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub seeds: Vec<u64>,
    /// Whether every variant saw the same task checksum for each seed.
    pub paired: bool,
    pub variants: Vec<VariantSummary>,
}

impl ComparisonSummary {
    pub fn failures(&self) -> Vec<&RunRecord> {
        self.variants.iter().flat_map(|v| &v.runs).filter(|r| r.error.is_some()).collect()
    }
}

fn record(variant: &str, seed: u64, r: &Result<RunOutcome>, fallback_s: f64) -> RunRecord {
    match r {
        Ok(o) => RunRecord {
            variant: variant.into(),
            seed,
            error: None,
            miou: Some(o.metrics.miou),
            hiou: o.metrics.hiou,
            coupling_final: o.metrics.redundancy.coupling_final,
            task_checksum: Some(o.metrics.task_checksum.clone()),
            init_checksum: Some(o.metrics.init_checksum.clone()),
            wall_clock_s: o.wall_clock.as_secs_f64(),
        },
        Err(e) => RunRecord {
            variant: variant.into(),
            seed,
            error: Some(format!("{e:#}")),
            miou: None,
            hiou: None,
            coupling_final: None,
            task_checksum: None,
            init_checksum: None,
            wall_clock_s: fallback_s,
        },
    }
}

fn mean_curves(outcomes: &[&RunOutcome]) -> (Vec<f64>, Vec<(usize, f64)>) {
    let Some(first) = outcomes.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = outcomes.len() as f64;
    let steps = outcomes.iter().map(|o| o.trace.len()).min().unwrap_or(0);
    let loss = (0..steps).map(|k| outcomes.iter().map(|o| o.trace[k].total).sum::<f64>() / n).collect();
    let logged = outcomes.iter().map(|o| o.coupling.len()).min().unwrap_or(0);
    let coupling = (0..logged)
        .map(|k| {
            let v = outcomes
                .iter()
                .map(|o| {
                    let b = &o.coupling[k].per_block;
                    b.iter().sum::<f64>() / b.len() as f64
                })
                .sum::<f64>()
                / n;
            (first.coupling[k].step, v)
        })
        .collect();
    (loss, coupling)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn stat_cells(s: Option<Stat>) -> [String; 2] {
    [opt(s.map(|s| s.mean)), opt(s.and_then(|s| s.std))]
}

fn write_tables(out: &Path, summary: &ComparisonSummary) -> Result<()> {
    let mut t = Table::new([
        "variant",
        "architecture",
        "fuse_mode",
        "z",
        "lambda",
        "seeds",
        "completed",
        "param_count",
        "miou_mean",
        "miou_std",
        "hiou_mean",
        "hiou_std",
        "coupling_final_mean",
        "coupling_final_std",
        "wall_clock_s_mean",
    ]);
    for v in &summary.variants {
        let m = &v.spec.model;
        let mut row = vec![
            v.name.clone(),
            m.architecture.to_string(),
            m.fuse_mode.to_string(),
            m.z.to_string(),
            format!("{}", m.lambda),
            v.runs.len().to_string(),
            v.runs.iter().filter(|r| r.error.is_none()).count().to_string(),
            v.param_count.to_string(),
        ];
        for s in [v.miou, v.hiou, v.coupling_final] {
            row.extend(stat_cells(s));
        }
        row.push(opt(v.wall_clock_s.map(|s| s.mean)));
        t.push(row);
    }
    t.write(out.join("summary.csv"))?;

    let mut runs = Table::new(["variant", "seed", "status", "miou", "hiou", "coupling_final", "task_checksum", "init_checksum", "wall_clock_s"]);
    for r in summary.variants.iter().flat_map(|v| &v.runs) {
        runs.push(vec![
            r.variant.clone(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_else(|| "ok".into()),
            opt(r.miou),
            opt(r.hiou),
            opt(r.coupling_final),
            r.task_checksum.clone().unwrap_or_default(),
            r.init_checksum.clone().unwrap_or_default(),
            format!("{:.3}", r.wall_clock_s),
        ]);
    }
    runs.write(out.join("runs.csv"))?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// Runs every variant of `spec` on seeds `base..base+seeds`, where `base`
/// is the spec's model seed, into `out/<variant>/seed-<s>/`.
pub fn compare(spec: &ExperimentSpec, seeds: usize, out: &Path, threads: usize) -> Result<ComparisonSummary> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if seeds < 5 {
        log::warn!("{seeds} seeds; mean ± stddev is reported over fewer than 5");
    }
    spec.validate()?;
    let variants: Vec<Variant> = spec.variants();
    let base = spec.model.seed;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base + k).collect();
    let jobs: Vec<(usize, u64, PathBuf)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| seed_list.iter().map(move |&s| (i, s, out.join(&v.name).join(format!("seed-{s}")))))
        .collect();
    fs::create_dir_all(out)?;
    log::info!("{} variants x {} seeds on {threads} workers", variants.len(), seeds);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let results: Vec<(Result<RunOutcome>, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|(i, s, dir)| {
                let t = std::time::Instant::now();
                let r = execute(&variants[*i].spec, *s, dir);
                if let Err(e) = &r {
                    log::error!("{}: {e:#}", dir.display());
                }
                (r, t.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut summaries = Vec::with_capacity(variants.len());
    for (i, v) in variants.iter().enumerate() {
        let mine: Vec<&(Result<RunOutcome>, f64)> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == i).map(|(_, r)| r).collect();
        let runs: Vec<RunRecord> = mine.iter().zip(&seed_list).map(|((r, t), &s)| record(&v.name, s, r, *t)).collect();
        let ok: Vec<&RunOutcome> = mine.iter().filter_map(|(r, _)| r.as_ref().ok()).collect();
        let (loss_curve, coupling_curve) = mean_curves(&ok);
        let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| runs.iter().filter_map(f).collect::<Vec<f64>>();
        summaries.push(VariantSummary {
            name: v.name.clone(),
            spec: v.spec.clone(),
            param_count: crate::runner::param_breakdown(&v.spec.model)?.last().map(|r| r.1).unwrap_or(0),
            miou: Stat::of(&collect(&|r| r.miou)),
            hiou: Stat::of(&collect(&|r| r.hiou)),
            coupling_final: Stat::of(&collect(&|r| r.coupling_final)),
            wall_clock_s: Stat::of(&runs.iter().filter(|r| r.error.is_none()).map(|r| r.wall_clock_s).collect::<Vec<_>>()),
            loss_curve,
            coupling_curve,
            runs,
        });
    }
    let paired = seed_list.iter().enumerate().all(|(k, _)| {
        let sums: Vec<&String> = summaries.iter().filter_map(|v| v.runs[k].task_checksum.as_ref()).collect();
        sums.windows(2).all(|w| w[0] == w[1])
    });
    if !paired {
        log::error!("variants saw different tasks for the same seed");
    }
    let summary = ComparisonSummary {
        seeds: seed_list,
        paired,
        variants: summaries,
    };
    write_tables(out, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.7]).unwrap().std, None);
        assert!(Stat::of(&[]).is_none());
    }
}
