//! Plot-ready CSVs from finished run directories.
//!
//! For each run this writes `figures/coupling.csv` (`step,value`, the
//! block-mean stream coupling) and, per block with expert dumps,
//! `figures/redundancy-block-{n}.csv`, a Z×Z matrix of pairwise expert
//! redundancy. Missing inputs produce a warning for that run, not an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcaagg::cca;

use crate::runner::DumpManifest;
use crate::table::Table;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FigureReport {
    pub run: PathBuf,
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn coupling(run: &Path, figures: &Path, report: &mut FigureReport) -> Result<()> {
    let src = run.join("coupling_trace.csv");
    if !src.exists() {
        report.warnings.push(format!("{}: no coupling_trace.csv", run.display()));
        return Ok(());
    }
    let trace = Table::read(&src)?;
    let (Some(step), Some(mean)) = (trace.column("step"), trace.column("mean")) else {
        report.warnings.push(format!("{}: coupling_trace.csv lacks step/mean columns", run.display()));
        return Ok(());
    };
    let mut t = Table::new(["step", "value"]);
    for row in &trace.rows {
        t.push(vec![row[step].clone(), row[mean].clone()]);
    }
    if t.rows.is_empty() {
        report.warnings.push(format!("{}: coupling was never logged", run.display()));
    }
    let out = figures.join("coupling.csv");
    t.write(&out)?;
    report.written.push(out);
    Ok(())
}

fn redundancy(run: &Path, figures: &Path, report: &mut FigureReport) -> Result<()> {
    let root = run.join("features");
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        report.warnings.push(format!("{}: no feature dumps; redundancy matrices skipped", run.display()));
        return Ok(());
    }
    let manifest: DumpManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?).with_context(|| format!("reading {}", manifest_path.display()))?;
    let mut by_block: BTreeMap<usize, Vec<(usize, String)>> = BTreeMap::new();
    for e in &manifest.entries {
        if let Some(z) = e.expert {
            by_block.entry(e.block).or_default().push((z, e.file.clone()));
        }
    }
    if by_block.is_empty() {
        report.warnings.push(format!("{}: feature dumps hold no expert outputs; redundancy matrices skipped", run.display()));
        return Ok(());
    }
    for (block, mut files) in by_block {
        files.sort();
        let mut experts = Vec::with_capacity(files.len());
        for (_, f) in &files {
            let path = root.join(f);
            match diffcore::ptns::load::<f32>(&path) {
                Ok(t) => experts.push(t),
                Err(e) => {
                    report.warnings.push(format!("{}: {e}", path.display()));
                    break;
                }
            }
        }
        if experts.len() != files.len() {
            continue;
        }
        let m = cca::expert_redundancy(&experts).with_context(|| format!("{} block {block}", run.display()))?;
        let mut header = vec!["expert".to_string()];
        header.extend(files.iter().map(|(z, _)| format!("expert{z}")));
        let mut t = Table::new(header);
        for ((z, _), row) in files.iter().zip(&m) {
            let mut r = vec![format!("expert{z}")];
            r.extend(row.iter().map(|v| format!("{v}")));
            t.push(r);
        }
        let out = figures.join(format!("redundancy-block-{block}.csv"));
        t.write(&out)?;
        report.written.push(out);
    }
    Ok(())
}

/// Emits the figure CSVs of one run directory into `run/figures/`.
pub fn emit_run(run: &Path) -> Result<FigureReport> {
    if !run.join("config.json").exists() {
        anyhow::bail!("{} is not a run directory (no config.json)", run.display());
    }
    let figures = run.join("figures");
    fs::create_dir_all(&figures)?;
    let mut report = FigureReport {
        run: run.to_path_buf(),
        ..FigureReport::default()
    };
    coupling(run, &figures, &mut report)?;
    redundancy(run, &figures, &mut report)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

pub fn emit_figure_data(runs: &[PathBuf]) -> Result<Vec<FigureReport>> {
    runs.iter().map(|r| emit_run(r)).collect()
}
