//! Methods × seeds orchestration and the output directory layout:
//! `<out>/<method>/<seed>/{curve.csv, checkpoint.txt, attn_*.csv}`,
//! `<out>/aggregate.csv` and `<out>/manifest.txt`.

use crate::config::ExperimentConfig;
use crate::heatmap::export_heatmaps;
use crate::report::{self, AggregateRow};
use crate::checkpoint;
use agp_core::agents::AgentKind;
use agp_core::training::{run_experiment, stream_rng, CurvePoint, Stream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Evaluation-stream counter reserved for heatmap resets, far above any
/// evaluation count.
const HEATMAP_STREAM: u64 = 1 << 40;

pub fn run_dir(out: &Path, kind: AgentKind, seed: u64) -> PathBuf {
    out.join(kind.name()).join(seed.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: AgentKind,
    pub seed: u64,
    /// Final evaluation point (`None` for a zero-episode run), or the error.
    pub outcome: Result<Option<CurvePoint>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

fn run_cell(cfg: &ExperimentConfig, kind: AgentKind, seed: u64, out: &Path) -> Result<Option<CurvePoint>, String> {
    let train = cfg.run_config(kind, seed);
    let run = run_experiment(&train).map_err(|e| e.to_string())?;
    let dir = run_dir(out, kind, seed);
    let curve = report::curve_csv(&run.curve).map_err(|e| e.to_string())?;
    report::write(&dir.join(CURVE_FILE), &curve).map_err(|e| e.to_string())?;
    report::write(&dir.join(CHECKPOINT_FILE), &checkpoint::save(&run.agent)).map_err(|e| e.to_string())?;
    if cfg.heatmaps && kind.uses_graph() {
        let mut rng = stream_rng(seed, Stream::Eval, HEATMAP_STREAM);
        export_heatmaps(&run.agent, &train.env, cfg.heatmap_batch, &dir, &mut rng).map_err(|e| e.to_string())?;
    }
    Ok(run.curve.last().copied())
}

fn manifest(cells: &[CellResult]) -> String {
    let mut out = format!("cells {}\nfailed {}\n", cells.len(), cells.iter().filter(|c| c.outcome.is_err()).count());
    for c in cells {
        let status = match &c.outcome {
            Ok(Some(p)) => format!("ok episodes={} success={}", p.episode, report::fmt_f64(p.success_rate)),
            Ok(None) => "ok episodes=0".to_string(),
            Err(e) => format!("failed: {}", e.replace('\n', " ")),
        };
        out.push_str(&format!("{} {} {status}\n", c.method.name(), c.seed));
    }
    out
}

/// Run every (method, seed) cell, `cfg.threads` at a time, then write the
/// aggregate and manifest. Cell failures are recorded, not propagated;
/// `progress` is called as each cell finishes.
pub fn run_suite_with(cfg: &ExperimentConfig, out: &Path, progress: &(dyn Fn(&CellResult) + Sync)) -> Result<SuiteReport, report::ReportError> {
    let jobs: Vec<(AgentKind, u64)> = cfg.methods.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(method, seed)) = jobs.get(i) else { break };
                let cell = CellResult {
                    method,
                    seed,
                    outcome: run_cell(cfg, method, seed, out),
                };
                progress(&cell);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<CellResult> = slots.into_inner().expect("workers joined").into_iter().map(|c| c.expect("every job ran")).collect();
    let aggregate: Vec<AggregateRow> = cfg
        .methods
        .iter()
        .filter_map(|&m| {
            let finals: Vec<CurvePoint> = cells
                .iter()
                .filter(|c| c.method == m)
                .filter_map(|c| c.outcome.as_ref().ok().copied().flatten())
                .collect();
            (!finals.is_empty()).then(|| AggregateRow::from_finals(m.name(), &finals))
        })
        .collect();
    report::write(&out.join(AGGREGATE_FILE), &report::aggregate_csv(&aggregate)?)?;
    report::write(&out.join(MANIFEST_FILE), &manifest(&cells))?;
    Ok(SuiteReport { cells, aggregate })
}

pub fn run_suite(cfg: &ExperimentConfig, out: &Path) -> Result<SuiteReport, report::ReportError> {
    run_suite_with(cfg, out, &|_| {})
}
