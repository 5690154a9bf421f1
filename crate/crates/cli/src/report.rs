//! CSV schemas for learning curves, aggregates, heatmaps and benchmarks.
//! Floats are written with 17 significant digits so they read back exactly.

use agp_core::training::{CurvePoint, LearningCurve};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad {schema} csv: {msg}")]
    Schema { schema: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const CURVE_HEADER: [&str; 4] = ["episode", "mean_reward", "success_rate", "epsilon"];
pub const AGGREGATE_HEADER: [&str; 5] = ["method", "seeds", "mean_success", "std_success", "mean_reward"];
pub const BENCH_HEADER: [&str; 4] = ["N", "num_actions", "num_nodes", "mean_us"];

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, schema: &'static str) -> Result<f64> {
    s.parse().map_err(|_| ReportError::Schema {
        schema,
        msg: format!("not a number: `{s}`"),
    })
}

fn parse_usize(s: &str, schema: &'static str) -> Result<usize> {
    s.parse().map_err(|_| ReportError::Schema {
        schema,
        msg: format!("not an integer: `{s}`"),
    })
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn records(text: &str, schema: &'static str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(ReportError::Schema {
            schema,
            msg: format!("header {got:?}, expected {header:?}"),
        });
    }
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

pub fn curve_csv(curve: &LearningCurve) -> Result<String> {
    let mut w = writer();
    w.write_record(CURVE_HEADER)?;
    for p in &curve.points {
        w.write_record([p.episode.to_string(), fmt_f64(p.mean_reward), fmt_f64(p.success_rate), fmt_f64(p.epsilon)])?;
    }
    finish(w)
}

pub fn parse_curve(text: &str) -> Result<LearningCurve> {
    let points = records(text, "curve", &CURVE_HEADER)?
        .iter()
        .map(|r| {
            Ok(CurvePoint {
                episode: parse_usize(&r[0], "curve")?,
                mean_reward: parse_f64(&r[1], "curve")?,
                success_rate: parse_f64(&r[2], "curve")?,
                epsilon: parse_f64(&r[3], "curve")?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LearningCurve { points })
}

/// Final-success statistics of one method across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub seeds: usize,
    pub mean_success: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std_success: f64,
    pub mean_reward: f64,
}

impl AggregateRow {
    pub fn from_finals(method: &str, finals: &[CurvePoint]) -> Self {
        let n = finals.len();
        let mean = |f: fn(&CurvePoint) -> f64| if n == 0 { 0.0 } else { finals.iter().map(f).sum::<f64>() / n as f64 };
        let mean_success = mean(|p| p.success_rate);
        let std_success = if n < 2 {
            0.0
        } else {
            (finals.iter().map(|p| (p.success_rate - mean_success).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            method: method.to_string(),
            seeds: n,
            mean_success,
            std_success,
            mean_reward: mean(|p| p.mean_reward),
        }
    }
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = writer();
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.seeds.to_string(),
            fmt_f64(r.mean_success),
            fmt_f64(r.std_success),
            fmt_f64(r.mean_reward),
        ])?;
    }
    finish(w)
}

pub fn parse_aggregate(text: &str) -> Result<Vec<AggregateRow>> {
    records(text, "aggregate", &AGGREGATE_HEADER)?
        .iter()
        .map(|r| {
            Ok(AggregateRow {
                method: r[0].to_string(),
                seeds: parse_usize(&r[1], "aggregate")?,
                mean_success: parse_f64(&r[2], "aggregate")?,
                std_success: parse_f64(&r[3], "aggregate")?,
                mean_reward: parse_f64(&r[4], "aggregate")?,
            })
        })
        .collect()
}

/// Square matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    /// Row-major, `labels.len()²` entries.
    pub values: Vec<f64>,
}

impl LabeledMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.size();
        &self.values[row * v..(row + 1) * v]
    }
}

pub fn matrix_csv(m: &LabeledMatrix) -> Result<String> {
    let mut w = writer();
    w.write_record(std::iter::once("node").chain(m.labels.iter().map(String::as_str)))?;
    for (r, label) in m.labels.iter().enumerate() {
        w.write_record(std::iter::once(label.clone()).chain(m.row(r).iter().map(|&x| fmt_f64(x))))?;
    }
    finish(w)
}

pub fn parse_matrix(text: &str) -> Result<LabeledMatrix> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.get(0) != Some("node") {
        return Err(ReportError::Schema {
            schema: "heatmap",
            msg: "first column must be `node`".into(),
        });
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut values = Vec::with_capacity(labels.len() * labels.len());
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) != labels.get(rows).map(String::as_str) {
            return Err(ReportError::Schema {
                schema: "heatmap",
                msg: format!("row {rows} label does not match its column"),
            });
        }
        for s in rec.iter().skip(1) {
            values.push(parse_f64(s, "heatmap")?);
        }
        rows += 1;
    }
    if rows != labels.len() {
        return Err(ReportError::Schema {
            schema: "heatmap",
            msg: format!("{rows} rows for {} columns", labels.len()),
        });
    }
    Ok(LabeledMatrix { labels, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub num_agents: usize,
    pub num_actions: usize,
    pub num_nodes: usize,
    pub mean_us: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = writer();
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([r.num_agents.to_string(), r.num_actions.to_string(), r.num_nodes.to_string(), fmt_f64(r.mean_us)])?;
    }
    finish(w)
}

pub fn parse_bench(text: &str) -> Result<Vec<BenchRow>> {
    records(text, "bench", &BENCH_HEADER)?
        .iter()
        .map(|r| {
            Ok(BenchRow {
                num_agents: parse_usize(&r[0], "bench")?,
                num_actions: parse_usize(&r[1], "bench")?,
                num_nodes: parse_usize(&r[2], "bench")?,
                mean_us: parse_f64(&r[3], "bench")?,
            })
        })
        .collect()
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
