//! Files written by the CLI and the loaders that read them back.
//!
//! CSV numbers use Rust's shortest round-trip decimal formatting, which is
//! locale independent and parses back to the identical `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use dnf_core::driver::{read_trace_csv, TraceRow};
use dnf_core::mc::McEstimate;
use dnf_core::problems::BoxDomain;
use dnf_core::{RunTrace, SurrogateModel};
use serde::{Deserialize, Serialize};

use crate::config::EffectiveConfig;

pub const TRACE_JSON: &str = "trace.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const DESIGNS_CSV: &str = "designs.csv";
pub const GRID_CSV: &str = "grid.csv";
pub const REFERENCE_JSON: &str = "reference.json";
pub const BASELINE_JSON: &str = "baseline.json";

/// Contents of `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub effective_config: EffectiveConfig,
    pub trace: RunTrace,
}

/// Contents of `reference.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub problem: String,
    pub samples: usize,
    pub seed: u64,
    pub g_calls: usize,
    pub result: McEstimate,
}

/// Contents of `baseline.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub problem: String,
    pub n_max: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub g_calls: usize,
    pub result: McEstimate,
}

/// One evaluated design. Initial designs have iteration 0 and no threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub x: Vec<f64>,
    pub y: f64,
    pub iteration: usize,
    pub threshold: Option<f64>,
}

/// One node of the surrogate contour grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x1: f64,
    pub x2: f64,
    pub g_hat: f64,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_trace_csv(path: &Path, trace: &RunTrace) -> anyhow::Result<()> {
    trace.write_csv(create(path)?)?;
    Ok(())
}

pub fn load_trace_csv(path: &Path) -> anyhow::Result<Vec<TraceRow>> {
    Ok(read_trace_csv(open(path)?)?)
}

/// Every evaluated point of the run, initial design first.
pub fn design_rows(trace: &RunTrace) -> Vec<DesignRow> {
    let mut rows = Vec::new();
    if let Some(init) = &trace.initial {
        for (x, y) in init.points.iter().zip(&init.values) {
            rows.push(DesignRow {
                x: x.clone(),
                y: *y,
                iteration: 0,
                threshold: None,
            });
        }
    }
    for it in &trace.iterations {
        for ((x, y), th) in it.batch.points.iter().zip(&it.values).zip(&it.batch.thresholds) {
            rows.push(DesignRow {
                x: x.clone(),
                y: *y,
                iteration: it.iteration,
                threshold: Some(*th),
            });
        }
    }
    rows
}

pub fn write_designs_csv(path: &Path, dim: usize, rows: &[DesignRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    header.extend(["y", "iteration", "threshold"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.x.iter().map(f64::to_string).collect();
        rec.push(r.y.to_string());
        rec.push(r.iteration.to_string());
        rec.push(r.threshold.map(|t| t.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_designs_csv(path: &Path) -> anyhow::Result<Vec<DesignRow>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header = r.headers()?.clone();
    let dim = header.len().checked_sub(3).filter(|d| *d > 0);
    let Some(dim) = dim else {
        bail!("{}: expected columns x1..xd,y,iteration,threshold", path.display());
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec[i].parse().with_context(|| format!("{}: bad number `{}`", path.display(), &rec[i]))
        };
        let x = (0..dim).map(num).collect::<anyhow::Result<Vec<_>>>()?;
        let threshold = if rec[dim + 2].is_empty() { None } else { Some(num(dim + 2)?) };
        rows.push(DesignRow {
            x,
            y: num(dim)?,
            iteration: rec[dim + 1].parse()?,
            threshold,
        });
    }
    Ok(rows)
}

/// Surrogate values on a `res × res` grid over the first two box
/// coordinates; any further coordinates sit at the box centre.
pub fn surrogate_grid(surrogate: &SurrogateModel, domain: &BoxDomain, res: usize) -> anyhow::Result<Vec<GridRow>> {
    if res < 2 {
        bail!("grid_res: need at least 2 points per axis, got {res}");
    }
    let centre = domain.center();
    let axis = |j: usize, k: usize| domain.lower[j] + (domain.upper[j] - domain.lower[j]) * k as f64 / (res - 1) as f64;
    let mut points = Vec::with_capacity(res * res);
    for a in 0..res {
        for b in 0..res {
            let mut p = centre.clone();
            p[0] = axis(0, a);
            p[1] = axis(1, b);
            points.push(p);
        }
    }
    let values = surrogate.evaluate_points(&points)?;
    Ok(points
        .iter()
        .zip(values)
        .map(|(p, g_hat)| GridRow { x1: p[0], x2: p[1], g_hat })
        .collect())
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["x1", "x2", "g_hat"])?;
    for r in rows {
        w.write_record([r.x1.to_string(), r.x2.to_string(), r.g_hat.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_grid_csv(path: &Path) -> anyhow::Result<Vec<GridRow>> {
    csv::Reader::from_reader(open(path)?)
        .deserialize()
        .map(|r| r.with_context(|| format!("parsing {}", path.display())))
        .collect()
}
