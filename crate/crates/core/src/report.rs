//! Derived result files: ECDF, goodput and BRT summaries, CPU statistics
//! and a markdown report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::plan::NodeRole;
use crate::records::{
    compute_goodput, CsvError, GoodputRecord, ResourceSample, RetentionRecord, RttRecord,
};
use crate::stats::{mean, StatsError};
use crate::{EcdfCurve, StatsSummary};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report")]
    NoRecords,
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ResultSet {
    pub rtt: Vec<RttRecord>,
    pub goodput: Vec<GoodputRecord>,
    pub brt: Vec<RetentionRecord>,
    pub resources: BTreeMap<NodeRole, Vec<ResourceSample>>,
}

impl ResultSet {
    pub fn is_empty(&self) -> bool {
        self.rtt.is_empty()
            && self.goodput.is_empty()
            && self.brt.is_empty()
            && self.resources.values().all(Vec::is_empty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodputSummaryRow {
    pub payload_size: u64,
    pub mean_mbps: f64,
    pub ci99_low: Option<f64>,
    pub ci99_high: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrtDecompositionRow {
    pub payload_size: u64,
    pub mean_brt_ns: f64,
    pub mean_ser_ns: Option<f64>,
    pub mean_deser_ns: Option<f64>,
    pub mean_other_ns: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpuSummaryRow {
    pub role: NodeRole,
    pub mean: f64,
    pub stddev: Option<f64>,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

pub fn rtt_ecdf(records: &[RttRecord]) -> Result<EcdfCurve, StatsError> {
    let v: Vec<f64> = records.iter().map(|r| r.rtt_ns as f64).collect();
    EcdfCurve::from_samples(&v)
}

/// One row per payload size. Each record (one run) contributes one goodput
/// value; the interval is computed over those run values.
pub fn goodput_summary(records: &[GoodputRecord]) -> Vec<GoodputSummaryRow> {
    let mut by_size: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Ok(g) = compute_goodput::<f64>(r) {
            by_size.entry(r.payload_size).or_default().push(g);
        }
    }
    by_size
        .into_iter()
        .map(|(payload_size, values)| {
            let s = StatsSummary::from_samples(&values).expect("non-empty, finite");
            GoodputSummaryRow {
                payload_size,
                mean_mbps: s.mean,
                ci99_low: s.ci99.map(|c| c.0),
                ci99_high: s.ci99.map(|c| c.1),
                n: s.n,
            }
        })
        .collect()
}

/// Per-size averages of retention and its parts; `other = brt - ser - deser`
/// over the records that carry both parts.
pub fn brt_decomposition(records: &[RetentionRecord]) -> Vec<BrtDecompositionRow> {
    let mut by_size: BTreeMap<u64, Vec<&RetentionRecord>> = BTreeMap::new();
    for r in records {
        by_size.entry(r.payload_size).or_default().push(r);
    }
    by_size
        .into_iter()
        .map(|(payload_size, rs)| {
            let brt: Vec<f64> = rs.iter().map(|r| r.brt_ns as f64).collect();
            let ser: Vec<f64> = rs.iter().filter_map(|r| r.ser_ns).map(|v| v as f64).collect();
            let deser: Vec<f64> = rs.iter().filter_map(|r| r.deser_ns).map(|v| v as f64).collect();
            let other: Vec<f64> = rs.iter().filter_map(|r| r.other_ns()).map(|v| v as f64).collect();
            BrtDecompositionRow {
                payload_size,
                mean_brt_ns: mean(&brt).unwrap_or(0.0),
                mean_ser_ns: mean(&ser).ok(),
                mean_deser_ns: mean(&deser).ok(),
                mean_other_ns: mean(&other).ok(),
                n: rs.len(),
            }
        })
        .collect()
}

pub fn cpu_summary(resources: &BTreeMap<NodeRole, Vec<ResourceSample>>) -> Vec<CpuSummaryRow> {
    resources
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(&role, samples)| {
            let v: Vec<f64> = samples.iter().map(|s| s.cpu_pct).collect();
            let s = StatsSummary::from_samples(&v).expect("non-empty, finite");
            CpuSummaryRow {
                role,
                mean: s.mean,
                stddev: s.stddev,
                q25: s.q25,
                q50: s.q50,
                q75: s.q75,
            }
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_ecdf(path: &Path, curve: &EcdfCurve) -> Result<(), ReportError> {
    let mut text = String::from("value_ns,cum_prob\n");
    for &(v, p) in curve.points() {
        let _ = writeln!(text, "{},{}", v as u64, p);
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn markdown(set: &ResultSet) -> String {
    let mut md = String::from("# Evaluation report\n\n");

    if let Ok(curve) = rtt_ecdf(&set.rtt) {
        let ms: Vec<f64> = set.rtt.iter().map(|r| r.rtt_ns as f64 / 1e6).collect();
        let s = StatsSummary::from_samples(&ms).expect("non-empty");
        let p99 = crate::stats::quantile(&ms, 0.99).expect("non-empty");
        let _ = writeln!(md, "## Round-trip time\n");
        let _ = writeln!(md, "| bundles | distinct values | mean ms | q25 ms | median ms | q75 ms | q99 ms | max ms |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            s.n,
            curve.points().len(),
            s.mean,
            s.q25,
            s.q50,
            s.q75,
            p99,
            s.max
        );
    }

    let gp = goodput_summary(&set.goodput);
    if !gp.is_empty() {
        let _ = writeln!(md, "## Goodput\n");
        let _ = writeln!(md, "| payload B | runs | mean Mbit/s | 99% CI low | 99% CI high |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for r in &gp {
            let _ = writeln!(
                md,
                "| {} | {} | {:.2} | {} | {} |",
                r.payload_size,
                r.n,
                r.mean_mbps,
                opt(r.ci99_low, 2),
                opt(r.ci99_high, 2)
            );
        }
        let lossy = set.goodput.iter().filter(|r| r.is_lossy()).count();
        if lossy > 0 {
            let _ = writeln!(md, "\n{lossy} run(s) delivered fewer bundles than sent.");
        }
        md.push('\n');
    }

    let brt = brt_decomposition(&set.brt);
    if !brt.is_empty() {
        let _ = writeln!(md, "## Bundle retention\n");
        let _ = writeln!(md, "| payload B | bundles | mean BRT µs | serialization µs | deserialization µs | other µs |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for r in &brt {
            let us = |v: Option<f64>| opt(v.map(|x| x / 1e3), 2);
            let _ = writeln!(
                md,
                "| {} | {} | {:.2} | {} | {} | {} |",
                r.payload_size,
                r.n,
                r.mean_brt_ns / 1e3,
                us(r.mean_ser_ns),
                us(r.mean_deser_ns),
                us(r.mean_other_ns)
            );
        }
        md.push('\n');
    }

    let cpu = cpu_summary(&set.resources);
    if !cpu.is_empty() {
        let _ = writeln!(md, "## CPU usage (% of one core)\n");
        let mut header = String::from("| metric |");
        let mut rule = String::from("|---|");
        for r in &cpu {
            let _ = write!(header, " {} |", r.role);
            rule.push_str("---|");
        }
        let _ = writeln!(md, "{header}\n{rule}");
        let rows: [(&str, Box<dyn Fn(&CpuSummaryRow) -> String>); 5] = [
            ("Mean", Box::new(|r| format!("{:.1}", r.mean))),
            ("Standard deviation", Box::new(|r| opt(r.stddev, 1))),
            ("25%", Box::new(|r| format!("{:.1}", r.q25))),
            ("50%", Box::new(|r| format!("{:.1}", r.q50))),
            ("75%", Box::new(|r| format!("{:.1}", r.q75))),
        ];
        for (label, f) in rows.iter() {
            let cells: Vec<String> = cpu.iter().map(|r| f(r)).collect();
            let _ = writeln!(md, "| {label} | {} |", cells.join(" | "));
        }
        let _ = writeln!(md, "\n| role | max memory MiB |\n|---|---|");
        for (role, samples) in &set.resources {
            if let Some(max) = samples.iter().map(|s| s.mem_bytes).max() {
                let _ = writeln!(md, "| {role} | {:.1} |", max as f64 / (1 << 20) as f64);
            }
        }
        md.push_str(
            "\nMemory figures include page cache where the backend charges it to the environment.\n",
        );
    }
    md
}

/// Writes the derived files into `dir` and returns their paths.
pub fn emit_results(dir: &Path, set: &ResultSet) -> Result<Vec<PathBuf>, ReportError> {
    if set.is_empty() {
        return Err(ReportError::NoRecords);
    }
    let mut written = Vec::new();
    if !set.rtt.is_empty() {
        let p = dir.join("rtt_ecdf.csv");
        write_ecdf(&p, &rtt_ecdf(&set.rtt)?)?;
        written.push(p);
    }
    if !set.goodput.is_empty() {
        let p = dir.join("goodput_summary.csv");
        crate::records::write_records(
            &p,
            &["payload_size", "mean_mbps", "ci99_low", "ci99_high", "n"],
            &goodput_summary(&set.goodput),
        )?;
        written.push(p);
    }
    if !set.brt.is_empty() {
        let p = dir.join("brt_decomposition.csv");
        crate::records::write_csv(&p, &brt_decomposition(&set.brt))?;
        written.push(p);
    }
    let cpu = cpu_summary(&set.resources);
    if !cpu.is_empty() {
        let p = dir.join("cpu_summary.csv");
        crate::records::write_csv(&p, &cpu)?;
        written.push(p);
    }
    let p = dir.join("report.md");
    std::fs::write(&p, markdown(set)).map_err(io_err(&p))?;
    written.push(p);
    Ok(written)
}
