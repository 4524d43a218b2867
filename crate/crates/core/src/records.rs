//! Raw measurement records written by the test modules and the sampler,
//! plus their CSV encodings.

use std::fs::File;
use std::io;
use std::path::Path;

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tolerance for the BRT decomposition inequality.
pub const DEFAULT_CLOCK_SLACK_NS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RttRecord {
    pub seq: u64,
    pub payload_size: u64,
    pub rtt_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodputRecord {
    pub payload_size: u64,
    pub bundle_count: u64,
    pub delivered: u64,
    pub bytes_delivered: u64,
    pub t_first_ns: u64,
    pub t_last_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetentionSource {
    Boundary,
    ImplementationLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionRecord {
    pub bundle_id: String,
    pub payload_size: u64,
    pub brt_ns: u64,
    pub ser_ns: Option<u64>,
    pub deser_ns: Option<u64>,
    pub source: RetentionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub t_ns: u64,
    pub cpu_pct: f64,
    pub mem_bytes: u64,
    pub mem_bytes_nocache: Option<u64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GoodputError {
    #[error("goodput undefined: need at least 2 deliveries, got {0}")]
    TooFewDeliveries(u64),
    #[error("goodput undefined: empty delivery window")]
    EmptyWindow,
}

impl GoodputRecord {
    pub fn is_lossy(&self) -> bool {
        self.delivered < self.bundle_count
    }

    /// Checks the record invariants; returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.bytes_delivered != self.payload_size * self.delivered {
            return Err(format!(
                "bytes_delivered {} != payload_size {} x delivered {}",
                self.bytes_delivered, self.payload_size, self.delivered
            ));
        }
        if self.delivered > self.bundle_count {
            return Err(format!(
                "delivered {} exceeds bundle_count {}",
                self.delivered, self.bundle_count
            ));
        }
        if self.delivered >= 2 && self.t_last_ns <= self.t_first_ns {
            return Err("t_last_ns must be after t_first_ns".to_string());
        }
        Ok(())
    }
}

/// Goodput in Mbit/s (10^6 bits) over the receiver-side window between the
/// first and the last delivery. Only application payload bytes count.
pub fn compute_goodput<T: Float>(record: &GoodputRecord) -> Result<T, GoodputError> {
    if record.delivered < 2 {
        return Err(GoodputError::TooFewDeliveries(record.delivered));
    }
    if record.t_last_ns <= record.t_first_ns {
        return Err(GoodputError::EmptyWindow);
    }
    let cast = |v: f64| T::from(v).expect("representable");
    let bits = cast(record.bytes_delivered as f64) * cast(8.0);
    let seconds = cast((record.t_last_ns - record.t_first_ns) as f64) / cast(1e9);
    Ok(bits / cast(1e6) / seconds)
}

impl RttRecord {
    pub fn check(&self) -> Result<(), String> {
        if self.rtt_ns == 0 {
            return Err(format!("bundle {}: rtt_ns must be positive", self.seq));
        }
        Ok(())
    }
}

impl RetentionRecord {
    /// `ser + deser <= brt + slack`; trivially true when either part is missing.
    pub fn decomposition_holds(&self, slack_ns: u64) -> bool {
        match (self.ser_ns, self.deser_ns) {
            (Some(s), Some(d)) => s + d <= self.brt_ns + slack_ns,
            _ => true,
        }
    }

    /// `brt - ser - deser`, signed since clock slack may push it below zero.
    pub fn other_ns(&self) -> Option<i64> {
        Some(self.brt_ns as i64 - self.ser_ns? as i64 - self.deser_ns? as i64)
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CsvError> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|source| CsvError::Io {
        path: p.clone(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|source| CsvError::Csv {
            path: p.clone(),
            source,
        })?;
    }
    w.flush().map_err(|source| CsvError::Io { path: p, source })
}

/// Writes only a header line; `csv::Writer` emits nothing for zero rows.
pub fn write_csv_header(path: &Path, header: &[&str]) -> Result<(), CsvError> {
    std::fs::write(path, format!("{}\n", header.join(","))).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, CsvError> {
    let p = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|source| CsvError::Csv {
        path: p.clone(),
        source,
    })?;
    r.deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|source| CsvError::Csv { path: p, source })
}

pub const RTT_HEADER: [&str; 3] = ["seq", "payload_size", "rtt_ns"];
pub const GOODPUT_HEADER: [&str; 6] = [
    "payload_size",
    "bundle_count",
    "delivered",
    "bytes_delivered",
    "t_first_ns",
    "t_last_ns",
];
pub const BRT_HEADER: [&str; 6] = [
    "bundle_id",
    "payload_size",
    "brt_ns",
    "ser_ns",
    "deser_ns",
    "source",
];
pub const RESOURCE_HEADER: [&str; 4] = ["t_ns", "cpu_pct", "mem_bytes", "mem_bytes_nocache"];

/// Writes `rows` with an explicit header even when `rows` is empty.
pub fn write_records<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), CsvError> {
    if rows.is_empty() {
        write_csv_header(path, header)
    } else {
        write_csv(path, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(bundles: u64, size: u64, window_ns: u64) -> GoodputRecord {
        GoodputRecord {
            payload_size: size,
            bundle_count: bundles,
            delivered: bundles,
            bytes_delivered: bundles * size,
            t_first_ns: 5,
            t_last_ns: 5 + window_ns,
        }
    }

    #[test]
    fn goodput_arithmetic() {
        let r = record(1000, 100_000, 2_000_000_000);
        assert_relative_eq!(compute_goodput::<f64>(&r).unwrap(), 400.0);
        assert_relative_eq!(compute_goodput::<f32>(&r).unwrap(), 400.0);
    }

    #[test]
    fn goodput_unit_consistent() {
        let a = record(1000, 1_000, 1_000_000);
        let mut b = record(2000, 1_000, 2_000_000);
        b.bundle_count = 2000;
        assert_relative_eq!(
            compute_goodput::<f64>(&a).unwrap(),
            compute_goodput::<f64>(&b).unwrap()
        );
    }

    #[test]
    fn goodput_undefined_cases() {
        let mut r = record(1, 100, 0);
        assert_eq!(
            compute_goodput::<f64>(&r),
            Err(GoodputError::TooFewDeliveries(1))
        );
        r.delivered = 0;
        r.bytes_delivered = 0;
        assert_eq!(
            compute_goodput::<f64>(&r),
            Err(GoodputError::TooFewDeliveries(0))
        );
        let r = GoodputRecord {
            t_last_ns: 5,
            ..record(10, 100, 0)
        };
        assert_eq!(compute_goodput::<f64>(&r), Err(GoodputError::EmptyWindow));
    }

    #[test]
    fn goodput_invariants() {
        assert!(record(10, 100, 10).check().is_ok());
        let mut r = record(10, 100, 10);
        r.bytes_delivered += 1;
        assert!(r.check().is_err());
        let mut r = record(10, 100, 10);
        r.delivered = 9;
        r.bytes_delivered = 900;
        assert!(r.check().is_ok());
        assert!(r.is_lossy());
    }

    #[test]
    fn decomposition_with_slack() {
        let mut r = RetentionRecord {
            bundle_id: "b".into(),
            payload_size: 10,
            brt_ns: 1_000,
            ser_ns: Some(600),
            deser_ns: Some(1_300),
            source: RetentionSource::ImplementationLog,
        };
        assert!(r.decomposition_holds(1_000));
        assert!(!r.decomposition_holds(0));
        assert_eq!(r.other_ns(), Some(-900));
        r.ser_ns = None;
        assert!(r.decomposition_holds(0));
        assert_eq!(r.other_ns(), None);
    }

    #[test]
    fn csv_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("brt.csv");
        let rows = vec![
            RetentionRecord {
                bundle_id: "dtn://s/a:0:1".into(),
                payload_size: 10,
                brt_ns: 50,
                ser_ns: Some(1),
                deser_ns: Some(2),
                source: RetentionSource::ImplementationLog,
            },
            RetentionRecord {
                bundle_id: "#2".into(),
                payload_size: 10,
                brt_ns: 60,
                ser_ns: None,
                deser_ns: None,
                source: RetentionSource::Boundary,
            },
        ];
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "bundle_id,payload_size,brt_ns,ser_ns,deser_ns,source\n\
             dtn://s/a:0:1,10,50,1,2,implementation-log\n\
             #2,10,60,,,boundary\n"
        );
        let back: Vec<RetentionRecord> = read_csv(&p).unwrap();
        assert_eq!(back, rows);

        let p = dir.path().join("rtt.csv");
        write_records::<RttRecord>(&p, &RTT_HEADER, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "seq,payload_size,rtt_ns\n");
        assert!(read_csv::<RttRecord>(&p).unwrap().is_empty());
    }

    #[test]
    fn resource_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resources_sender.csv");
        write_csv(
            &p,
            &[ResourceSample {
                t_ns: 1,
                cpu_pct: 12.5,
                mem_bytes: 4096,
                mem_bytes_nocache: None,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "t_ns,cpu_pct,mem_bytes,mem_bytes_nocache\n1,12.5,4096,\n"
        );
    }
}
