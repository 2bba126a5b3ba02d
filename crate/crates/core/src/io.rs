//! CSV row types and streaming readers/writers.
//!
//! | file | header |
//! |------|--------|
//! | measurements | `t_s,current_a,voltage_v` (optional `temperature_c`) |
//! | truth sidecar | `t_s,thn,thp,soc` |
//! | estimates | `t_s,current_a,voltage_v,vhat_v,soc,thp,thn,qp_ah,qn_ah,thp0,thp100,thn0,thn100` |
//! | window trace | `t_s,thp0,thp100,thn0,thn100,flag` |
//! | health report | `t_s,lam_p_pct,lam_n_pct,lli_pct,q_cell_ah,soh` |
//! | capacity diagnostics | `t_s,electrode,dtheta,dq_ah,var_x,var_y,accepted,q_hat_ah` |
//! | HPPC input | `t_s,current_a,potential_v,sol` |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample of cell current and terminal voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclingRecord {
    pub t_s: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    #[serde(default, skip_serializing)]
    pub temperature_c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t_s: f64,
    pub thn: f64,
    pub thp: f64,
    pub soc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t_s: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    pub vhat_v: f64,
    pub soc: f64,
    pub thp: f64,
    pub thn: f64,
    pub qp_ah: f64,
    pub qn_ah: f64,
    pub thp0: f64,
    pub thp100: f64,
    pub thn0: f64,
    pub thn100: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub t_s: f64,
    pub thp0: f64,
    pub thp100: f64,
    pub thn0: f64,
    pub thn100: f64,
    pub flag: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t_s: f64,
    pub lam_p_pct: f64,
    pub lam_n_pct: f64,
    pub lli_pct: f64,
    pub q_cell_ah: f64,
    pub soh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub t_s: f64,
    pub electrode: String,
    pub dtheta: f64,
    pub dq_ah: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub accepted: u8,
    pub q_hat_ah: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HppcRow {
    pub t_s: f64,
    pub current_a: f64,
    pub potential_v: f64,
    pub sol: f64,
}

/// Typed CSV writer that always emits a header, even with no rows.
pub struct CsvSink<W: Write> {
    inner: csv::Writer<W>,
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let f = File::create(path.as_ref())?;
        Self::new(BufWriter::new(f), header)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(w: W, header: &[&str]) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(header)?;
        Ok(Self { inner })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }
}

pub const MEASUREMENT_HEADER: &[&str] = &["t_s", "current_a", "voltage_v"];
pub const TRUTH_HEADER: &[&str] = &["t_s", "thn", "thp", "soc"];
pub const ESTIMATE_HEADER: &[&str] = &[
    "t_s",
    "current_a",
    "voltage_v",
    "vhat_v",
    "soc",
    "thp",
    "thn",
    "qp_ah",
    "qn_ah",
    "thp0",
    "thp100",
    "thn0",
    "thn100",
];
pub const WINDOW_HEADER: &[&str] = &["t_s", "thp0", "thp100", "thn0", "thn100", "flag"];
pub const REPORT_HEADER: &[&str] = &[
    "t_s",
    "lam_p_pct",
    "lam_n_pct",
    "lli_pct",
    "q_cell_ah",
    "soh",
];
pub const PAIR_HEADER: &[&str] = &[
    "t_s",
    "electrode",
    "dtheta",
    "dq_ah",
    "var_x",
    "var_y",
    "accepted",
    "q_hat_ah",
];
pub const HPPC_HEADER: &[&str] = &["t_s", "current_a", "potential_v", "sol"];

/// Streaming typed CSV reader. Yields `(row_number, row)`; row numbers are
/// 1-based data rows (the header is row 0).
pub struct CsvSource<R: Read, T> {
    rows: csv::DeserializeRecordsIntoIter<R, T>,
    row: usize,
}

impl<T: DeserializeOwned> CsvSource<BufReader<File>, T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path.as_ref()).map_err(|e| Error::Data {
            row: 0,
            msg: format!("cannot open {}: {e}", path.as_ref().display()),
        })?;
        Self::new(BufReader::new(f))
    }
}

impl<R: Read, T: DeserializeOwned> CsvSource<R, T> {
    pub fn new(r: R) -> Result<Self> {
        let rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        Ok(Self {
            rows: rdr.into_deserialize(),
            row: 0,
        })
    }
}

impl<R: Read, T: DeserializeOwned> Iterator for CsvSource<R, T> {
    type Item = Result<(usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.rows.next()?;
        self.row += 1;
        let row = self.row;
        Some(item.map(|v| (row, v)).map_err(|e| Error::Data {
            row,
            msg: e.to_string(),
        }))
    }
}

/// Reads a whole CSV into memory. Meant for small files (HPPC tests, reports).
pub fn read_all<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    CsvSource::<_, T>::open(path)?
        .map(|r| r.map(|(_, v)| v))
        .collect()
}
