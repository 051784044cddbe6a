//! Append-only metrics CSV.
//!
//! Floats are written in shortest round-trip form, so a resumed run can be
//! compared with an uninterrupted one by plain text equality (ignoring the
//! wall-clock column).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ftp_core::training::StepMetrics;

use crate::error::{io_err, write_atomic, FormatError, Result};

pub const HEADER: &str = "step,split,loss,loss_k0,lr,grad_norm,wallclock_s";

/// One parsed row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub loss_k0: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Start a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        write_atomic(path, format!("{HEADER}\n").as_bytes())?;
        Self::open_append(path)
    }

    /// Continue a log after resuming at `step`: rows beyond `step` (written
    /// after the checkpoint was taken) are dropped.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let rows = read_lines(path)?;
        let mut text = format!("{HEADER}\n");
        for (line, row) in rows {
            if row.step <= step {
                text.push_str(&line);
                text.push('\n');
            }
        }
        write_atomic(path, text.as_bytes())?;
        Self::open_append(path)
    }

    fn open_append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, m: &StepMetrics, wallclock_s: f64) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{},{:.3}",
            m.step,
            m.split.name(),
            m.loss,
            m.loss_k0,
            m.lr,
            m.grad_norm,
            wallclock_s
        )
        .and_then(|_| self.file.flush())
        .map_err(io_err(&self.path))
    }
}

fn parse_row(line: &str, n: usize) -> Result<Row> {
    let bad = |msg: String| FormatError::Line {
        what: "metrics",
        line: n,
        msg,
    };
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 7 {
        return Err(bad(format!("expected 7 fields, found {}", f.len())));
    }
    let num = |i: usize| {
        f[i].parse::<f64>()
            .map_err(|_| bad(format!("bad number {:?}", f[i])))
    };
    Ok(Row {
        step: f[0]
            .parse()
            .map_err(|_| bad(format!("bad step {:?}", f[0])))?,
        split: f[1].to_string(),
        loss: num(2)?,
        loss_k0: num(3)?,
        lr: num(4)?,
        grad_norm: num(5)?,
        wallclock_s: num(6)?,
    })
}

fn read_lines(path: &Path) -> Result<Vec<(String, Row)>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            if line != HEADER {
                return Err(FormatError::Line {
                    what: "metrics",
                    line: 1,
                    msg: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let row = parse_row(&line, i + 1)?;
        out.push((line, row));
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<Row>> {
    Ok(read_lines(path)?.into_iter().map(|(_, r)| r).collect())
}
