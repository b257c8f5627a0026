//! Statistics over request records and their text, CSV and JSON forms.
//!
//! Quantiles use linear interpolation between order statistics at position
//! `h = (n - 1) p` (the common "type 7" estimator).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioName;
use crate::workload::RequestRecord;

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::input("statistic of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    Ok(quantile_sorted(&sorted(values)?, p))
}

pub fn median(values: &[f64]) -> Result<f64> {
    let v = sorted(values)?;
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn iqr(values: &[f64]) -> Result<f64> {
    let v = sorted(values)?;
    Ok(quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25))
}

/// Successful completions per wall-clock second, indexed from 0.
pub fn throughput_series(records: &[RequestRecord], duration_ms: f64) -> Vec<(u64, u64)> {
    let done: Vec<u64> = records
        .iter()
        .filter(|r| r.success)
        .map(|r| (r.completion_ms() / 1000.0).floor().max(0.0) as u64)
        .collect();
    if done.is_empty() {
        return Vec::new();
    }
    let horizon = (duration_ms / 1000.0).ceil() as u64;
    let len = done.iter().max().map_or(0, |m| m + 1).max(horizon);
    let mut counts = vec![0u64; len as usize];
    for s in done {
        counts[s as usize] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (i as u64, c)).collect()
}

/// Mean successful responses per second over the middle 60 % of the run.
pub fn steady_state_rps(series: &[(u64, u64)], duration_ms: f64) -> f64 {
    let secs = (duration_ms / 1000.0).ceil() as usize;
    if secs == 0 || series.is_empty() {
        return 0.0;
    }
    let lo = (secs as f64 * 0.2).floor() as usize;
    let hi = ((secs as f64 * 0.8).ceil() as usize).max(lo + 1);
    let window: Vec<u64> = (lo..hi)
        .map(|s| series.get(s).map_or(0, |&(_, c)| c))
        .collect();
    window.iter().sum::<u64>() as f64 / window.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub count: u64,
    pub success_count: u64,
    pub throughput_series: Vec<(u64, u64)>,
}

impl SummaryStats {
    /// Median and IQR of successful requests; both are 0 when none succeeded.
    pub fn from_records(records: &[RequestRecord], duration_ms: Option<f64>) -> SummaryStats {
        let ok: Vec<f64> = records.iter().filter(|r| r.success).map(|r| r.elapsed_ms).collect();
        let (median_ms, iqr_ms) = if ok.is_empty() {
            (0.0, 0.0)
        } else {
            (median(&ok).unwrap_or(0.0), iqr(&ok).unwrap_or(0.0))
        };
        let span = duration_ms.unwrap_or_else(|| {
            records
                .iter()
                .map(RequestRecord::completion_ms)
                .fold(0.0, f64::max)
        });
        SummaryStats {
            median_ms,
            iqr_ms,
            count: records.len() as u64,
            success_count: ok.len() as u64,
            throughput_series: throughput_series(records, span),
        }
    }
}

/// One line of the newline-delimited summary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub test: String,
    pub scenario: String,
    pub profile: String,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub count: u64,
    pub success_count: u64,
    pub steady_rps: f64,
}

/// Summary of `records` pooled across repetitions. Steady throughput is
/// averaged per repetition when `repetitions > 1`.
pub fn summarize(
    test: &str,
    scenario: &str,
    profile: &str,
    records: &[RequestRecord],
    duration_ms: Option<f64>,
    repetitions: u32,
) -> SummaryLine {
    let stats = SummaryStats::from_records(records, duration_ms);
    let span = duration_ms.unwrap_or_else(|| {
        records.iter().map(RequestRecord::completion_ms).fold(0.0, f64::max)
    });
    let steady_rps = steady_state_rps(&stats.throughput_series, span) / f64::from(repetitions.max(1));
    SummaryLine {
        test: test.to_string(),
        scenario: scenario.to_string(),
        profile: profile.to_string(),
        median_ms: stats.median_ms,
        iqr_ms: stats.iqr_ms,
        count: stats.count,
        success_count: stats.success_count,
        steady_rps,
    }
}

/// `<median> - <iqr>` with one decimal, ties rounded to even.
pub fn format_cell(median_ms: f64, iqr_ms: f64) -> String {
    format!("{median_ms:.1} - {iqr_ms:.1}")
}

/// One row of a results table: a test variant on one profile, with a cell
/// per scenario in [`ScenarioName::ALL`] order. `None` cells render `n/a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub test: String,
    pub profile: String,
    pub cells: [Option<(f64, f64)>; 5],
}

pub fn render_table(rows: &[TableRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::input("table has no rows"));
    }
    let mut grid: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut header = vec!["test".to_string(), "profile".to_string()];
    header.extend(ScenarioName::ALL.iter().map(|s| s.to_string()));
    grid.push(header);
    for row in rows {
        let mut line = vec![row.test.clone(), row.profile.clone()];
        line.extend(row.cells.iter().map(|c| match c {
            Some((m, i)) => format_cell(*m, *i),
            None => "n/a".to_string(),
        }));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &grid {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
    }
    Ok(out)
}

/// Reads back the `(median, iqr)` cells of a table made by [`render_table`].
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(" | ").map(str::trim).collect();
        if parts.len() != 7 {
            return Err(Error::input(format!("malformed table line `{line}`")));
        }
        let mut cells = [None; 5];
        for (slot, cell) in cells.iter_mut().zip(&parts[2..]) {
            if *cell == "n/a" {
                continue;
            }
            let (m, i) = cell
                .split_once(" - ")
                .ok_or_else(|| Error::input(format!("malformed cell `{cell}`")))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::input(format!("bad number `{s}`")));
            *slot = Some((parse(m)?, parse(i)?));
        }
        rows.push(TableRow {
            test: parts[0].to_string(),
            profile: parts[1].to_string(),
            cells,
        });
    }
    Ok(rows)
}

/// Writes records as CSV sorted by `(thread, seq)`.
pub fn export_records(records: &[RequestRecord], path: &Path) -> Result<()> {
    let mut sorted: Vec<&RequestRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.thread, r.seq));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if sorted.is_empty() {
        w.write_record([
            "test",
            "scenario",
            "profile",
            "thread",
            "seq",
            "start_ms",
            "elapsed_ms",
            "success",
            "chain_len",
            "chain_mode",
        ])
        .map_err(to_io)?;
    }
    for r in sorted {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RequestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, std::io::Error::other(e))))
        .collect()
}

/// Writes summaries as newline-delimited JSON objects.
pub fn write_summaries(lines: &[SummaryLine], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let json = serde_json::to_string(line).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writeln!(w, "{json}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
