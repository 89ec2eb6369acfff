//! Report output: pretty JSON next to an aligned plain-text table.

use std::path::{Path, PathBuf};

use serde::Serialize;
use speech_refine::metrics::MeanStd;

use crate::BenchError;

/// Renders rows as aligned columns. The first column is left-aligned and
/// the rest right-aligned, separated by two spaces.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let n_cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate().take(n_cols) {
            let pad = widths[i] - cell.chars().count();
            if i > 0 {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            } else {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            }
        }
        out.trim_end().to_string()
    };
    let mut text = line(headers);
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * n_cols.saturating_sub(1)));
    text.push('\n');
    for row in rows {
        text.push_str(&line(row));
        text.push('\n');
    }
    text
}

pub fn fmt_mean_std(v: Option<&MeanStd>) -> String {
    v.map_or_else(|| "-".into(), |m| m.to_string())
}

pub fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.decimals$}"))
}

/// Writes `{stem}.json` and `{stem}.txt` into `dir`, creating it if needed.
pub fn write_report<T: Serialize>(dir: &Path, stem: &str, report: &T, text: &str) -> Result<(PathBuf, PathBuf), BenchError> {
    std::fs::create_dir_all(dir).map_err(BenchError::io(dir))?;
    let json_path = dir.join(format!("{stem}.json"));
    let txt_path = dir.join(format!("{stem}.txt"));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(BenchError::io(&json_path))?;
    std::fs::write(&txt_path, text).map_err(BenchError::io(&txt_path))?;
    Ok((json_path, txt_path))
}

/// 64-bit FNV-1a, used to derive per-entry seeds from sample ids.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for one entry under one run seed; independent of entry order.
pub(crate) fn entry_seed(run_seed: u64, sample_id: &str) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ fnv1a(sample_id.as_bytes())
}
