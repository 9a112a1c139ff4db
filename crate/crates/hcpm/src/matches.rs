//! Match lists as CSV: `x_A,y_A,x_B,y_B,confidence`, six decimals.

use std::fmt::Write as _;

use hcpm_core::matching::FineMatch;

use crate::error::{IoError, Result};

pub const HEADER: &str = "x_A,y_A,x_B,y_B,confidence";

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRow {
    pub point_a: [f64; 2],
    pub point_b: [f64; 2],
    pub confidence: f64,
}

impl From<&FineMatch> for MatchRow {
    fn from(m: &FineMatch) -> Self {
        Self {
            point_a: m.point_a,
            point_b: m.point_b,
            confidence: m.confidence,
        }
    }
}

pub fn format(rows: &[MatchRow]) -> String {
    let mut out = String::with_capacity(HEADER.len() + 1 + rows.len() * 48);
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.point_a[0], r.point_a[1], r.point_b[0], r.point_b[1], r.confidence
        );
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<MatchRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(IoError::Csv(format!("first line must be {HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v = l
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| IoError::Csv(format!("row {}: {e}", i + 1)))?;
            match v.as_slice() {
                &[xa, ya, xb, yb, c] => Ok(MatchRow {
                    point_a: [xa, ya],
                    point_b: [xb, yb],
                    confidence: c,
                }),
                _ => Err(IoError::Csv(format!("row {} has {} fields", i + 1, v.len()))),
            }
        })
        .collect()
}
