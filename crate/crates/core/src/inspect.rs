//! Diagnostics over an evaluation report: similarity histograms of
//! matched/unmatched top-1 pairs, and the per-query margin between the true
//! match and the hardest negative.

use crate::error::{Error, Result};
use crate::retrieval::RetrievalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub matched_count: usize,
    pub unmatched_count: usize,
}

/// Bin the top-1 similarity of every query with ground truth into `bins`
/// equal-width buckets over [-1, 1], split by whether the top-1 was correct.
pub fn similarity_histogram(report: &RetrievalReport, bins: usize) -> Result<Vec<HistogramRow>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if report.per_query.is_empty() {
        return Err(Error::invalid("report has no per-query data"));
    }
    let width = 2.0 / bins as f64;
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|b| HistogramRow {
            bin_lo: -1.0 + b as f64 * width,
            bin_hi: -1.0 + (b + 1) as f64 * width,
            matched_count: 0,
            unmatched_count: 0,
        })
        .collect();
    for q in &report.per_query {
        let (Some(matched), Some((_, top_sim))) = (q.matched, q.top.first()) else {
            continue;
        };
        let clamped = top_sim.clamp(-1.0, 1.0);
        let mut b = ((clamped + 1.0) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        if matched {
            rows[b].matched_count += 1;
        } else {
            rows[b].unmatched_count += 1;
        }
    }
    Ok(rows)
}

pub fn write_histogram_csv<W: std::io::Write>(rows: &[HistogramRow], w: &mut W) -> Result<()> {
    writeln!(w, "bin_lo,bin_hi,matched_count,unmatched_count")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.bin_lo, r.bin_hi, r.matched_count, r.unmatched_count
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSimRow {
    pub query_id: String,
    pub delta_sim: f64,
}

/// Per-query margin `sim_true - sim_neg` between the best relevant
/// similarity and the hardest negative. Queries without ground truth are
/// skipped.
pub fn delta_sims(report: &RetrievalReport) -> Result<Vec<DeltaSimRow>> {
    if report.per_query.is_empty() {
        return Err(Error::invalid("report has no per-query data"));
    }
    let rows: Vec<DeltaSimRow> = report
        .per_query
        .iter()
        .filter_map(|q| match (q.sim_true, q.sim_neg) {
            (Some(t), Some(n)) => Some(DeltaSimRow {
                query_id: q.id.clone(),
                delta_sim: t - n,
            }),
            _ => None,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("report carries no similarity margins"));
    }
    Ok(rows)
}

pub fn write_delta_csv<W: std::io::Write>(rows: &[DeltaSimRow], w: &mut W) -> Result<()> {
    writeln!(w, "query_id,delta_sim")?;
    for r in rows {
        writeln!(w, "{},{}", r.query_id, r.delta_sim)?;
    }
    Ok(())
}

/// Median of a non-empty slice (average of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}
