//! EM-style pseudo-labeling: the E-step assigns each query its most similar
//! reference (masked below a similarity threshold), and the M-step scores the
//! assignment with an InfoNCE objective whose gradients are derived
//! analytically with a stabilized log-sum-exp.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::featstore::FeatureSet;
use crate::math;

/// Per-query hard assignment produced by the E-step. Every query records its
/// argmax reference and similarity; `valid` marks rows above the threshold.
/// Valid rows encode the one-hot rows of the sparse label matrix, invalid
/// rows are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    num_refs: usize,
    best: Vec<u32>,
    sims: Vec<f64>,
    valid: Vec<bool>,
}

impl PseudoLabels {
    pub fn num_queries(&self) -> usize {
        self.best.len()
    }

    pub fn num_refs(&self) -> usize {
        self.num_refs
    }

    /// The labeled reference for query `i`, when valid.
    pub fn positive(&self, i: usize) -> Option<usize> {
        self.valid[i].then_some(self.best[i] as usize)
    }

    /// Argmax reference regardless of validity (used for diagnostics).
    pub fn best(&self, i: usize) -> usize {
        self.best[i] as usize
    }

    pub fn similarity(&self, i: usize) -> f64 {
        self.sims[i]
    }

    pub fn valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// One-hot label rows (query -> references).
    pub fn rows(&self) -> LabelRows {
        LabelRows {
            num_cols: self.num_refs,
            rows: self
                .best
                .iter()
                .zip(&self.valid)
                .map(|(&b, &v)| if v { vec![b] } else { Vec::new() })
                .collect(),
        }
    }

    /// Transposed label rows (reference -> queries that chose it). Rows may
    /// hold zero or several positives.
    pub fn transposed_rows(&self) -> LabelRows {
        let mut rows = vec![Vec::new(); self.num_refs];
        for (i, (&b, &v)) in self.best.iter().zip(&self.valid).enumerate() {
            if v {
                rows[b as usize].push(i as u32);
            }
        }
        LabelRows {
            num_cols: self.num_queries(),
            rows,
        }
    }
}

/// Sparse binary label matrix in row form: `rows[i]` lists the positive
/// column indices of row i.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRows {
    num_cols: usize,
    rows: Vec<Vec<u32>>,
}

impl LabelRows {
    pub fn new(num_cols: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for &j in row {
                if j as usize >= num_cols {
                    return Err(Error::invalid(format!(
                        "label row {i} references column {j}, only {num_cols} exist"
                    )));
                }
                if !seen.insert(j) {
                    return Err(Error::invalid(format!("label row {i} repeats column {j}")));
                }
            }
        }
        Ok(Self { num_cols, rows })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn num_valid_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_empty()).count()
    }
}

/// E-step: argmax assignment with threshold masking. Ties break to the
/// lowest reference index; `valid` requires similarity strictly above the
/// threshold.
pub fn pseudo_label(
    queries: &Array2<f64>,
    refs: &Array2<f64>,
    threshold: f64,
) -> Result<PseudoLabels> {
    if refs.nrows() == 0 {
        return Err(Error::NoReferences);
    }
    if queries.ncols() != refs.ncols() {
        return Err(Error::invalid(format!(
            "pseudo-label dim mismatch: {} vs {}",
            queries.ncols(),
            refs.ncols()
        )));
    }
    let q = queries.as_slice().expect("row-major queries");
    let d = queries.ncols();
    let picks: Vec<(u32, f64)> = math::map_indexed(queries.nrows(), |i| {
        let qi = &q[i * d..(i + 1) * d];
        let mut best = 0u32;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..refs.nrows() {
            let rj = refs.row(j);
            let s = math::dot(qi, rj.to_slice().expect("contiguous row"));
            if s > best_sim {
                best_sim = s;
                best = j as u32;
            }
        }
        (best, best_sim)
    });
    let mut best = Vec::with_capacity(picks.len());
    let mut sims = Vec::with_capacity(picks.len());
    let mut valid = Vec::with_capacity(picks.len());
    for (b, s) in picks {
        best.push(b);
        sims.push(s);
        valid.push(s > threshold);
    }
    Ok(PseudoLabels {
        num_refs: refs.nrows(),
        best,
        sims,
        valid,
    })
}

/// E-step over feature sets; both must be normalized and share a dimension.
pub fn pseudo_label_sets(
    queries: &FeatureSet,
    refs: &FeatureSet,
    threshold: f64,
) -> Result<PseudoLabels> {
    if !queries.is_normalized() || !refs.is_normalized() {
        return Err(Error::invalid("pseudo-labeling requires normalized sets"));
    }
    pseudo_label(&queries.to_matrix(), &refs.to_matrix(), threshold)
}

/// InfoNCE value plus analytic gradients w.r.t. both embedding matrices.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_queries: Array2<f64>,
    pub grad_refs: Array2<f64>,
    /// Rows with at least one positive; the loss averages over these.
    pub valid_rows: usize,
    /// Set when every row was masked: loss and gradients are zero.
    pub all_masked: bool,
}

/// InfoNCE against one-hot pseudo-labels. See [`info_nce_loss_rows`] for the
/// general multi-positive form used by the transposed direction.
pub fn info_nce_loss(
    queries: &Array2<f64>,
    refs: &Array2<f64>,
    labels: &PseudoLabels,
    tau: f64,
) -> Result<LossValue> {
    if labels.num_queries() != queries.nrows() || labels.num_refs() != refs.nrows() {
        return Err(Error::invalid("label shape does not match feature matrices"));
    }
    info_nce_loss_rows(queries, refs, &labels.rows(), tau)
}

pub fn info_nce_loss_rows(
    queries: &Array2<f64>,
    refs: &Array2<f64>,
    labels: &LabelRows,
    tau: f64,
) -> Result<LossValue> {
    let sims = math::similarity_matrix(queries, refs);
    info_nce_with_sims(queries, refs, &sims, labels, tau)
}

/// Core InfoNCE evaluation on a precomputed similarity matrix.
///
/// For each row i with positive set P: `l_i = lse_j(e_ij) - lse_{j in P}(e_ij)`
/// with `e_ij = sim_ij / tau`; the loss averages `l_i` over rows with
/// non-empty P. The gradient w.r.t. `sim_ij` is `(p_ij - q_ij) / (tau M')`
/// where p is the full softmax and q the softmax restricted to P.
pub fn info_nce_with_sims(
    queries: &Array2<f64>,
    refs: &Array2<f64>,
    sims: &Array2<f64>,
    labels: &LabelRows,
    tau: f64,
) -> Result<LossValue> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let (m, n) = sims.dim();
    if labels.num_rows() != m || labels.num_cols() != n {
        return Err(Error::invalid("label shape does not match similarity matrix"));
    }
    if queries.nrows() != m || refs.nrows() != n || queries.ncols() != refs.ncols() {
        return Err(Error::invalid("feature shapes do not match similarity matrix"));
    }
    let valid_rows = labels.num_valid_rows();
    if valid_rows == 0 {
        return Ok(LossValue {
            value: 0.0,
            grad_queries: Array2::zeros(queries.dim()),
            grad_refs: Array2::zeros(refs.dim()),
            valid_rows: 0,
            all_masked: true,
        });
    }
    let scale = 1.0 / (tau * valid_rows as f64);

    // per-row loss terms and softmax-difference coefficients; masked rows
    // stay zero
    let mut coeff = Array2::zeros((m, n));
    let mut row_losses = vec![0.0f64; m];
    {
        let sims_ref = &sims;
        let labels_ref = &labels;
        let coeff_data = coeff.as_slice_mut().expect("row-major coeff");
        let results: Vec<f64> = {
            let rows: Vec<(f64, Vec<f64>)> = math::map_indexed(m, move |i| {
                let positives = labels_ref.row(i);
                if positives.is_empty() {
                    return (0.0, Vec::new());
                }
                let row = sims_ref.row(i);
                let row = row.to_slice().expect("contiguous row");
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s / tau));
                let mut exps = vec![0.0f64; n];
                let mut den = 0.0f64;
                for (j, &s) in row.iter().enumerate() {
                    let e = (s / tau - mx).exp();
                    exps[j] = e;
                    den += e;
                }
                let mut num = 0.0f64;
                for &j in positives {
                    num += exps[j as usize];
                }
                let loss = den.ln() - num.ln();
                let mut g = vec![0.0f64; n];
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = exps[j] / den;
                }
                for &j in positives {
                    g[j as usize] -= exps[j as usize] / num;
                }
                (loss, g)
            });
            let mut losses = vec![0.0f64; m];
            for (i, (l, g)) in rows.into_iter().enumerate() {
                losses[i] = l;
                if !g.is_empty() {
                    coeff_data[i * n..(i + 1) * n].copy_from_slice(&g);
                }
            }
            losses
        };
        row_losses.copy_from_slice(&results);
    }

    // fixed-order reduction over rows
    let total: f64 = row_losses.iter().sum();
    let value = total / valid_rows as f64;

    coeff *= scale;
    let grad_queries = coeff.dot(refs);
    let grad_refs = coeff.t().dot(queries);
    Ok(LossValue {
        value,
        grad_queries,
        grad_refs,
        valid_rows,
        all_masked: false,
    })
}

/// Dump per-query assignments as `query_id,ref_id,similarity,valid` rows.
pub fn export_pseudo_labels_csv<W: Write>(
    w: &mut W,
    labels: &PseudoLabels,
    query_ids: &[String],
    ref_ids: &[String],
) -> Result<()> {
    if query_ids.len() != labels.num_queries() || ref_ids.len() != labels.num_refs() {
        return Err(Error::invalid("id lists do not match label shape"));
    }
    writeln!(w, "query_id,ref_id,similarity,valid")?;
    for i in 0..labels.num_queries() {
        writeln!(
            w,
            "{},{},{},{}",
            query_ids[i],
            ref_ids[labels.best(i)],
            labels.similarity(i),
            labels.valid(i)
        )?;
    }
    Ok(())
}
