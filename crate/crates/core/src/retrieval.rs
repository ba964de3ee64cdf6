//! Exact dense retrieval: rank references per query by inner product,
//! score Recall@K and average precision against a (possibly one-to-many)
//! ground truth, and assign the top reference's geo-tag to each query.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{FeatureSet, GeoTag};
use crate::math;

/// Relevant reference indices per query. Rows may be empty (distractor-only
/// queries); such queries are excluded from mean AP with a warning count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: Vec<Vec<u32>>,
}

impl GroundTruth {
    pub fn new(relevant: Vec<Vec<u32>>, num_refs: usize) -> Result<Self> {
        for (q, row) in relevant.iter().enumerate() {
            for &r in row {
                if r as usize >= num_refs {
                    return Err(Error::invalid(format!(
                        "ground truth for query {q} references index {r}, only {num_refs} refs"
                    )));
                }
            }
        }
        Ok(Self { relevant })
    }

    /// Resolve `(query_id, ref_id)` pairs against the two sets. Unknown ids
    /// on either side are collected into one error.
    pub fn from_id_pairs(
        pairs: &[(String, String)],
        queries: &FeatureSet,
        refs: &FeatureSet,
    ) -> Result<Self> {
        let q_index: HashMap<&str, usize> = queries
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let r_index: HashMap<&str, usize> = refs
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut relevant = vec![Vec::new(); queries.len()];
        let mut missing = Vec::new();
        for (qid, rid) in pairs {
            match (q_index.get(qid.as_str()), r_index.get(rid.as_str())) {
                (Some(&q), Some(&r)) => relevant[q].push(r as u32),
                _ => {
                    if !q_index.contains_key(qid.as_str()) {
                        missing.push(qid.clone());
                    }
                    if !r_index.contains_key(rid.as_str()) {
                        missing.push(rid.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::UnknownGroundTruthIds(missing.join(", ")));
        }
        for row in &mut relevant {
            row.sort_unstable();
            row.dedup();
        }
        Ok(Self { relevant })
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn relevant(&self, q: usize) -> &[u32] {
        &self.relevant[q]
    }
}

/// Descending-similarity order of all references for one score row; ties
/// break to the lowest reference index.
pub fn order_scores(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("finite similarity scores")
            .then(a.cmp(&b))
    });
    order
}

/// Full per-query rankings. Both sets must be normalized and share a
/// dimension.
pub fn rank(queries: &FeatureSet, refs: &FeatureSet) -> Result<Vec<Vec<u32>>> {
    if refs.is_empty() {
        return Err(Error::NoReferences);
    }
    if queries.dim() != refs.dim() {
        return Err(Error::invalid(format!(
            "query dim {} != reference dim {}",
            queries.dim(),
            refs.dim()
        )));
    }
    if !queries.is_normalized() || !refs.is_normalized() {
        return Err(Error::invalid("ranking requires normalized sets"));
    }
    let zq = queries.to_matrix();
    let zr = refs.to_matrix();
    Ok(rank_matrices(&zq, &zr))
}

pub fn rank_matrices(zq: &Array2<f64>, zr: &Array2<f64>) -> Vec<Vec<u32>> {
    let q = zq.as_slice().expect("row-major queries");
    let d = zq.ncols();
    math::map_indexed(zq.nrows(), |i| {
        let qi = &q[i * d..(i + 1) * d];
        let scores: Vec<f64> = (0..zr.nrows())
            .map(|j| math::dot(qi, zr.row(j).to_slice().expect("contiguous row")))
            .collect();
        order_scores(&scores)
    })
}

/// Fraction of queries with at least one relevant reference in the top k.
/// Queries without any relevant reference count as misses.
pub fn recall_at_k(rankings: &[Vec<u32>], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.len() != gt.num_queries() {
        return Err(Error::invalid("rankings and ground truth disagree on query count"));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (order, q) in rankings.iter().zip(0..) {
        let rel: HashSet<u32> = gt.relevant(q).iter().copied().collect();
        if rel.is_empty() {
            continue;
        }
        if order.iter().take(k).any(|j| rel.contains(j)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Discrete average precision: the mean of precision@rank over the ranks of
/// the relevant items. `None` when the relevant set is empty.
pub fn average_precision(order: &[u32], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (pos, &j) in order.iter().enumerate() {
        if rel.contains(&j) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / rel.len() as f64)
}

/// Everything the evaluation pipeline reports for one query.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerQueryResult {
    pub id: String,
    /// Top-ranked references as (ref_id, similarity), highest first.
    pub top: Vec<(String, f64)>,
    /// Average precision; absent when the query has no relevant references.
    pub ap: Option<f64>,
    /// Whether the top-1 reference is relevant.
    pub matched: Option<bool>,
    /// Highest similarity among relevant references.
    pub sim_true: Option<f64>,
    /// Highest similarity among non-relevant references.
    pub sim_neg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalReport {
    /// Recall@K keyed by K.
    pub recall: BTreeMap<u32, f64>,
    pub mean_ap: f64,
    /// Queries excluded from mean AP for lack of ground truth.
    pub queries_without_gt: usize,
    pub per_query: Vec<PerQueryResult>,
}

impl RetrievalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "query_id,ap,matched,sim_true,sim_neg,top1_ref,top1_sim")?;
        for q in &self.per_query {
            let fmt_opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let matched = q.matched.map(|m| m.to_string()).unwrap_or_default();
            let (t_ref, t_sim) = q
                .top
                .first()
                .map(|(r, s)| (r.clone(), s.to_string()))
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                q.id,
                fmt_opt(&q.ap),
                matched,
                fmt_opt(&q.sim_true),
                fmt_opt(&q.sim_neg),
                t_ref,
                t_sim
            )?;
        }
        Ok(())
    }
}

/// Rank every query against the references and assemble the report.
/// `top_keep` bounds the per-query ranked list stored in the report (at
/// least 2 entries are kept so margin diagnostics stay possible).
pub fn evaluate(
    queries: &FeatureSet,
    refs: &FeatureSet,
    gt: &GroundTruth,
    ks: &[u32],
    top_keep: usize,
) -> Result<RetrievalReport> {
    if refs.is_empty() {
        return Err(Error::NoReferences);
    }
    if queries.dim() != refs.dim() {
        return Err(Error::invalid(format!(
            "query dim {} != reference dim {}",
            queries.dim(),
            refs.dim()
        )));
    }
    if !queries.is_normalized() || !refs.is_normalized() {
        return Err(Error::invalid("evaluation requires normalized sets"));
    }
    if gt.num_queries() != queries.len() {
        return Err(Error::invalid("ground truth does not cover the query set"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("recall cutoffs must be positive"));
    }
    let zq = queries.to_matrix();
    let zr = refs.to_matrix();
    let top_keep = top_keep.max(2).min(refs.len());

    struct QueryEval {
        result: PerQueryResult,
        hit_rank: Option<usize>,
    }

    let q_data = zq.as_slice().expect("row-major queries");
    let d = zq.ncols();
    let evals: Vec<QueryEval> = math::map_indexed(queries.len(), |i| {
        let qi = &q_data[i * d..(i + 1) * d];
        let scores: Vec<f64> = (0..zr.nrows())
            .map(|j| math::dot(qi, zr.row(j).to_slice().expect("contiguous row")))
            .collect();
        let order = order_scores(&scores);
        let relevant = gt.relevant(i);
        let rel: HashSet<u32> = relevant.iter().copied().collect();
        let ap = average_precision(&order, relevant);
        let matched = (!rel.is_empty()).then(|| rel.contains(&order[0]));
        let hit_rank = if rel.is_empty() {
            None
        } else {
            order.iter().position(|j| rel.contains(j))
        };
        let sim_true = relevant
            .iter()
            .map(|&j| scores[j as usize])
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        let sim_neg = order
            .iter()
            .filter(|j| !rel.contains(j))
            .map(|&j| scores[j as usize])
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        let top = order
            .iter()
            .take(top_keep)
            .map(|&j| (refs.id(j as usize).to_string(), scores[j as usize]))
            .collect();
        QueryEval {
            result: PerQueryResult {
                id: queries.id(i).to_string(),
                top,
                ap,
                matched,
                sim_true,
                sim_neg,
            },
            hit_rank,
        }
    });

    let mut recall = BTreeMap::new();
    for &k in ks {
        let hits = evals
            .iter()
            .filter(|e| e.hit_rank.is_some_and(|r| r < k as usize))
            .count();
        recall.insert(k, hits as f64 / queries.len().max(1) as f64);
    }
    let ap_values: Vec<f64> = evals.iter().filter_map(|e| e.result.ap).collect();
    let queries_without_gt = queries.len() - ap_values.len();
    if queries_without_gt > 0 {
        log::warn!("{queries_without_gt} queries have no ground truth; excluded from mean AP");
    }
    let mean_ap = if ap_values.is_empty() {
        0.0
    } else {
        ap_values.iter().sum::<f64>() / ap_values.len() as f64
    };
    Ok(RetrievalReport {
        recall,
        mean_ap,
        queries_without_gt,
        per_query: evals.into_iter().map(|e| e.result).collect(),
    })
}

/// One localization output row: the query inherits the geo-tag of its
/// top-ranked reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub query_id: String,
    pub ref_id: String,
    pub lat: f64,
    pub lon: f64,
    pub similarity: f64,
}

pub fn localize(
    queries: &FeatureSet,
    refs: &FeatureSet,
    geo: &[GeoTag],
) -> Result<Vec<Localization>> {
    if refs.is_empty() {
        return Err(Error::NoReferences);
    }
    if !queries.is_normalized() || !refs.is_normalized() {
        return Err(Error::invalid("localization requires normalized sets"));
    }
    if queries.dim() != refs.dim() {
        return Err(Error::invalid(format!(
            "query dim {} != reference dim {}",
            queries.dim(),
            refs.dim()
        )));
    }
    let by_id: HashMap<&str, &GeoTag> = geo.iter().map(|t| (t.id.as_str(), t)).collect();
    let zq = queries.to_matrix();
    let zr = refs.to_matrix();
    let q_data = zq.as_slice().expect("row-major queries");
    let d = zq.ncols();
    let picks: Vec<(u32, f64)> = math::map_indexed(queries.len(), |i| {
        let qi = &q_data[i * d..(i + 1) * d];
        let mut best = 0u32;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..zr.nrows() {
            let s = math::dot(qi, zr.row(j).to_slice().expect("contiguous row"));
            if s > best_sim {
                best_sim = s;
                best = j as u32;
            }
        }
        (best, best_sim)
    });
    let mut out = Vec::with_capacity(queries.len());
    for (i, (j, sim)) in picks.into_iter().enumerate() {
        let rid = refs.id(j as usize);
        let tag = by_id
            .get(rid)
            .ok_or_else(|| Error::MissingGeoTag(rid.to_string()))?;
        out.push(Localization {
            query_id: queries.id(i).to_string(),
            ref_id: rid.to_string(),
            lat: tag.lat,
            lon: tag.lon,
            similarity: sim,
        });
    }
    Ok(out)
}

pub fn write_localizations_csv<W: std::io::Write>(
    rows: &[Localization],
    w: &mut W,
) -> Result<()> {
    writeln!(w, "query_id,ref_id,lat,lon,similarity")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.query_id, r.ref_id, r.lat, r.lon, r.similarity
        )?;
    }
    Ok(())
}
