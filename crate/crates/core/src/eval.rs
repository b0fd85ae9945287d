//! MAP@k and interpolated precision-recall for text-to-video retrieval.

use std::collections::BTreeMap;
use std::io::Write;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::FfacrModel;
use crate::retrieval::build_index;

/// Relevance of one query's results in rank order, with the number of relevant items
/// in the whole corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRanking {
    pub relevance: Vec<bool>,
    pub total_relevant: usize,
}

impl QueryRanking {
    pub fn new(relevance: Vec<bool>, total_relevant: usize) -> Self {
        Self { relevance, total_relevant }
    }
}

/// `sum_{r<=k} precision(r) rel(r) / min(R, k)`; zero when nothing is relevant.
pub fn average_precision_at_k(relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    if total_relevant == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / total_relevant.min(k) as f64
}

pub fn map_at_k(rankings: &[QueryRanking], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Config("MAP needs at least one query".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let sum: f64 = rankings.iter().map(|q| average_precision_at_k(&q.relevance, q.total_relevant, k)).sum();
    Ok(sum / rankings.len() as f64)
}

pub const RECALL_LEVELS: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, mean interpolated precision)` at recall 0.0, 0.1, ..., 1.0.
    pub points: Vec<(f64, f64)>,
    /// Queries left out because nothing was relevant to them.
    pub skipped: usize,
}

/// 11-point interpolated precision averaged over queries. Queries with no relevant
/// items are left out and counted.
pub fn pr_curve(rankings: &[QueryRanking]) -> PrCurve {
    let mut sums = [0.0; RECALL_LEVELS];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for q in rankings {
        if q.total_relevant == 0 {
            skipped += 1;
            continue;
        }
        used += 1;
        // (recall, precision) after each rank
        let mut hits = 0usize;
        let mut points = Vec::with_capacity(q.relevance.len());
        for (r, &rel) in q.relevance.iter().enumerate() {
            hits += rel as usize;
            points.push((hits as f64 / q.total_relevant as f64, hits as f64 / (r + 1) as f64));
        }
        // running max of precision from the tail
        let mut best = 0.0f64;
        let mut tail_max = vec![0.0; points.len()];
        for i in (0..points.len()).rev() {
            best = best.max(points[i].1);
            tail_max[i] = best;
        }
        for (level, sum) in sums.iter_mut().enumerate() {
            let recall = level as f64 / 10.0;
            // first rank whose recall reaches the level; small slack for 0.1 * 3 etc.
            if let Some(i) = points.iter().position(|p| p.0 >= recall - 1e-12) {
                *sum += tail_max[i];
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without relevant items left out of the PR curve");
    }
    let points = sums
        .iter()
        .enumerate()
        .map(|(level, s)| (level as f64 / 10.0, if used == 0 { 0.0 } else { s / used as f64 }))
        .collect();
    PrCurve { points, skipped }
}

/// Expected AP@k of a uniformly random ranking of `n` items of which `relevant` are
/// relevant: `(1/min(R,k)) sum_{r<=k} (1/r) [R/N + (r-1) R(R-1) / (N(N-1))]`.
pub fn random_ap_at_k(n: usize, relevant: usize, k: usize) -> f64 {
    if relevant == 0 || n == 0 || k == 0 {
        return 0.0;
    }
    let (nf, rf) = (n as f64, relevant as f64);
    let pair = if n > 1 { rf * (rf - 1.0) / (nf * (nf - 1.0)) } else { 0.0 };
    let sum: f64 = (1..=k.min(n)).map(|r| (rf / nf + (r as f64 - 1.0) * pair) / r as f64).sum();
    sum / relevant.min(k) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map_at: BTreeMap<usize, f64>,
    pub pr_points: Vec<(f64, f64)>,
    pub n_queries: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn map(&self, k: usize) -> Option<f64> {
        self.map_at.get(&k).copied()
    }

    /// CSV with columns `k,map`.
    pub fn write_map_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, ["k", "map"], self.map_at.iter().map(|(k, v)| [k.to_string(), v.to_string()]))
    }

    /// CSV with columns `recall,precision`.
    pub fn write_pr_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, ["recall", "precision"], self.pr_points.iter().map(|(r, p)| [r.to_string(), p.to_string()]))
    }
}

fn write_rows<W: Write, const N: usize>(writer: W, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Config(format!("writing csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing csv: {e}")))
}

/// Each sample's text queries the index of all clips in `dataset`; a clip is relevant
/// when it shares the query's label (the query's own clip included).
pub fn query_rankings(model: &FfacrModel, dataset: &Dataset) -> Result<Vec<QueryRanking>> {
    let index = build_index(model, dataset)?;
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let counts = dataset.label_counts();
    let queries = model.map_text(&dataset.text_matrix(&dataset.all_indices()))?;
    let label_by_id: BTreeMap<u32, u32> = index.clip_ids().iter().copied().zip(index.labels().iter().copied()).collect();
    dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let ranked = index.rank_all(queries.row(i))?;
            let relevance = ranked.iter().map(|r| label_by_id[&r.clip_id] == rec.label_index).collect();
            Ok(QueryRanking::new(relevance, counts[rec.label_index as usize]))
        })
        .collect()
}

pub fn evaluate_retrieval(model: &FfacrModel, dataset: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    let rankings = query_rankings(model, dataset)?;
    report_from_rankings(&rankings, ks)
}

pub fn report_from_rankings(rankings: &[QueryRanking], ks: &[usize]) -> Result<EvalReport> {
    let mut map_at = BTreeMap::new();
    for &k in ks {
        map_at.insert(k, map_at_k(rankings, k)?);
    }
    let pr = pr_curve(rankings);
    Ok(EvalReport { map_at, pr_points: pr.points, n_queries: rankings.len(), skipped_queries: pr.skipped })
}

/// MAP@k a random ranking would reach on the evaluation protocol of
/// [`evaluate_retrieval`] for this dataset.
pub fn random_baseline_map(dataset: &Dataset, k: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("MAP needs at least one query".into()));
    }
    let counts = dataset.label_counts();
    let n = dataset.len();
    let sum: f64 = dataset.records.iter().map(|r| random_ap_at_k(n, counts[r.label_index as usize], k)).sum();
    Ok(sum / n as f64)
}
