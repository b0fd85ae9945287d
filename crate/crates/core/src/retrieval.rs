//! Exact cosine ranking of video clips in the common space.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::FfacrModel;
use crate::numerics::{dot, norm, DenseMatrix};

/// Unit-normalized video embeddings with their clip ids. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticIndex {
    clip_ids: Vec<u32>,
    labels: Vec<u32>,
    embeddings: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub rank: usize,
    pub clip_id: u32,
    pub score: f64,
}

fn normalize_rows(m: &mut DenseMatrix, on_zero: impl Fn(usize) -> Error) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(on_zero(i));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Embeds every clip of `dataset` with the video branch and normalizes the rows.
pub fn build_index(model: &FfacrModel, dataset: &Dataset) -> Result<SemanticIndex> {
    if dataset.d_img != model.dims.d_img || dataset.d_txt != model.dims.d_txt {
        return Err(Error::dim("dataset feature width", model.dims.d_img + model.dims.d_txt, dataset.d_img + dataset.d_txt));
    }
    let clip_ids: Vec<u32> = dataset.records.iter().map(|r| r.clip_id).collect();
    let mut seen = HashSet::with_capacity(clip_ids.len());
    let dups: Vec<String> = clip_ids.iter().filter(|id| !seen.insert(**id)).map(|id| format!("duplicate clip_id {id}")).collect();
    if !dups.is_empty() {
        return Err(Error::Validation { offenders: dups });
    }
    let labels = dataset.records.iter().map(|r| r.label_index).collect();
    if dataset.is_empty() {
        return Ok(SemanticIndex { clip_ids, labels, embeddings: DenseMatrix::zeros(0, model.dims.m) });
    }
    let idx = dataset.all_indices();
    let mut embeddings = model.embed_clips(&dataset.image_matrix(&idx), &dataset.text_matrix(&idx))?;
    normalize_rows(&mut embeddings, |i| Error::DegenerateEmbedding(format!("clip {} has a zero-norm embedding", clip_ids[i])))?;
    Ok(SemanticIndex { clip_ids, labels, embeddings })
}

impl SemanticIndex {
    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn clip_ids(&self) -> &[u32] {
        &self.clip_ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    pub fn label_of(&self, clip_id: u32) -> Option<u32> {
        self.clip_ids.iter().position(|&c| c == clip_id).map(|i| self.labels[i])
    }

    /// Ranks clips against an embedding already in the common space. Only the
    /// direction of `query` matters.
    pub fn search_embedding(&self, query: &[f64], k: usize) -> Result<Vec<RankedResult>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.embeddings.cols() {
            return Err(Error::dim("query embedding", self.embeddings.cols(), query.len()));
        }
        let n = norm(query);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateQuery);
        }
        let q: Vec<f64> = query.iter().map(|v| v / n).collect();
        let mut scored: Vec<(f64, u32)> =
            self.embeddings.row_iter().zip(&self.clip_ids).map(|(row, &id)| (dot(row, &q), id)).collect();
        let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, clip_id))| RankedResult { rank: i + 1, clip_id, score })
            .collect())
    }

    /// Clip ids in full rank order for an embedded query.
    pub fn rank_all(&self, query: &[f64]) -> Result<Vec<RankedResult>> {
        self.search_embedding(query, self.len().max(1))
    }
}

/// Maps the query through the text branch and returns the top `min(k, n)` clips.
pub fn search(index: &SemanticIndex, model: &FfacrModel, query_text_feats: &[f64], k: usize) -> Result<Vec<RankedResult>> {
    if query_text_feats.len() != model.dims.d_txt {
        return Err(Error::dim("query text features", model.dims.d_txt, query_text_feats.len()));
    }
    let q = model.map_text(&DenseMatrix::from_vec(1, query_text_feats.len(), query_text_feats.to_vec())?)?;
    index.search_embedding(q.row(0), k)
}

/// Results as CSV with columns `rank,clip_id,score`.
pub fn write_results_csv<W: Write>(results: &[RankedResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Config(format!("writing results csv: {e}"));
    w.write_record(["rank", "clip_id", "score"]).map_err(to_err)?;
    for r in results {
        w.write_record([r.rank.to_string(), r.clip_id.to_string(), r.score.to_string()]).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing results csv: {e}")))
}

/// Results as one JSON object per line.
pub fn write_results_jsonl<W: Write>(results: &[RankedResult], mut writer: W) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<results>", e))?;
    }
    Ok(())
}
