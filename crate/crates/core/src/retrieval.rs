//! Exact descriptor search and recall / precision-recall evaluation.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::overlap::OverlapTable;

const SQIX_MAGIC: &[u8; 4] = b"SQIX";
const SQIX_VERSION: u8 = 1;

/// Provenance of an index; not part of the binary format.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub model_hash: String,
    pub config_hash: String,
}

/// Immutable table of `(id, descriptor)` rows in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    pub meta: IndexMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub distance: f32,
}

fn sqdist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_id(a: &Hit, b: &Hit) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

impl DescriptorIndex {
    pub fn build<I, D>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, D)>,
        D: AsRef<[f32]>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        let mut dim = None;
        for (id, d) in rows {
            let d = d.as_ref();
            match dim {
                None => dim = Some(d.len()),
                Some(n) if n != d.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: d.len(),
                    })
                }
                _ => {}
            }
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            data.extend_from_slice(d);
        }
        let Some(dim) = dim else {
            return Err(Error::Empty("descriptor index"));
        };
        if dim == 0 {
            return Err(Error::Empty("descriptor"));
        }
        Ok(Self {
            dim,
            ids,
            data,
            meta: IndexMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The `min(k, len)` nearest rows by squared Euclidean distance; equal
    /// distances rank the lower id first.
    pub fn query_top_k(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let mut hits: Vec<Hit> = self
            .ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(&id, row)| Hit {
                id,
                distance: sqdist(q, row),
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, by_distance_then_id);
            hits.truncate(k);
        }
        hits.sort_by(by_distance_then_id);
        Ok(hits)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, SQIX_MAGIC, SQIX_VERSION)?;
        binio::write_u32(w, self.len() as u32)?;
        binio::write_u32(w, self.dim as u32)?;
        for (i, &id) in self.ids.iter().enumerate() {
            binio::write_u64(w, id)?;
            binio::write_f32s(w, self.row(i))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, SQIX_MAGIC, SQIX_VERSION)?;
        let count = binio::read_u32(r)?;
        let dim = binio::read_u32(r)?;
        binio::checked_len(&[count, dim], 1 << 31)?;
        let mut rows = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = binio::read_u64(r)?;
            rows.push((id, binio::read_f32s(r, dim as usize)?));
        }
        Self::build(rows)
    }
}

/// Ground truth for scored queries: a database id is a true match for a
/// query when their overlap exceeds the table's positive threshold. Ids are
/// row indices of the table.
pub struct Truth<'a> {
    table: &'a OverlapTable,
}

impl<'a> Truth<'a> {
    pub fn new(table: &'a OverlapTable) -> Self {
        Self { table }
    }

    fn check(&self, id: u64) -> Result<usize> {
        let i = usize::try_from(id).map_err(|_| Error::UnknownId(id))?;
        if i >= self.table.len() {
            return Err(Error::UnknownId(id));
        }
        Ok(i)
    }

    pub fn is_match(&self, query: u64, db: u64) -> Result<bool> {
        Ok(self.table.is_positive(self.check(query)?, self.check(db)?))
    }

    /// Whether any row of `index` is a true match for `query`.
    pub fn has_match(&self, query: u64, index: &DescriptorIndex) -> Result<bool> {
        for &id in index.ids() {
            if self.is_match(query, id)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Ranked results for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: u64,
    pub hits: Vec<Hit>,
    /// `None` when the query has no true match in the index.
    pub first_match_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// `None` when every query was excluded.
    pub recall: Option<f64>,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Searches every query and records the rank of its first true match.
pub fn rank_queries(
    queries: &[(u64, &[f32])],
    index: &DescriptorIndex,
    truth: &Truth,
    k: usize,
) -> Result<Vec<QueryResult>> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    queries
        .iter()
        .map(|&(q, d)| {
            let hits = index.query_top_k(d, k)?;
            let first_match_rank = if truth.has_match(q, index)? {
                let mut rank = None;
                for (r, h) in hits.iter().enumerate() {
                    if truth.is_match(q, h.id)? {
                        rank = Some(r);
                        break;
                    }
                }
                // true match exists but lies beyond k
                Some(rank.unwrap_or(usize::MAX))
            } else {
                None
            };
            Ok(QueryResult {
                query: q,
                hits,
                first_match_rank,
            })
        })
        .collect()
}

/// AR@N from ranked results searched with `k >= n`.
pub fn recall_from_ranks(results: &[QueryResult], n: usize) -> Recall {
    let mut hit = 0;
    let mut evaluated = 0;
    for r in results {
        if let Some(rank) = r.first_match_rank {
            evaluated += 1;
            if rank < n {
                hit += 1;
            }
        }
    }
    Recall {
        recall: (evaluated > 0).then(|| hit as f64 / evaluated as f64),
        evaluated,
        excluded: results.len() - evaluated,
    }
}

pub fn average_recall_at_n(
    queries: &[(u64, &[f32])],
    index: &DescriptorIndex,
    truth: &Truth,
    n: usize,
) -> Result<Recall> {
    let ranked = rank_queries(queries, index, truth, n)?;
    Ok(recall_from_ranks(&ranked, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `[threshold, precision, recall]`, thresholds ascending.
    pub points: Vec<[f64; 3]>,
    pub f1_max: f64,
}

/// Sweeps a threshold on the top-1 distance. Recall is relative to the
/// queries that have a true match; with no predictions precision is 1.
/// Without explicit thresholds every distinct top-1 distance is used.
pub fn pr_from_ranks(
    results: &[QueryResult],
    truth: &Truth,
    thresholds: Option<&[f32]>,
) -> Result<PrCurve> {
    let mut top1 = Vec::with_capacity(results.len());
    let mut positives = 0usize;
    for r in results {
        if r.first_match_rank.is_some() {
            positives += 1;
        }
        if let Some(h) = r.hits.first() {
            top1.push((h.distance, truth.is_match(r.query, h.id)?));
        }
    }
    let ts: Vec<f32> = match thresholds {
        Some(t) => {
            let mut t = t.to_vec();
            t.sort_by(f32::total_cmp);
            t
        }
        None => {
            let mut t: Vec<f32> = top1.iter().map(|p| p.0).collect();
            t.sort_by(f32::total_cmp);
            t.dedup();
            t
        }
    };
    let mut points = Vec::with_capacity(ts.len());
    let mut f1_max = 0.0f64;
    for &t in &ts {
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(d, ok) in &top1 {
            if d <= t {
                if ok {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if positives == 0 {
            0.0
        } else {
            tp as f64 / positives as f64
        };
        if precision + recall > 0.0 {
            f1_max = f1_max.max(2.0 * precision * recall / (precision + recall));
        }
        points.push([t as f64, precision, recall]);
    }
    Ok(PrCurve { points, f1_max })
}

pub fn precision_recall_curve(
    queries: &[(u64, &[f32])],
    index: &DescriptorIndex,
    truth: &Truth,
    thresholds: Option<&[f32]>,
) -> Result<PrCurve> {
    let ranked = rank_queries(queries, index, truth, 1)?;
    pr_from_ranks(&ranked, truth, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ar1: Option<f64>,
    pub ar5: Option<f64>,
    pub ar20: Option<f64>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
    pub pr: Vec<[f64; 3]>,
    pub f1_max: f64,
    pub queries: Vec<QueryResult>,
}

/// AR@1/5/20 and the PR curve in one pass over the queries.
pub fn evaluate(
    queries: &[(u64, &[f32])],
    index: &DescriptorIndex,
    truth: &Truth,
) -> Result<EvalReport> {
    let ranked = rank_queries(queries, index, truth, 20)?;
    let r1 = recall_from_ranks(&ranked, 1);
    let pr = pr_from_ranks(&ranked, truth, None)?;
    Ok(EvalReport {
        ar1: r1.recall,
        ar5: recall_from_ranks(&ranked, 5).recall,
        ar20: recall_from_ranks(&ranked, 20).recall,
        evaluated_queries: r1.evaluated,
        excluded_queries: r1.excluded,
        pr: pr.points,
        f1_max: pr.f1_max,
        queries: ranked,
    })
}
