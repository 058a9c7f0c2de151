//! NDCG@k with exponential gains, as reported by BEIR and trec_eval.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, Queries};
use crate::encoder::{EncoderBackend, Side};
use crate::error::{Error, Result};
use crate::index::DenseIndex;

pub const DEFAULT_EVAL_K: usize = 10;
/// Depth retrieved per query before cutting at k.
pub const RETRIEVAL_DEPTH: usize = 100;

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank0: usize) -> f64 {
    (rank0 as f64 + 2.0).log2()
}

/// `None` when the query has no positive judgment (IDCG = 0).
pub fn ndcg_at_k<S: AsRef<str>>(
    ranking: &[S],
    judged: &BTreeMap<String, u32>,
    k: usize,
) -> Option<f64> {
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d.as_ref()).copied().unwrap_or(0)) / discount(i))
        .sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries dropped because nothing relevant was judged for them.
    pub excluded: usize,
}

impl EvalResult {
    pub fn from_scores(
        k: usize,
        per_query: BTreeMap<String, f64>,
        excluded: usize,
    ) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::Empty("no evaluable queries (no positive judgments)"));
        }
        let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
        if excluded > 0 {
            log::warn!("{excluded} queries without positive judgments excluded from the mean");
        }
        Ok(Self {
            metric: format!("ndcg@{k}"),
            per_query,
            mean,
            excluded,
        })
    }
}

/// Scores precomputed rankings; queries absent from `rankings` are ignored.
pub fn evaluate_rankings(
    rankings: &BTreeMap<String, Vec<String>>,
    qrels: &Qrels,
    k: usize,
) -> Result<EvalResult> {
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for (q, ranking) in rankings {
        match qrels.for_query(q).and_then(|j| ndcg_at_k(ranking, j, k)) {
            Some(v) => {
                per_query.insert(q.clone(), v);
            }
            None => excluded += 1,
        }
    }
    EvalResult::from_scores(k, per_query, excluded)
}

/// Retrieves `max(k, 100)` documents per query and scores NDCG@k.
pub fn evaluate_run<B: EncoderBackend + ?Sized>(
    index: &DenseIndex,
    backend: &B,
    queries: &Queries,
    qrels: &Qrels,
    k: usize,
) -> Result<EvalResult> {
    index.check_backend(backend)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let depth = k.max(RETRIEVAL_DEPTH);
    let run_one = |q: &crate::corpus::Query| -> Result<(String, Vec<String>)> {
        let v = backend.encode(&q.text, Side::Query)?;
        let hits = index.retrieve(v.view(), depth)?;
        Ok((
            q.query_id.clone(),
            hits.into_iter().map(|h| h.doc_id).collect(),
        ))
    };
    let judged: Vec<_> = queries
        .iter()
        .filter(|q| qrels.for_query(&q.query_id).is_some())
        .collect();
    let unjudged = queries.len() - judged.len();
    let rankings: BTreeMap<_, _> = if backend.supports_parallel() {
        judged
            .par_iter()
            .map(|q| run_one(q))
            .collect::<Result<_>>()?
    } else {
        judged.iter().map(|q| run_one(q)).collect::<Result<_>>()?
    };
    let mut res = evaluate_rankings(&rankings, qrels, k)?;
    res.excluded += unjudged;
    Ok(res)
}
