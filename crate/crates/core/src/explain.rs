//! Instance, ranking and title-span explanations built on [`crate::attribution`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_against, encode_tokens, AttributionResult, IgConfig};
use crate::corpus::{Corpus, Document, Qrels, Queries, Query};
use crate::encoder::{tokenize_document, EncoderBackend, Side, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::index::{DenseIndex, Hit};
use crate::seeds;

pub const DEFAULT_EXPLAIN_K: usize = 25;
pub const TITLE_MIN_GRADE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceExplanation {
    pub query_id: String,
    pub doc_id: String,
    pub query_attr: AttributionResult,
    pub doc_attr: AttributionResult,
    pub score: f64,
    pub doc_title_span: Option<(usize, usize)>,
}

pub fn explain_instance<B: EncoderBackend + ?Sized>(
    query: &Query,
    doc: &Document,
    backend: &B,
    cfg: &IgConfig,
) -> Result<InstanceExplanation> {
    let q_tok = backend.tokenize(&query.text, Side::Query)?;
    let d_tok = tokenize_document(backend, doc)?;
    let q_vec = encode_tokens(backend, &q_tok)?;
    let d_vec = encode_tokens(backend, &d_tok)?;
    let query_attr = attribute_against(&q_tok, d_vec.view(), backend, Side::Query, cfg)?;
    let doc_attr = attribute_against(&d_tok, q_vec.view(), backend, Side::Document, cfg)
        .map_err(|e| Error::for_document(&doc.doc_id, e))?;
    Ok(InstanceExplanation {
        query_id: query.query_id.clone(),
        doc_id: doc.doc_id.clone(),
        score: q_vec.dot(&d_vec),
        query_attr,
        doc_attr,
        doc_title_span: d_tok.title_span,
    })
}

/// Strings that never enter aggregated maps.
pub fn is_aggregated_token(token: &str) -> bool {
    !matches!(token, PAD | CLS | SEP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAttribution {
    pub doc_id: String,
    pub retrieval_score: f64,
    pub attribution: AttributionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingExplanation {
    pub query_id: String,
    pub k: usize,
    /// Explained documents in doc id order.
    pub documents: Vec<DocumentAttribution>,
    pub per_token_totals: BTreeMap<String, f64>,
    pub contributing_docs: BTreeMap<String, usize>,
    /// Sum of positive per-position scores only.
    pub positive_parts: BTreeMap<String, f64>,
    /// Sum of |negative| per-position scores only.
    pub negative_parts: BTreeMap<String, f64>,
}

impl RankingExplanation {
    /// Aggregates document-side attributions; documents are summed in doc id order.
    pub fn aggregate(query_id: &str, k: usize, mut documents: Vec<DocumentAttribution>) -> Self {
        documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let mut totals = BTreeMap::new();
        let mut counts = BTreeMap::new();
        let mut pos = BTreeMap::new();
        let mut neg = BTreeMap::new();
        for d in &documents {
            let mut seen = BTreeSet::new();
            let a = &d.attribution;
            for (tok, &s) in a.tokens.iter().zip(&a.token_scores) {
                if !is_aggregated_token(tok) {
                    continue;
                }
                *totals.entry(tok.clone()).or_insert(0.0) += s;
                if s > 0.0 {
                    *pos.entry(tok.clone()).or_insert(0.0) += s;
                } else if s < 0.0 {
                    *neg.entry(tok.clone()).or_insert(0.0) += -s;
                }
                if seen.insert(tok.as_str()) {
                    *counts.entry(tok.clone()).or_insert(0) += 1;
                }
            }
        }
        Self {
            query_id: query_id.to_string(),
            k,
            documents,
            per_token_totals: totals,
            contributing_docs: counts,
            positive_parts: pos,
            negative_parts: neg,
        }
    }

    /// (token, total, doc_count) sorted by descending |total|, then token.
    pub fn table(&self) -> Vec<(&str, f64, usize)> {
        let mut rows: Vec<_> = self
            .per_token_totals
            .iter()
            .map(|(t, &v)| {
                (
                    t.as_str(),
                    v,
                    self.contributing_docs.get(t).copied().unwrap_or(0),
                )
            })
            .collect();
        rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(b.0)));
        rows
    }

    pub fn hits(&self) -> Vec<Hit> {
        self.documents
            .iter()
            .map(|d| Hit {
                doc_id: d.doc_id.clone(),
                score: d.retrieval_score,
            })
            .collect()
    }
}

/// How the positive and negative clouds are weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudMode {
    /// Split the signed per-token totals by sign.
    #[default]
    Signed,
    /// Accumulate positive and negative per-position scores separately.
    Separate,
}

impl std::str::FromStr for CloudMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(CloudMode::Signed),
            "separate" => Ok(CloudMode::Separate),
            other => Err(Error::Config(format!("unknown cloud mode `{other}`"))),
        }
    }
}

pub type WeightMap = BTreeMap<String, f64>;

/// Positive map holds tokens with total > 0, negative map holds |total| for
/// tokens with total < 0. Zero totals land in neither.
pub fn split_signed(re: &RankingExplanation) -> (WeightMap, WeightMap) {
    let mut pos = WeightMap::new();
    let mut neg = WeightMap::new();
    for (t, &v) in &re.per_token_totals {
        if v > 0.0 {
            pos.insert(t.clone(), v);
        } else if v < 0.0 {
            neg.insert(t.clone(), -v);
        }
    }
    (pos, neg)
}

pub fn split_with_mode(re: &RankingExplanation, mode: CloudMode) -> (WeightMap, WeightMap) {
    match mode {
        CloudMode::Signed => split_signed(re),
        CloudMode::Separate => (re.positive_parts.clone(), re.negative_parts.clone()),
    }
}

/// Retrieves the top `k` documents for `query` and attributes each one's
/// tokens, summing signed scores per token string.
pub fn explain_ranking<B: EncoderBackend + ?Sized>(
    query: &Query,
    index: &DenseIndex,
    corpus: &Corpus,
    backend: &B,
    k: usize,
    cfg: &IgConfig,
) -> Result<RankingExplanation> {
    index.check_backend(backend)?;
    let q_tok = backend.tokenize(&query.text, Side::Query)?;
    let q_vec = encode_tokens(backend, &q_tok)?;
    let hits = index.retrieve(q_vec.view(), k)?;

    let explain_one = |hit: &Hit| -> Result<DocumentAttribution> {
        let doc = corpus.get(&hit.doc_id).ok_or_else(|| Error::UnknownId {
            kind: "document",
            id: hit.doc_id.clone(),
        })?;
        let attribution = tokenize_document(backend, doc)
            .and_then(|tok| attribute_against(&tok, q_vec.view(), backend, Side::Document, cfg))
            .map_err(|e| Error::for_document(&hit.doc_id, e))?;
        Ok(DocumentAttribution {
            doc_id: hit.doc_id.clone(),
            retrieval_score: hit.score,
            attribution,
        })
    };
    let documents: Vec<_> = if backend.supports_parallel() {
        hits.par_iter().map(explain_one).collect::<Result<_>>()?
    } else {
        hits.iter().map(explain_one).collect::<Result<_>>()?
    };
    Ok(RankingExplanation::aggregate(&query.query_id, k, documents))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleRow {
    pub query_id: String,
    pub doc_id: String,
    pub title_sum_a: f64,
    pub title_sum_b: f64,
    /// Sum over every token score of the document under each model.
    pub total_a: f64,
    pub total_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleAttributionReport {
    pub seed: u64,
    pub rows: Vec<TitleRow>,
    /// Queries without a relevant titled document.
    pub skipped: Vec<String>,
}

impl TitleAttributionReport {
    pub fn aggregate(&self) -> (f64, f64) {
        self.rows.iter().fold((0.0, 0.0), |(a, b), r| {
            (a + r.title_sum_a, b + r.title_sum_b)
        })
    }
}

/// Sum of scores whose position lies inside the title span.
pub fn title_sum(attr: &AttributionResult, span: Option<(usize, usize)>) -> f64 {
    match span {
        Some((s, e)) => attr.token_scores[s..e].iter().sum(),
        None => 0.0,
    }
}

/// Picks one relevant titled document per query with an RNG derived from
/// `(seed, query_id)`. Candidates are in doc id order.
pub fn select_title_documents<'a>(
    queries: &'a Queries,
    qrels: &Qrels,
    corpus: &'a Corpus,
    seed: u64,
) -> (Vec<(&'a Query, &'a Document)>, Vec<String>) {
    let mut picks = Vec::new();
    let mut skipped = Vec::new();
    for q in queries {
        let candidates: Vec<&Document> = qrels
            .relevant(&q.query_id, TITLE_MIN_GRADE)
            .into_iter()
            .filter_map(|d| corpus.get(d))
            .filter(|d| d.has_title())
            .collect();
        if candidates.is_empty() {
            skipped.push(q.query_id.clone());
            continue;
        }
        let mut rng = seeds::rng_for(seed, &format!("title:{}", q.query_id));
        picks.push((q, candidates[rng.gen_range(0..candidates.len())]));
    }
    (picks, skipped)
}

fn title_attribution_one<B: EncoderBackend + ?Sized>(
    query: &Query,
    doc: &Document,
    backend: &B,
    cfg: &IgConfig,
) -> Result<(f64, f64)> {
    let q_vec = backend.encode(&query.text, Side::Query)?;
    let tok = tokenize_document(backend, doc).map_err(|e| Error::for_document(&doc.doc_id, e))?;
    let attr = attribute_against(&tok, q_vec.view(), backend, Side::Document, cfg)
        .map_err(|e| Error::for_document(&doc.doc_id, e))?;
    Ok((title_sum(&attr, tok.title_span), attr.total()))
}

pub fn title_attribution<A, B>(
    queries: &Queries,
    qrels: &Qrels,
    corpus: &Corpus,
    backend_a: &A,
    backend_b: &B,
    cfg: &IgConfig,
    seed: u64,
) -> Result<TitleAttributionReport>
where
    A: EncoderBackend + ?Sized,
    B: EncoderBackend + ?Sized,
{
    let (picks, skipped) = select_title_documents(queries, qrels, corpus, seed);
    if !skipped.is_empty() {
        log::warn!(
            "{} queries have no relevant titled document; skipped",
            skipped.len()
        );
    }
    if picks.is_empty() {
        return Err(Error::Empty(
            "no query has a relevant document with a title",
        ));
    }
    let row = |&(q, d): &(&Query, &Document)| -> Result<TitleRow> {
        let (title_sum_a, total_a) = title_attribution_one(q, d, backend_a, cfg)?;
        let (title_sum_b, total_b) = title_attribution_one(q, d, backend_b, cfg)?;
        Ok(TitleRow {
            query_id: q.query_id.clone(),
            doc_id: d.doc_id.clone(),
            title_sum_a,
            title_sum_b,
            total_a,
            total_b,
        })
    };
    let rows = if backend_a.supports_parallel() && backend_b.supports_parallel() {
        picks.par_iter().map(row).collect::<Result<Vec<_>>>()?
    } else {
        picks.iter().map(row).collect::<Result<Vec<_>>>()?
    };
    Ok(TitleAttributionReport {
        seed,
        rows,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub a: RankingExplanation,
    pub b: RankingExplanation,
    /// `total_b − total_a` over the union of tokens, missing entries as 0.
    pub delta: BTreeMap<String, f64>,
}

pub fn token_delta(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    a.keys()
        .chain(b.keys())
        .map(|t| {
            let va = a.get(t).copied().unwrap_or(0.0);
            let vb = b.get(t).copied().unwrap_or(0.0);
            (t.clone(), vb - va)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn compare_models<A, B>(
    query: &Query,
    corpus: &Corpus,
    index_a: &DenseIndex,
    backend_a: &A,
    index_b: &DenseIndex,
    backend_b: &B,
    k: usize,
    cfg: &IgConfig,
) -> Result<ModelComparison>
where
    A: EncoderBackend + ?Sized,
    B: EncoderBackend + ?Sized,
{
    let a = explain_ranking(query, index_a, corpus, backend_a, k, cfg)?;
    let b = explain_ranking(query, index_b, corpus, backend_b, k, cfg)?;
    let delta = token_delta(&a.per_token_totals, &b.per_token_totals);
    Ok(ModelComparison { a, b, delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(tokens: &[&str], scores: &[f64]) -> AttributionResult {
        AttributionResult {
            side: Side::Document,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_scores: scores.to_vec(),
            score_f_x: 0.0,
            score_f_baseline: 0.0,
            completeness_residual: 0.0,
        }
    }

    fn doc(id: &str, a: AttributionResult) -> DocumentAttribution {
        DocumentAttribution {
            doc_id: id.into(),
            retrieval_score: 0.0,
            attribution: a,
        }
    }

    #[test]
    fn totals_and_counts_across_documents() {
        let re = RankingExplanation::aggregate(
            "q",
            2,
            vec![
                doc("d2", attr(&["[CLS]", "gold", "[SEP]"], &[0.0, -0.1, 0.0])),
                doc(
                    "d1",
                    attr(&["[CLS]", "gold", "hedge", "[SEP]"], &[0.0, 0.3, 0.05, 0.0]),
                ),
            ],
        );
        assert!((re.per_token_totals["gold"] - 0.2).abs() < 1e-15);
        assert_eq!(re.contributing_docs["gold"], 2);
        assert_eq!(re.contributing_docs["hedge"], 1);
        assert!(!re.per_token_totals.contains_key("[CLS]"));
        assert_eq!(re.documents[0].doc_id, "d1");
        assert_eq!(re.positive_parts["gold"], 0.3);
        assert_eq!(re.negative_parts["gold"], 0.1);
    }

    #[test]
    fn split_examples() {
        let mut re = RankingExplanation::aggregate("q", 0, vec![]);
        re.per_token_totals = [("a", 0.5), ("b", -0.2), ("c", 0.0)]
            .iter()
            .map(|(t, v)| (t.to_string(), *v))
            .collect();
        let (p, n) = split_signed(&re);
        assert_eq!(p.into_iter().collect::<Vec<_>>(), [("a".to_string(), 0.5)]);
        assert_eq!(n.into_iter().collect::<Vec<_>>(), [("b".to_string(), 0.2)]);

        re.per_token_totals.remove("b");
        assert!(split_signed(&re).1.is_empty());
    }

    #[test]
    fn delta_over_union() {
        let a: BTreeMap<String, f64> = [("x".to_string(), 0.1)].into();
        let b: BTreeMap<String, f64> = [("x".to_string(), 0.1), ("y".to_string(), 0.4)].into();
        let d = token_delta(&a, &b);
        assert_eq!(d["x"], 0.0);
        assert_eq!(d["y"], 0.4);
        assert!(token_delta(&a, &a).values().all(|&v| v == 0.0));
    }

    #[test]
    fn table_sorted_by_magnitude() {
        let re = RankingExplanation::aggregate(
            "q",
            1,
            vec![doc("d", attr(&["a", "b", "c"], &[0.1, -0.5, 0.3]))],
        );
        let names: Vec<_> = re.table().iter().map(|r| r.0).collect();
        assert_eq!(names, ["b", "c", "a"]);
    }
}
