#![allow(dead_code)]

use denseig::corpus::Collection;
use denseig::encoder::{ReferenceConfig, CLS, SEP};
use denseig::{
    AttributionResult, Corpus, Document, Qrels, Queries, Query, ReferenceEncoder, Vocabulary,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub const WORDS: &[&str] = &[
    "gold",
    "hedge",
    "inflation",
    "market",
    "bond",
    "yield",
    "stock",
    "risk",
    "virus",
    "vaccine",
    "protein",
    "cell",
    "spread",
    "mask",
    "trial",
    "dose",
    "loan",
    "rate",
    "bank",
    "credit",
    "tax",
    "fund",
    "index",
    "price",
    "coronavirus",
    "immune",
    "response",
    "patient",
    "symptom",
    "fever",
    "asset",
    "equity",
];

pub fn random_text<R: Rng>(rng: &mut R, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn encoder(dim: usize, seed: u64) -> ReferenceEncoder {
    let vocab = Vocabulary::from_texts(WORDS.iter().copied());
    ReferenceEncoder::new(
        vocab,
        ReferenceConfig {
            dim,
            seed,
            ..ReferenceConfig::default()
        },
    )
    .unwrap()
}

/// Titled documents, every other one relevant to each query.
pub struct Fixture {
    pub corpus: Corpus,
    pub queries: Queries,
    pub qrels: Qrels,
}

pub fn fixture<R: Rng>(rng: &mut R, n_docs: usize, n_queries: usize) -> Fixture {
    let docs: Vec<Document> = (0..n_docs)
        .map(|i| {
            let title = if i % 4 == 3 {
                String::new()
            } else {
                random_text(rng, 1, 4)
            };
            Document::new(format!("d{i:03}"), title, random_text(rng, 4, 20))
        })
        .collect();
    let queries: Vec<Query> = (0..n_queries)
        .map(|i| Query::new(format!("q{i}"), random_text(rng, 2, 5)))
        .collect();
    let mut qrels = Qrels::new();
    for q in &queries {
        for d in docs.choose_multiple(rng, 4) {
            qrels.insert(q.query_id.clone(), d.doc_id.clone(), rng.gen_range(0..3));
        }
    }
    Fixture {
        corpus: Collection::from_records(docs).unwrap(),
        queries: Collection::from_records(queries).unwrap(),
        qrels,
    }
}

/// Scores at `[CLS]` and `[SEP]` positions.
pub fn special_scores(attr: &AttributionResult) -> Vec<f64> {
    attr.tokens
        .iter()
        .zip(&attr.token_scores)
        .filter(|(t, _)| *t == CLS || *t == SEP)
        .map(|(_, &s)| s)
        .collect()
}

pub fn assert_special_zero(attr: &AttributionResult) {
    for s in special_scores(attr) {
        assert!(s == 0.0, "special token score {s}");
    }
}
