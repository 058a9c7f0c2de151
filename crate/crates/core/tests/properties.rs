mod common;

use std::collections::BTreeMap;

use denseig::attribution::{attribute_against, pad_baseline};
use denseig::corpus::{parse_corpus, parse_qrels, write_records, Collection};
use denseig::encoder::{mean_pool, tokenize_document, EncoderBackend, PAD};
use denseig::eval::ndcg_at_k;
use denseig::index::{build_index, load_index, save_index};
use denseig::{DenseIndex, Document, IgConfig, QuadratureRule, Side};
use ndarray::{Array1, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(common::WORDS), 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_pool_of_embed(text in text_strategy(), seed in 0u64..1000) {
        let enc = common::encoder(8, seed);
        let tok = enc.tokenize(&text, Side::Query).unwrap();
        let composed = enc.forward_pooled(enc.embed(&tok).unwrap().view(), &tok).unwrap();
        prop_assert_eq!(enc.encode(&text, Side::Query).unwrap(), composed);
    }

    #[test]
    fn forward_matches_hand_computation(text in text_strategy(), seed in 0u64..1000) {
        let enc = common::encoder(6, seed);
        let tok = enc.tokenize(&text, Side::Document).unwrap();
        let got = enc.forward_pooled(enc.embed(&tok).unwrap().view(), &tok).unwrap();
        let (e, p, w, b) = (enc.token_embeddings(), enc.position_embeddings(), enc.projection(), enc.bias());
        let mut want = [0.0; 6];
        let mut n = 0.0;
        for (t, &id) in tok.token_ids.iter().enumerate() {
            if tok.special_mask[t] {
                continue;
            }
            n += 1.0;
            for i in 0..6 {
                let mut z = b[i];
                for j in 0..6 {
                    z += w[[i, j]] * (e[[id as usize, j]] + p[[t, j]]);
                }
                want[i] += z.tanh();
            }
        }
        for i in 0..6 {
            prop_assert!((got[i] - want[i] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_the_fixed_side_scales_attributions(text in text_strategy(), c in 0.25f64..4.0) {
        let enc = common::encoder(8, 5);
        let tok = enc.tokenize(&text, Side::Document).unwrap();
        let fixed = enc.encode("gold hedge", Side::Query).unwrap();
        let cfg = IgConfig::with_steps(16, QuadratureRule::Trapezoid);
        let a = attribute_against(&tok, fixed.view(), &enc, Side::Document, &cfg).unwrap();
        let b = attribute_against(&tok, (&fixed * c).view(), &enc, Side::Document, &cfg).unwrap();
        common::assert_special_zero(&a);
        for (x, y) in a.token_scores.iter().zip(&b.token_scores) {
            prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn corpus_jsonl_round_trips(docs in prop::collection::vec(("[a-z0-9_-]{1,8}", ".{0,20}", "[^\\s]{1}.{0,40}"), 1..20)) {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<Document> = docs
            .into_iter()
            .filter(|(id, _, _)| seen.insert(id.clone()))
            .map(|(id, title, text)| Document::new(id, title, text))
            .collect();
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let back = parse_corpus(buf.as_slice()).unwrap();
        prop_assert_eq!(back.as_slice(), records.as_slice());
    }

    #[test]
    fn ndcg_ignores_order_past_cutoff(seed in 0u64..10_000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranking: Vec<String> = (0..15).map(|i| format!("d{i}")).collect();
        let judged: BTreeMap<String, u32> = ranking.iter().map(|d| (d.clone(), rng.gen_range(0..3))).collect();
        let mut shuffled = ranking.clone();
        use rand::seq::SliceRandom;
        shuffled[k..].shuffle(&mut rng);
        prop_assert_eq!(ndcg_at_k(&ranking, &judged, k), ndcg_at_k(&shuffled, &judged, k));
    }

    #[test]
    fn ndcg_moving_better_document_up_never_hurts(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranking: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        let judged: BTreeMap<String, u32> = ranking.iter().map(|d| (d.clone(), rng.gen_range(0..4))).collect();
        let (i, j) = (rng.gen_range(0..12), rng.gen_range(0..12));
        let (hi, lo) = (i.min(j), i.max(j));
        if judged[&ranking[lo]] > judged[&ranking[hi]] {
            let before = ndcg_at_k(&ranking, &judged, 10);
            ranking.swap(hi, lo);
            prop_assert!(ndcg_at_k(&ranking, &judged, 10) >= before);
        }
    }
}

#[test]
fn pad_positions_are_pooled_but_padding_is_not() {
    let enc = common::encoder(8, 3);
    let tok = enc.tokenize("gold hedge risk", Side::Query).unwrap();
    let base = pad_baseline(&tok, &enc.special_tokens()).unwrap();
    assert!(base.tokens[1..4].iter().all(|t| t == PAD));
    assert_eq!(base.poolable_count(), 3);

    let mut padded = tok.clone();
    padded.pad_to(tok.len() + 4, 0);
    let x = enc.embed(&padded).unwrap();
    let short = enc
        .forward_pooled(x.slice(ndarray::s![..tok.len(), ..]), &tok)
        .unwrap();
    let long = enc.forward_pooled(x.view(), &padded).unwrap();
    assert!((&short - &long).iter().all(|v| v.abs() < 1e-15));

    let outputs = enc.outputs(x.view());
    let manual = outputs
        .slice(ndarray::s![1..4, ..])
        .mean_axis(Axis(0))
        .unwrap();
    assert!((&mean_pool(outputs.view(), &padded).unwrap() - &manual)
        .iter()
        .all(|v| v.abs() < 1e-15));
}

#[test]
fn index_batch_size_does_not_change_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fx = common::fixture(&mut rng, 70, 1);
    let enc = common::encoder(16, 4);
    let one = build_index(&fx.corpus, &enc, 1).unwrap();
    let many = build_index(&fx.corpus, &enc, 32).unwrap();
    assert_eq!(one.to_bytes(), many.to_bytes());
}

#[test]
fn index_round_trips_through_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fx = common::fixture(&mut rng, 20, 1);
    let enc = common::encoder(8, 4);
    let index = build_index(&fx.corpus, &enc, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    save_index(&index, &path).unwrap();
    let back = load_index(&path, &enc).unwrap();
    assert_eq!(back.doc_ids(), index.doc_ids());
    assert_eq!(back.embeddings(), index.embeddings());
    assert!(load_index(&path, &common::encoder(8, 5)).is_err());
}

#[test]
fn retrieval_matches_brute_force_on_continuous_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(1..300), rng.gen_range(1..32));
        let emb = ndarray::Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
        let q = Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0));
        let ids: Vec<String> = (0..n).map(|i| format!("{i:04}")).collect();
        let index = DenseIndex::from_parts(ids.clone(), emb.clone(), "x").unwrap();
        let hits = index.retrieve(q.view(), 10).unwrap();
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|i| ((0..d).map(|j| emb[[i, j]] * q[j]).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (h, (s, i)) in hits.iter().zip(&scored) {
            assert_eq!(h.doc_id, ids[*i]);
            assert!((h.score - s).abs() < 1e-12);
        }
    }
}

#[test]
fn titles_are_token_prefixes_across_a_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let fx = common::fixture(&mut rng, 100, 1);
    let enc = common::encoder(8, 1);
    for doc in fx.corpus.iter() {
        let tok = tokenize_document(&enc, doc).unwrap();
        match tok.title_span {
            Some((s, e)) => {
                let title = enc.tokenize(&doc.title, Side::Document).unwrap();
                assert_eq!(&tok.token_ids[s..e], &title.token_ids[1..title.len() - 1]);
            }
            None => assert!(!doc.has_title()),
        }
    }
}

#[test]
fn qrels_header_and_grades() {
    let q = parse_qrels("query-id\tcorpus-id\tscore\nq1\td1\t2\nq1\td2\t0\n".as_bytes()).unwrap();
    assert_eq!(q.len(), 2);
    assert_eq!(q.relevant("q1", 1), vec!["d1"]);
    let docs = Collection::<Document>::from_records(vec![Document::new("a", "", "x")]).unwrap();
    assert_eq!(docs.len(), 1);
}
