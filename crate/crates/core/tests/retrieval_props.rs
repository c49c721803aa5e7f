use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use deepsearch_core::corpus::{CorpusStore, WhitespaceTokenizer};
use deepsearch_core::retrieval::{dense_topk, lexical_topk, load_embeddings, EmbeddingIndex, RetrievalError};
use proptest::prelude::*;

/// Brute-force cosine ranking: full sort by (score desc, docid asc).
fn brute_force(rows: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<(String, f64)> {
    let qn: f64 = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = rows
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
            let vn: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let s = if vn == 0.0 { 0.0 } else { dot / (vn * qn) };
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn rows_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>, Vec<f32>)> {
    (1usize..5).prop_flat_map(|dim| {
        // Small integer grid values produce plenty of exact ties.
        let v = proptest::collection::vec((-3i8..=3).prop_map(f32::from), dim);
        let q = proptest::collection::vec((-3i8..=3).prop_map(f32::from), dim)
            .prop_filter("non-zero query", |q| q.iter().any(|&x| x != 0.0));
        (Just(dim), proptest::collection::vec(v, 1..30), q)
    })
}

proptest! {
    #[test]
    fn dense_topk_matches_brute_force((dim, vecs, q) in rows_strategy(), k in 1usize..40) {
        let rows: Vec<(String, Vec<f32>)> = vecs.into_iter().enumerate().map(|(i, v)| (format!("doc{i:03}"), v)).collect();
        let index = EmbeddingIndex::from_rows(dim, rows.clone()).unwrap();
        let got = dense_topk(&index, "q", &q, k).unwrap();
        let want = brute_force(&rows, &q, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.entries().iter().zip(&want) {
            prop_assert_eq!(&g.docid, &w.0);
            prop_assert!((g.score - w.1).abs() < 1e-9);
        }
    }

    #[test]
    fn embeddings_file_round_trip((dim, vecs, q) in rows_strategy()) {
        let rows: Vec<(String, Vec<f32>)> = vecs.into_iter().enumerate().map(|(i, v)| (format!("doc{i}"), v)).collect();
        let index = EmbeddingIndex::from_rows(dim, rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, v) = (dir.path().join("m.jsonl"), dir.path().join("v.bin"));
        index.write(&m, &v).unwrap();
        let back = load_embeddings(&m, &v).unwrap();
        prop_assert_eq!(back.docids(), index.docids());
        let a = dense_topk(&index, "q", &q, 50).unwrap();
        let b = dense_topk(&back, "q", &q, 50).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Independent BM25: recomputes statistics from scratch per query.
fn bm25_oracle(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> HashMap<String, f64> {
    let tok = |s: &str| -> Vec<String> {
        s.split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect()
    };
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tok(t)).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut out = HashMap::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let dl = toks[i].len() as f64;
        let mut s = 0.0;
        let mut hit = false;
        for term in tok(query) {
            let df = toks.iter().filter(|d| d.contains(&term)).count() as f64;
            let tf = toks[i].iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avg));
        }
        if hit {
            out.insert(id.clone(), s);
        }
    }
    out
}

proptest! {
    #[test]
    fn bm25_matches_oracle(
        docs in proptest::collection::vec(proptest::collection::vec("(alpha|beta|gamma|delta|eps)[.,!]?", 1..12), 1..12),
        query in proptest::collection::vec("(Alpha|beta|zeta|gamma)", 1..4),
    ) {
        let docs: Vec<(String, String)> = docs.into_iter().enumerate().map(|(i, w)| (format!("d{i:02}"), w.join(" "))).collect();
        let query = query.join(" ");
        let store = CorpusStore::from_pairs(Arc::new(WhitespaceTokenizer), docs.clone()).unwrap();
        let got = lexical_topk(&store, "q", &query, 100).unwrap();
        let want = bm25_oracle(&docs, &query, 0.9, 0.4);
        prop_assert_eq!(got.len(), want.len());
        let mut prev: Option<(f64, String)> = None;
        for e in got.entries() {
            prop_assert!((e.score - want[&e.docid]).abs() < 1e-9);
            if let Some((s, id)) = &prev {
                prop_assert!(*s > e.score || (*s == e.score && *id < e.docid));
            }
            prev = Some((e.score, e.docid.clone()));
        }
        let ids: HashSet<&String> = got.entries().iter().map(|e| &e.docid).collect();
        prop_assert_eq!(ids.len(), got.len());
    }
}

#[test]
fn vectors_file_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (m, v) = (dir.path().join("m.jsonl"), dir.path().join("v.bin"));
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&3u32.to_le_bytes());
    bytes.extend_from_slice(&[0u8; 20]);
    std::fs::write(&v, bytes).unwrap();
    std::fs::write(&m, "{\"docid\":\"a\",\"row\":0}\n{\"docid\":\"b\",\"row\":1}\n").unwrap();
    let err = load_embeddings(&m, &v).unwrap_err();
    assert!(matches!(err, RetrievalError::SizeMismatch { expected: 32, actual: 28, .. }), "{err}");
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let index = EmbeddingIndex::from_rows(2, vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])]).unwrap();
    let (m, v) = (dir.path().join("m.jsonl"), dir.path().join("v.bin"));
    index.write(&m, &v).unwrap();

    std::fs::write(&m, "{\"docid\":\"a\",\"row\":0}\n{\"docid\":\"b\",\"row\":2}\n").unwrap();
    assert!(matches!(load_embeddings(&m, &v), Err(RetrievalError::RowOutOfRange { row: 2, .. })));

    std::fs::write(&m, "{\"docid\":\"a\",\"row\":0}\n").unwrap();
    assert!(matches!(load_embeddings(&m, &v), Err(RetrievalError::UnmappedRow(1))));

    std::fs::write(&m, "{\"docid\":\"a\",\"row\":0}\n{\"docid\":\"a\",\"row\":1}\n").unwrap();
    assert!(matches!(load_embeddings(&m, &v), Err(RetrievalError::Manifest { line: 2, .. })));
}
