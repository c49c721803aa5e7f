use deepsearch_core::corpus::{tokenizer_from_id, ByteChunkTokenizer, CorpusStore, Tokenizer, WhitespaceTokenizer};
use proptest::prelude::*;
use std::sync::Arc;

fn tokenizers() -> Vec<Box<dyn Tokenizer>> {
    vec![Box::new(WhitespaceTokenizer), Box::new(ByteChunkTokenizer)]
}

proptest! {
    #[test]
    fn truncation_respects_limit_and_is_a_prefix(text in "\\PC{0,200}", limit in 0usize..80) {
        for t in tokenizers() {
            let cut = t.truncate_tokens(&text, limit);
            prop_assert!(t.count_tokens(cut) <= limit);
            prop_assert!(text.starts_with(cut));
            prop_assert_eq!(t.truncate_tokens(cut, limit), cut);
            if t.count_tokens(&text) <= limit {
                prop_assert_eq!(cut, text.as_str());
            }
        }
    }

    #[test]
    fn truncation_keeps_as_many_tokens_as_allowed(text in "[a-z ]{0,120}", limit in 0usize..40) {
        let t = WhitespaceTokenizer;
        let cut = t.truncate_tokens(&text, limit);
        prop_assert_eq!(t.count_tokens(cut), t.count_tokens(&text).min(limit));
    }

    #[test]
    fn whitespace_count_doubles(text in "\\PC{0,100}") {
        let t = WhitespaceTokenizer;
        let doubled = format!("{text} {text}");
        prop_assert_eq!(t.count_tokens(&doubled), 2 * t.count_tokens(&text));
    }

    #[test]
    fn byte_chunks_are_subadditive(a in "\\PC{0,60}", b in "\\PC{0,60}") {
        let t = ByteChunkTokenizer;
        let ab = format!("{a}{b}");
        prop_assert!(t.count_tokens(&ab) <= t.count_tokens(&a) + t.count_tokens(&b));
        prop_assert_eq!(t.count_tokens(&a), a.len().div_ceil(4));
    }

    #[test]
    fn corpus_jsonl_round_trips(texts in proptest::collection::vec("\\PC{0,40}", 0..8)) {
        let tok = tokenizer_from_id("whitespace").unwrap();
        let pairs: Vec<(String, String)> = texts.iter().enumerate().map(|(i, t)| (format!("d{i}"), t.clone())).collect();
        let store = CorpusStore::from_pairs(Arc::clone(&tok), pairs).unwrap();
        let mut buf = Vec::new();
        store.write_jsonl(&mut buf).unwrap();
        let back = deepsearch_core::corpus::read_corpus(buf.as_slice(), tok).unwrap();
        prop_assert_eq!(back, store);
    }
}

#[test]
fn unknown_tokenizer_is_rejected() {
    assert!(tokenizer_from_id("gpt-9").is_err());
}
