//! Property tests over tokenization, vocabulary construction, concept
//! labels, and the manifest format.

use proptest::prelude::*;
use tempfile::tempdir;

use vitcap_core::data::{read_manifest, write_manifest, ManifestEntry, Split};
use vitcap_core::text::{concept_labels, tokenize, ConceptMode, Vocab};

fn caption_strategy() -> impl Strategy<Value = String> {
    // Lowercase words, digits, punctuation, stray unicode and whitespace.
    proptest::collection::vec(
        prop_oneof![
            "[a-z]{1,8}",
            "[0-9]{1,3}",
            Just("the".to_string()),
            Just("a".to_string()),
            Just("on".to_string()),
            Just(",".to_string()),
            Just("!?".to_string()),
            Just("  ".to_string()),
            Just("Ünïcode".to_string()),
        ],
        1..12,
    )
    .prop_map(|words| words.join(" "))
}

proptest! {
    #[test]
    fn tokenize_is_idempotent_through_rejoin(caption in caption_strategy()) {
        let once = tokenize(&caption);
        let again = tokenize(&once.join(" "));
        prop_assert_eq!(once, again);
    }

    #[test]
    fn tokens_are_lowercase_alphanumeric(caption in caption_strategy()) {
        for tok in tokenize(&caption) {
            prop_assert!(!tok.is_empty());
            prop_assert!(tok.chars().all(|c| c.is_alphanumeric() && !c.is_uppercase()));
        }
    }

    #[test]
    fn keyword_labels_are_a_subset_of_all_token_labels(
        captions in proptest::collection::vec(caption_strategy(), 1..4)
    ) {
        let vocab = Vocab::build(captions.iter().map(|s| s.as_str()), 1);
        let all = concept_labels(&captions, &vocab, ConceptMode::AllTokens).unwrap();
        let keywords = concept_labels(&captions, &vocab, ConceptMode::Keywords).unwrap();
        for id in keywords.ids() {
            prop_assert!(all.contains(*id));
        }
        // No label is ever a special token.
        for id in all.ids() {
            prop_assert!(!Vocab::is_special(*id));
        }
    }

    #[test]
    fn vocab_ids_are_dense_and_stable(
        captions in proptest::collection::vec(caption_strategy(), 1..6)
    ) {
        let vocab = Vocab::build(captions.iter().map(|s| s.as_str()), 1);
        // Every non-special token maps back to its own id, and ids cover
        // 0..len without gaps.
        for id in 0..vocab.len() as u32 {
            let tok = vocab.token(id).unwrap().to_string();
            if !Vocab::is_special(id) {
                prop_assert_eq!(vocab.id(&tok), Some(id));
            }
        }
        let rebuilt = Vocab::build(captions.iter().map(|s| s.as_str()), 1);
        prop_assert_eq!(vocab.tokens(), rebuilt.tokens());
        prop_assert_eq!(vocab.sha256_hex(), rebuilt.sha256_hex());
    }

    #[test]
    fn encode_decode_recovers_in_vocabulary_text(caption in caption_strategy()) {
        let vocab = Vocab::build(std::iter::once(caption.as_str()), 1);
        let ids = vocab.encode(&caption);
        let text = vocab.decode(&ids).unwrap();
        prop_assert_eq!(tokenize(&caption), tokenize(&text));
    }

    #[test]
    fn manifest_round_trips(
        n in 1usize..6,
        tags in proptest::bool::ANY,
        caption in caption_strategy()
    ) {
        let entries: Vec<ManifestEntry> = (0..n)
            .map(|i| ManifestEntry {
                image: format!("images/img{i:03}.ppm"),
                captions: vec![caption.clone(), format!("variant {i}")],
                tags: tags.then(|| vec![("circle".to_string(), 0.9), ("red".to_string(), 0.4)]),
                split: if i % 2 == 0 { Split::Train } else { Split::Val },
            })
            .collect();
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        prop_assert_eq!(entries, back);
    }
}
