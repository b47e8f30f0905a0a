mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use common::{greek_ascii_alphabet, oracle};
use nomos::corpus::{pack_sequences, split, EntityTypeSet, SplitSpec, Tag};
use nomos::metrics::{score_classification, score_ner};
use nomos::textnorm::{normalize, transcode, Encoding, NormConfig};
use nomos::tokenizer::{train_bpe, SpecialTokenNames, TokenizerModel};

fn text() -> impl Strategy<Value = String> {
    let alphabet = greek_ascii_alphabet();
    prop::collection::vec(prop::sample::select(alphabet), 0..60).prop_map(|v| v.into_iter().collect())
}

fn tokenizer() -> &'static TokenizerModel {
    static TOK: OnceLock<TokenizerModel> = OnceLock::new();
    TOK.get_or_init(|| {
        let corpus = [
            "ο νόμος 4412/2016 για τις δημόσιες συμβάσεις",
            "το υπουργείο οικονομικών εκδίδει απόφαση",
            "η επιτροπή ανταγωνισμού στην αθήνα",
        ];
        train_bpe(&corpus, 320, &SpecialTokenNames::default()).unwrap().0
    })
}

fn tag_seq(types: usize) -> impl Strategy<Value = Vec<Tag>> {
    let names = EntityTypeSet::default().types()[..types].to_vec();
    let tag = (0..3u8, prop::sample::select(names)).prop_map(|(k, t)| match k {
        0 => Tag::Outside,
        1 => Tag::Begin(t),
        _ => Tag::Inside(t),
    });
    prop::collection::vec(tag, 0..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn normalize_is_idempotent(s in text()) {
        for cfg in [NormConfig::default(), NormConfig::new(true, false, true, true).unwrap(), NormConfig::new(false, false, false, false).unwrap()] {
            let once = normalize(&s, &cfg);
            prop_assert_eq!(normalize(&once, &cfg), once);
        }
    }

    #[test]
    fn legacy_encodings_converge(s in text()) {
        let cfg = NormConfig::default();
        let reference = normalize(&s, &cfg);
        for enc in [Encoding::Windows1253, Encoding::Iso8859_7] {
            let bytes = enc.encode_legacy(&s).expect("alphabet is representable");
            let t = transcode(&bytes, enc);
            prop_assert_eq!(t.replacements, 0);
            prop_assert_eq!(normalize(&t.text, &cfg), reference.clone());
        }
    }

    #[test]
    fn tokenizer_roundtrips(s in text()) {
        let tok = tokenizer();
        let n = normalize(&s, &NormConfig::default());
        let enc = tok.encode(&n);
        prop_assert_eq!(tok.decode(&enc.ids, false).unwrap(), n);
        let special = tok.specials();
        prop_assert!(enc.ids.iter().all(|&id| !special.is_special(id) && (id as usize) < tok.vocab_size()));
    }

    #[test]
    fn split_partitions(n in 3usize..400, seed in any::<u64>()) {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let parts = split((0..n).collect::<Vec<_>>(), &spec).unwrap();
        let (a, b, c) = spec.sizes(n);
        prop_assert_eq!((parts.train.len(), parts.val.len(), parts.test.len()), (a, b, c));
        let all: BTreeSet<usize> = parts.train.iter().chain(&parts.val).chain(&parts.test).copied().collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn packing_preserves_tokens(docs in prop::collection::vec(prop::collection::vec(5u32..300, 0..40), 0..12), max_len in 3usize..50) {
        let tok = tokenizer();
        let sp = tok.specials();
        let packed = pack_sequences(&docs, max_len, sp).unwrap();
        let mut content = Vec::new();
        for p in &packed {
            prop_assert_eq!(p.ids.len(), max_len);
            prop_assert_eq!(p.attention_mask.len(), max_len);
            let real = p.attention_mask.iter().filter(|&&m| m == 1).count();
            prop_assert!(p.attention_mask[..real].iter().all(|&m| m == 1));
            prop_assert!(p.ids[real..].iter().all(|&id| id == sp.pad.id));
            prop_assert!(real > 0);
            content.extend(p.ids[..real].iter().copied().filter(|&id| id != sp.bos.id && id != sp.eos.id));
        }
        let expected: Vec<u32> = docs.concat();
        prop_assert_eq!(content, expected);
    }

    #[test]
    fn ner_scores_match_oracle(pairs in prop::collection::vec((tag_seq(4), tag_seq(4)), 1..6)) {
        let types = EntityTypeSet::default();
        let gold: Vec<Vec<Tag>> = pairs.iter().map(|(g, p)| {
            let mut g = g.clone();
            g.truncate(p.len());
            g
        }).collect();
        let pred: Vec<Vec<Tag>> = pairs.iter().zip(&gold).map(|((_, p), g)| p[..g.len()].to_vec()).collect();
        let got = score_ner(&gold, &pred, &types).unwrap();
        let want = oracle::score(&gold, &pred, types.types());
        prop_assert_eq!((got.micro.precision, got.micro.recall, got.micro.f1), want.micro);
        prop_assert_eq!(got.macro_f1, want.macro_f1);
        prop_assert_eq!(got.weighted_f1, want.weighted_f1);
        for (s, w) in got.per_type.iter().zip(&want.per_type) {
            prop_assert_eq!((&s.entity_type, s.prf.precision, s.prf.recall, s.prf.f1, s.support), (&w.0, w.1, w.2, w.3, w.4));
        }
    }

    #[test]
    fn single_label_micro_scores_coincide(pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200)) {
        let (gold, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = score_classification(&gold, &pred, 7, None).unwrap();
        prop_assert_eq!(r.precision, r.accuracy);
        prop_assert_eq!(r.recall, r.accuracy);
        prop_assert_eq!(r.f1, r.accuracy);
    }
}
