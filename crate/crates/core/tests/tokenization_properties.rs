use mvaema_core::tokenization::{
    decode_tokens, encode_text, tokenize, Mode, Vocab, CLS, DECODE, ENCODE, EOS, PAD, RESERVED, UNK,
};
use proptest::prelude::*;

const CORPUS: [&str; 3] = [
    "the particles are spherical and uniform in size",
    "long fibres cross over a porous film with sharp edges",
    "patterned surface of a mems device, with 3 rows",
];

fn vocab() -> Vocab {
    Vocab::build(&CORPUS, 1).unwrap()
}

fn in_vocab_text() -> impl Strategy<Value = String> {
    let words: Vec<String> = CORPUS.iter().flat_map(|s| tokenize(s)).collect();
    prop::collection::vec(prop::sample::select(words), 0..40).prop_map(|w| w.join(" "))
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Cls), Just(Mode::Encode), Just(Mode::Decode)]
}

proptest! {
    #[test]
    fn decode_inverts_encode(text in in_vocab_text(), m in mode()) {
        let v = vocab();
        let seq = encode_text(&text, &v, m, 64).unwrap();
        prop_assert_eq!(decode_tokens(&seq.ids, &v).unwrap(), text);
    }

    #[test]
    fn mask_counts_real_tokens(text in in_vocab_text(), m in mode(), max in 1usize..50, pad in 0usize..20) {
        let v = vocab();
        let seq = encode_text(&text, &v, m, max).unwrap();
        prop_assert!(seq.len() <= max);
        let frame = seq.frame_index().unwrap();
        let want = match m { Mode::Cls => CLS, Mode::Encode => ENCODE, Mode::Decode => DECODE };
        prop_assert_eq!(seq.ids[frame], want);
        let padded = seq.padded(max + pad);
        prop_assert_eq!(padded.mask.len(), padded.ids.len());
        let real = padded.ids.iter().filter(|&&i| i != PAD).count();
        prop_assert_eq!(padded.mask.iter().filter(|&&b| b == 1).count(), real);
    }

    #[test]
    fn unseen_words_become_unk(word in "[q-z]{6,10}") {
        let v = vocab();
        prop_assume!(!v.contains(&word));
        let seq = encode_text(&format!("the {word}"), &v, Mode::Cls, 64).unwrap();
        prop_assert_eq!(seq.ids[2], UNK);
    }
}

#[test]
fn reserved_ids_are_pinned() {
    let v = vocab();
    for (id, tok) in RESERVED.iter().enumerate() {
        assert_eq!(v.id(tok), Some(id));
    }
    assert_eq!([PAD, CLS, ENCODE, DECODE, EOS, UNK], [0, 1, 2, 3, 4, 5]);
    let other = Vocab::build(&["zebra zebra yak"], 1).unwrap();
    assert_eq!(other.token(4), Some("<eos>"));
    assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
}

#[test]
fn long_text_truncates_to_limit() {
    let v = vocab();
    let text = vec!["particles"; 200].join(" ");
    for m in [Mode::Cls, Mode::Encode, Mode::Decode] {
        let seq = encode_text(&text, &v, m, 64).unwrap();
        assert_eq!(seq.len(), 64);
        assert!(seq.frame_index().is_ok());
    }
    assert_eq!(decode_tokens(&[], &v).unwrap(), "");
    assert!(decode_tokens(&[v.len()], &v).is_err());
}
