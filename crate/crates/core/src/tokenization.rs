//! Word-level tokenizer, vocabulary and frame tokens.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const ENCODE: usize = 2;
pub const DECODE: usize = 3;
pub const EOS: usize = 4;
pub const UNK: usize = 5;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 6] = ["<pad>", "<cls>", "<encode>", "<decode>", "<eos>", "<unk>"];

pub const MAX_QUESTION_LEN: usize = 64;
pub const MAX_ANSWER_LEN: usize = 96;

/// Lowercases and splits into alphanumeric runs and single punctuation
/// characters. Whitespace only separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CoreError::contract("vocab", "reserved tokens missing or reordered"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(CoreError::contract("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Vocabulary over the corpus word types seen at least `min_freq` times,
    /// ordered by descending frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(CoreError::contract("build_vocab", "min_freq must be at least 1"));
        }
        if corpus.is_empty() {
            return Err(CoreError::contract("build_vocab", "empty corpus"));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for t in tokenize(doc.as_ref()) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Ids of the tokens of `text`, unknown words mapped to `<unk>`.
    pub fn ids_of(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Which frame token a sequence carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// `<cls>` first, read by the unimodal text encoder.
    Cls,
    /// `<encode>` last, read by the fusion encoder.
    Encode,
    /// `<decode>` first, read by the decoder.
    Decode,
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Mode::Cls),
            "encode" => Ok(Mode::Encode),
            "decode" => Ok(Mode::Decode),
            other => Err(CoreError::UnknownVariant {
                kind: "text mode",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cls => "cls",
            Mode::Encode => "encode",
            Mode::Decode => "decode",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 1 for real tokens, 0 for padding.
    pub mask: Vec<u8>,
    pub mode: Mode,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `<pad>` up to `len` positions.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.mask.push(0);
        }
        self
    }

    /// Index of the frame token.
    pub fn frame_index(&self) -> Result<usize> {
        let (want, name) = match self.mode {
            Mode::Cls => (CLS, "<cls>"),
            Mode::Encode => (ENCODE, "<encode>"),
            Mode::Decode => (DECODE, "<decode>"),
        };
        let idx = match self.mode {
            Mode::Encode => self.real_len().checked_sub(1),
            _ => Some(0),
        };
        match idx {
            Some(i) if self.ids.get(i) == Some(&want) => Ok(i),
            _ => Err(CoreError::Frame(format!("{} sequence lacks {name}", self.mode))),
        }
    }
}

/// Frames `words` for `mode`, truncating the words so the whole sequence fits
/// in `max_len` positions with the frame token kept.
pub fn frame_ids(words: &[usize], mode: Mode, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(CoreError::contract("encode_text", "max_len must be at least 1"));
    }
    let keep = words.len().min(max_len - 1);
    let mut ids = Vec::with_capacity(keep + 1);
    match mode {
        Mode::Cls => ids.push(CLS),
        Mode::Decode => ids.push(DECODE),
        Mode::Encode => {}
    }
    ids.extend_from_slice(&words[..keep]);
    if mode == Mode::Encode {
        ids.push(ENCODE);
    }
    let mask = vec![1; ids.len()];
    Ok(TokenSequence { ids, mask, mode })
}

pub fn encode_text(text: &str, vocab: &Vocab, mode: Mode, max_len: usize) -> Result<TokenSequence> {
    frame_ids(&vocab.ids_of(text), mode, max_len)
}

/// Decoder input and next-token targets for an answer: the input is
/// `<decode> w1 .. wn`, the targets `w1 .. wn <eos>`.
pub fn decoder_pair(answer_ids: &[usize], max_len: usize) -> Result<(TokenSequence, Vec<usize>)> {
    let input = frame_ids(answer_ids, Mode::Decode, max_len)?;
    let mut targets = input.ids[1..].to_vec();
    targets.push(EOS);
    Ok((input, targets))
}

/// Text of `ids` with frame, pad and end tokens removed.
pub fn decode_tokens(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or_else(|| {
            CoreError::contract("decode_tokens", format!("id {id} outside vocabulary of {}", vocab.len()))
        })?;
        if id < UNK {
            continue;
        }
        words.push(tok);
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["the cat sat on the mat", "a b a"], 1).unwrap()
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Plate-like, Rods."), ["plate", "-", "like", ",", "rods", "."]);
    }

    #[test]
    fn threshold_and_order() {
        let v = Vocab::build(&["a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("a"), Some(6));
        let w = vocab();
        // "the" and "a" both appear twice; ties go lexicographic
        assert_eq!(w.token(6), Some("a"));
        assert_eq!(w.token(7), Some("the"));
        assert_eq!(w, vocab());
    }

    #[test]
    fn build_errors() {
        assert!(Vocab::build(&["a"], 0).is_err());
        assert!(Vocab::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn framing() {
        let v = vocab();
        let s = encode_text("a b", &v, Mode::Cls, 64).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("a").unwrap(), v.id("b").unwrap()]);
        let e = encode_text("a b", &v, Mode::Encode, 64).unwrap();
        assert_eq!(*e.ids.last().unwrap(), ENCODE);
        assert_eq!(e.frame_index().unwrap(), 2);
        let d = encode_text("a z", &v, Mode::Decode, 64).unwrap();
        assert_eq!(d.ids[0], DECODE);
        assert!(d.ids.contains(&UNK));
    }

    #[test]
    fn truncation_keeps_frame() {
        let v = vocab();
        let long = vec!["cat"; 200].join(" ");
        for mode in [Mode::Cls, Mode::Encode, Mode::Decode] {
            let s = encode_text(&long, &v, mode, 64).unwrap();
            assert_eq!(s.len(), 64);
            assert!(s.frame_index().is_ok());
        }
    }

    #[test]
    fn decoding() {
        let v = vocab();
        let s = encode_text("the cat", &v, Mode::Cls, 64).unwrap();
        assert_eq!(decode_tokens(&s.ids, &v).unwrap(), "the cat");
        let a = v.id("a").unwrap();
        assert_eq!(decode_tokens(&[DECODE, a, EOS], &v).unwrap(), "a");
        assert_eq!(decode_tokens(&[], &v).unwrap(), "");
        assert!(decode_tokens(&[v.len()], &v).is_err());
    }

    #[test]
    fn decoder_targets_shifted() {
        let (input, targets) = decoder_pair(&[7, 8], 96).unwrap();
        assert_eq!(input.ids, vec![DECODE, 7, 8]);
        assert_eq!(targets, vec![7, 8, EOS]);
    }

    #[test]
    fn padding_and_mask() {
        let v = vocab();
        let s = encode_text("the cat", &v, Mode::Encode, 64).unwrap().padded(6);
        assert_eq!(s.len(), 6);
        assert_eq!(s.real_len(), 3);
        assert_eq!(s.frame_index().unwrap(), 2);
        assert!("beam".parse::<Mode>().is_err());
    }

    #[test]
    fn text_file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }
}
