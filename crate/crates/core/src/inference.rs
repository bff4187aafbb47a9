//! Answer generation, VQA and zero-shot classification.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use mvaema_tensor::{Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::dataset::{probe_text, InstructionRecord};
use crate::error::{CoreError, Result};
use crate::imaging::{load_image_file, patchify, PatchSequence, NUM_PATCHES, PATCH_DIM};
use crate::model::{Model, Net};
use crate::tokenization::{decode_tokens, decoder_pair, frame_ids, Mode, TokenSequence, Vocab, CLS, DECODE, ENCODE, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    /// Beam search; finished hypotheses are ranked by
    /// `log p / len^length_penalty`.
    Beam { k: usize, length_penalty: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub decoding: Decoding,
    /// Maximum generated tokens, counting `<eos>`.
    pub max_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            decoding: Decoding::Greedy,
            max_len: crate::tokenization::MAX_ANSWER_LEN,
        }
    }
}

impl GenerationConfig {
    pub fn with_max_len(self, max_len: usize) -> Self {
        GenerationConfig { max_len, ..self }
    }

    pub fn validate(&self, model_max: usize) -> Result<()> {
        if self.max_len == 0 {
            return Err(CoreError::contract("generate", "max_len must be at least 1"));
        }
        if self.max_len > model_max {
            return Err(CoreError::contract(
                "generate",
                format!("max_len {} exceeds the model's answer length {model_max}", self.max_len),
            ));
        }
        if let Decoding::Beam { k, length_penalty } = self.decoding {
            if k == 0 {
                return Err(CoreError::contract("generate", "beam width must be at least 1"));
            }
            if !length_penalty.is_finite() {
                return Err(CoreError::contract("generate", "length penalty must be finite"));
            }
        }
        Ok(())
    }
}

/// Tokens the decoder may never emit.
const BANNED: [usize; 4] = [PAD, CLS, ENCODE, DECODE];

fn image_var<'t, T: Real>(tape: &'t Tape<T>, patches: &PatchSequence) -> Result<Var<'t, T>> {
    let data = patches.data().iter().map(|&x| T::of(x as f64)).collect();
    Ok(tape.constant_from(&[NUM_PATCHES, PATCH_DIM], data)?)
}

/// Log-softmax of the last decoder position given `tokens` so far.
fn next_log_probs<'t, T: Real>(
    net: &Net<'t, '_, T>,
    prefix: &[usize],
    memory: Var<'t, T>,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let tape = net.tape();
    let mark = tape.mark();
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(DECODE);
    ids.extend_from_slice(tokens);
    let seq = TokenSequence {
        mask: vec![1; ids.len()],
        ids,
        mode: Mode::Decode,
    };
    let hidden = net.decode_hidden(prefix, &seq, memory)?;
    let last = hidden.row(seq.len() - 1)?;
    let logits: Vec<f64> = net.lm_head(last)?.to_vec().into_iter().map(T::as_f64).collect();
    tape.rewind(mark);
    let mut masked = logits;
    for b in BANNED {
        masked[b] = f64::NEG_INFINITY;
    }
    let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(CoreError::contract("generate", "non-finite decoder logits"));
    }
    let lse = max + masked.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(masked.into_iter().map(|x| x - lse).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Generates answer tokens for an image and question. The result excludes
/// `<decode>` and `<eos>`.
pub fn generate<T: Real>(model: &Model<T>, patches: &PatchSequence, question: &[usize], gcfg: &GenerationConfig) -> Result<Vec<usize>> {
    gcfg.validate(model.config.max_answer_len)?;
    let tape = Tape::<T>::inference();
    let net = model.bind(&tape);
    let image = net.encode_image(image_var(&tape, patches)?)?;
    let (prefix, memory) = net.decoder_context(question, image.seq)?;
    net.prepare_lm_head()?;
    match gcfg.decoding {
        Decoding::Greedy => {
            let mut out = Vec::new();
            while out.len() < gcfg.max_len {
                let lp = next_log_probs(&net, &prefix, memory, &out)?;
                let tok = argmax(&lp);
                if tok == EOS {
                    break;
                }
                out.push(tok);
            }
            Ok(out)
        }
        Decoding::Beam { k, length_penalty } => beam(&net, &prefix, memory, gcfg.max_len, k, length_penalty),
    }
}

fn beam<'t, T: Real>(
    net: &Net<'t, '_, T>,
    prefix: &[usize],
    memory: Var<'t, T>,
    max_len: usize,
    k: usize,
    alpha: f64,
) -> Result<Vec<usize>> {
    let norm = |score: f64, len: usize| score / (len.max(1) as f64).powf(alpha);
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, (toks, score)) in alive.iter().enumerate() {
            let lp = next_log_probs(net, prefix, memory, toks)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((score + l, b, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for &(score, b, tok) in cands.iter().take(k) {
            let toks = alive[b].0.clone();
            if tok == EOS {
                let len = toks.len() + 1;
                finished.push((toks, norm(score, len)));
            } else {
                let mut t = toks;
                t.push(tok);
                next.push((t, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= k {
            break;
        }
    }
    // hypotheses cut off by max_len compete with the finished ones
    for (toks, score) in alive {
        let len = toks.len();
        finished.push((toks, norm(score, len)));
    }
    finished.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(finished.into_iter().next().map(|(t, _)| t).unwrap_or_default())
}

/// Loads the record's image and answers its instruction.
pub fn answer_vqa(model: &Model<f32>, vocab: &Vocab, record: &InstructionRecord, base: &Path, gcfg: &GenerationConfig) -> Result<String> {
    let img = load_image_file(&record.image_path(base))?;
    let patches = patchify(&img)?;
    let ids = generate(model, &patches, &vocab.ids_of(&record.instruction), gcfg)?;
    decode_tokens(&ids, vocab)
}

/// How candidate categories are scored against an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Matching-head probability of the probe text.
    #[default]
    Itm,
    /// Mean per-token decoder log-likelihood of the probe text.
    LmLikelihood,
}

impl FromStr for Scoring {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itm" => Ok(Scoring::Itm),
            "lm" | "lm_likelihood" => Ok(Scoring::LmLikelihood),
            other => Err(CoreError::UnknownVariant {
                kind: "scoring rule",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub category: Category,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Ranks `categories` for an image by probe-text score, best first; equal
/// scores are ordered by category name.
pub fn classify_zero_shot<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    patches: &PatchSequence,
    categories: &[Category],
    scoring: Scoring,
) -> Result<Vec<ClassScore>> {
    if categories.is_empty() {
        return Err(CoreError::contract("classify_zero_shot", "no categories"));
    }
    let cfg = &model.config;
    let tape = Tape::<T>::inference();
    let net = model.bind(&tape);
    let image = net.encode_image(image_var(&tape, patches)?)?;
    net.prepare_lm_head()?;
    let mut scores = Vec::with_capacity(categories.len());
    for &cat in categories {
        let words = vocab.ids_of(&probe_text(cat));
        let mark = tape.mark();
        let score = match scoring {
            Scoring::Itm => {
                let seq = frame_ids(&words, Mode::Encode, cfg.max_text_len)?;
                let logit = net.fuse(&seq, image.seq)?.itm_logit.item()?.as_f64();
                1.0 / (1.0 + (-logit).exp())
            }
            Scoring::LmLikelihood => {
                let (input, targets) = decoder_pair(&words, cfg.max_answer_len)?;
                let (prefix, memory) = net.decoder_context(&[], image.seq)?;
                let logits = net.decoder_forward(&prefix, &input, memory)?;
                let w = vec![T::one(); targets.len()];
                -logits.cross_entropy(&targets, &w)?.item()?.as_f64()
            }
        };
        tape.rewind(mark);
        scores.push((cat, score));
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name())));
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(i, (category, score))| ClassScore {
            category,
            score,
            rank: i + 1,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub image_path: std::path::PathBuf,
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub answer: String,
    pub tokens: usize,
    pub latency_ms: u64,
}

/// Answers one batch request; relative image paths resolve against `base`.
pub fn answer_request(model: &Model<f32>, vocab: &Vocab, req: &BatchRequest, base: &Path, gcfg: &GenerationConfig) -> Result<BatchResponse> {
    let start = Instant::now();
    let path = if req.image_path.is_absolute() {
        req.image_path.clone()
    } else {
        base.join(&req.image_path)
    };
    let patches = patchify(&load_image_file(&path)?)?;
    let ids = generate(model, &patches, &vocab.ids_of(&req.instruction), gcfg)?;
    Ok(BatchResponse {
        answer: decode_tokens(&ids, vocab)?,
        tokens: ids.len(),
        latency_ms: start.elapsed().as_millis() as u64,
    })
}
