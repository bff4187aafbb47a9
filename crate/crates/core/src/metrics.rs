//! Text-generation and classification metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::error::{CoreError, Result};

/// Lowercased whitespace tokens; punctuation stays attached to its word.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn ngrams<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with clipped counts against every reference and the brevity
/// penalty taken from the reference closest in length. Zero precisions are
/// replaced by 1e-9.
pub fn bleu_n<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(CoreError::contract("bleu_n", format!("order must be 1..=4, got {n}")));
    }
    if references.is_empty() || references.iter().all(Vec::is_empty) {
        return Err(CoreError::contract("bleu_n", "empty reference set"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngrams(candidate, k);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = cand.values().sum::<usize>().max(1);
        let p = matched as f64 / total as f64;
        log_sum += if p > 0.0 { p } else { 1e-9 }.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 of clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::contract("rouge_n", "order must be at least 1"));
    }
    if reference.is_empty() {
        return Err(CoreError::contract("rouge_n", "empty reference"));
    }
    let cand = ngrams(candidate, n);
    let refg = ngrams(reference, n);
    let overlap: usize = cand.iter().map(|(g, &c)| c.min(refg.get(g).copied().unwrap_or(0))).sum();
    let (nc, nr) = (cand.values().sum::<usize>(), refg.values().sum::<usize>());
    if overlap == 0 {
        return Ok(0.0);
    }
    Ok(f1(overlap as f64 / nc as f64, overlap as f64 / nr as f64))
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 over the longest common subsequence.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(CoreError::contract("rouge_l", "empty reference"));
    }
    let l = lcs(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    Ok(f1(l as f64 / candidate.len() as f64, l as f64 / reference.len() as f64))
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: f64 = 3.0;

/// Unigram METEOR with exact then Porter-stem matching and no synonym stage.
/// Each candidate word aligns to the first unused reference word it matches.
pub fn meteor<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    let mut cand_aligned = vec![false; candidate.len()];
    let mut align: Vec<(usize, usize)> = Vec::new();
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == w.as_ref()) {
            used[j] = true;
            cand_aligned[i] = true;
            align.push((i, j));
        }
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let ref_stems: Vec<String> = reference.iter().map(|w| stemmer.stem(w.as_ref()).into_owned()).collect();
    for (i, w) in candidate.iter().enumerate() {
        if cand_aligned[i] {
            continue;
        }
        let stem = stemmer.stem(w.as_ref());
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && ref_stems[j] == stem) {
            used[j] = true;
            align.push((i, j));
        }
    }
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    align.sort_unstable();
    let chunks = 1 + align
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl TextScores {
    pub const NAMES: [&'static str; 6] = ["BLEU-2", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "METEOR"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu2, self.bleu4, self.rouge1, self.rouge2, self.rouge_l, self.meteor]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        TextScores {
            bleu2: v[0],
            bleu4: v[1],
            rouge1: v[2],
            rouge2: v[3],
            rouge_l: v[4],
            meteor: v[5],
        }
    }
}

/// All text metrics for one candidate against one reference.
pub fn score_pair(candidate: &str, reference: &str) -> Result<TextScores> {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if r.is_empty() {
        return Err(CoreError::contract("score_pair", "empty reference"));
    }
    let refs = [r.clone()];
    Ok(TextScores {
        bleu2: bleu_n(&c, &refs, 2)?,
        bleu4: bleu_n(&c, &refs, 4)?,
        rouge1: rouge_n(&c, &r, 1)?,
        rouge2: rouge_n(&c, &r, 2)?,
        rouge_l: rouge_l(&c, &r)?,
        meteor: meteor(&c, &r),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub samples: Vec<TextScores>,
    /// Mean of the per-sample scores.
    pub mean: TextScores,
}

impl VqaReport {
    /// Scores `(candidate, reference)` pairs.
    pub fn from_pairs<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::contract("vqa_report", "no samples"));
        }
        let samples = pairs
            .iter()
            .map(|(c, r)| score_pair(c.as_ref(), r.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = [0.0; 6];
        for s in &samples {
            for (acc, v) in sum.iter_mut().zip(s.values()) {
                *acc += v;
            }
        }
        let n = samples.len() as f64;
        let mean = TextScores::from_values(sum.map(|x| x / n));
        Ok(VqaReport { samples, mean })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n|", TextScores::NAMES.join(" | "));
        s.push_str(&"---|".repeat(6));
        s.push('\n');
        let cells: Vec<String> = self.mean.values().iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
        s
    }
}

/// Fraction of samples whose label is among the first `k` entries of its
/// ranking.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(CoreError::contract("topk_accuracy", "k must be at least 1"));
    }
    if rankings.len() != labels.len() {
        return Err(CoreError::contract("topk_accuracy", "rankings and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(CoreError::contract("topk_accuracy", "no samples"));
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|x| x == *l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// `matrix[true][predicted]`.
    pub matrix: Vec<Vec<usize>>,
    pub per_class: Vec<Prf>,
    pub macro_avg: Prf,
    pub micro_avg: Prf,
    pub accuracy: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion matrix and one-vs-rest precision/recall/F1 over `classes`
/// classes.
pub fn prf_confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionReport> {
    if predictions.len() != labels.len() {
        return Err(CoreError::contract("prf_confusion", "predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(CoreError::contract("prf_confusion", "no samples"));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&x| x >= classes) {
        return Err(CoreError::contract("prf_confusion", format!("class {bad} outside 0..{classes}")));
    }
    let mut matrix = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        matrix[l][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..classes {
        let tp = matrix[c][c];
        let support: usize = matrix[c].iter().sum();
        let predicted: usize = matrix.iter().map(|row| row[c]).sum();
        tp_all += tp;
        fp_all += predicted - tp;
        fn_all += support - tp;
        let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
        per_class.push(Prf {
            precision,
            recall,
            f1: f1(precision, recall),
            support,
        });
    }
    let n = classes as f64;
    let macro_avg = Prf {
        precision: per_class.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|p| p.f1).sum::<f64>() / n,
        support: labels.len(),
    };
    let (mp, mr) = (ratio(tp_all, tp_all + fp_all), ratio(tp_all, tp_all + fn_all));
    let micro_avg = Prf {
        precision: mp,
        recall: mr,
        f1: f1(mp, mr),
        support: labels.len(),
    };
    Ok(ConfusionReport {
        matrix,
        per_class,
        macro_avg,
        micro_avg,
        accuracy: ratio(tp_all, labels.len()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub categories: Vec<Category>,
    pub top1: f64,
    pub top5: f64,
    pub confusion: ConfusionReport,
}

impl ClassificationReport {
    /// `rankings[i]` orders category indices (into `categories`) best first.
    pub fn new(categories: Vec<Category>, rankings: &[Vec<usize>], labels: &[usize]) -> Result<Self> {
        let top1 = topk_accuracy(rankings, labels, 1)?;
        let top5 = topk_accuracy(rankings, labels, 5)?;
        let preds = rankings
            .iter()
            .map(|r| r.first().copied().ok_or_else(|| CoreError::contract("classification", "empty ranking")))
            .collect::<Result<Vec<_>>>()?;
        let confusion = prf_confusion(&preds, labels, categories.len())?;
        Ok(ClassificationReport {
            categories,
            top1,
            top5,
            confusion,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("Top-1: {:.3}  Top-5: {:.3}\n\n", self.top1, self.top5);
        s.push_str("| Category | Precision | Recall | F1 | Support |\n|---|---|---|---|---|\n");
        let rows = self
            .categories
            .iter()
            .map(|c| c.name().to_string())
            .zip(&self.confusion.per_class)
            .chain([
                ("macro".to_string(), &self.confusion.macro_avg),
                ("micro".to_string(), &self.confusion.micro_avg),
            ]);
        for (name, p) in rows {
            let _ = writeln!(s, "| {name} | {:.3} | {:.3} | {:.3} | {} |", p.precision, p.recall, p.f1, p.support);
        }
        s
    }
}

/// `(base - variant) / base`, in percent.
pub fn percentage_drop(base: f64, variant: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() {
        return Err(CoreError::contract("percentage_drop", "baseline must be finite and non-zero"));
    }
    Ok((base - variant) / base * 100.0)
}

/// `(ours - other) / other`, in percent.
pub fn relative_improvement(ours: f64, other: f64) -> Result<f64> {
    if other == 0.0 || !other.is_finite() {
        return Err(CoreError::contract("relative_improvement", "reference score must be finite and non-zero"));
    }
    Ok((ours - other) / other * 100.0)
}
