//! Variant-by-variant retraining and the drop-versus-baseline report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imaging::PatchSequence;
use crate::inference::{generate, GenerationConfig};
use crate::metrics::{percentage_drop, TextScores, VqaReport};
use crate::model::{Model, ModelConfig, Variant};
use crate::dataset::Sample;
use crate::tokenization::{decode_tokens, Vocab};
use crate::trainer::{history_csv, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub scores: TextScores,
    /// Percentage drop of each metric against the full model.
    pub drops: TextScores,
    pub steps: usize,
    pub final_joint: f64,
    /// Per-step loss history as CSV.
    pub history: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub results: Vec<VariantResult>,
}

/// Greedy answers for `data`, scored against the reference answers.
pub fn evaluate_answers(model: &Model<f32>, vocab: &Vocab, data: &[Sample], gcfg: &GenerationConfig) -> Result<VqaReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for s in data {
        let patches = PatchSequence::from_data(s.patches.as_ref().clone())?;
        let ids = generate(model, &patches, &s.question, gcfg)?;
        pairs.push((decode_tokens(&ids, vocab)?, decode_tokens(&s.answer, vocab)?));
    }
    VqaReport::from_pairs(&pairs)
}

/// Trains the full model and every variant in `variants` from the same
/// initialization and seed, then scores each on `eval`. The full model is
/// always trained first and serves as the baseline.
pub fn run_ablation(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    variants: &[Variant],
    train_set: &[Sample],
    eval: &[Sample],
    vocab: &Vocab,
    gcfg: &GenerationConfig,
) -> Result<AblationReport> {
    if eval.is_empty() {
        return Err(CoreError::contract("run_ablation", "empty evaluation set"));
    }
    let mut order = vec![Variant::None];
    order.extend(variants.iter().copied().filter(|&v| v != Variant::None));
    let init = Model::init(model_config.clone(), cfg.seed)?;
    let mut results: Vec<VariantResult> = Vec::with_capacity(order.len());
    for variant in order {
        let vcfg = TrainConfig { variant, ..cfg.clone() };
        let out = train(&vcfg, init.clone(), train_set, &[])?;
        let report = evaluate_answers(&out.model, vocab, eval, gcfg)?;
        let scores = report.mean;
        let drops = match results.first() {
            None => TextScores::default(),
            Some(base) => {
                let mut d = [0.0; 6];
                for ((slot, b), v) in d.iter_mut().zip(base.scores.values()).zip(scores.values()) {
                    // a zero baseline has no defined relative drop
                    *slot = if b == 0.0 { 0.0 } else { percentage_drop(b, v)? };
                }
                TextScores::from_values(d)
            }
        };
        results.push(VariantResult {
            variant,
            label: variant.label().to_string(),
            scores,
            drops,
            steps: out.steps.len(),
            final_joint: out.final_step().map_or(f64::NAN, |s| s.joint),
            history: history_csv(&out.steps),
        });
    }
    Ok(AblationReport { seed: cfg.seed, results })
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| Variant | {} |\n|---|", TextScores::NAMES.join(" | "));
        s.push_str(&"---|".repeat(6));
        s.push('\n');
        for r in &self.results {
            let cells: Vec<String> = r
                .scores
                .values()
                .iter()
                .zip(r.drops.values())
                .map(|(v, d)| {
                    if r.variant == Variant::None {
                        format!("{v:.3}")
                    } else if d >= 0.0 {
                        format!("{v:.3} (↓ {d:.2}%)")
                    } else {
                        format!("{v:.3} (↑ {:.2}%)", -d)
                    }
                })
                .collect();
            let _ = writeln!(s, "| {} | {} |", r.label, cells.join(" | "));
        }
        s
    }
}
