//! Contrastive, matching and language-modelling losses.

use mvaema_tensor::{Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Symmetric in-batch contrastive loss over unit embeddings `v` and `t`
/// (`[n, p]` each): the mean of the image-to-text and text-to-image
/// cross-entropies of `v tᵀ / tau` against the diagonal.
pub fn itc_loss<'t, T: Real>(v: Var<'t, T>, t: Var<'t, T>, tau: Var<'t, T>) -> Result<Var<'t, T>> {
    let tau_value = tau.item()?;
    if !(tau_value > T::zero()) {
        return Err(CoreError::contract("itc_loss", "temperature must be positive"));
    }
    let (vs, ts) = (v.shape(), t.shape());
    if vs.len() != 2 || vs != ts || vs[0] == 0 {
        return Err(CoreError::contract(
            "itc_loss",
            format!("embedding batches must be equal non-empty [n, p], got {vs:?} and {ts:?}"),
        ));
    }
    let n = vs[0];
    let sim = v.matmul(t.transpose()?)?.div_scalar(tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let w = vec![T::one(); n];
    let i2t = sim.cross_entropy(&targets, &w)?;
    let t2i = sim.transpose()?.cross_entropy(&targets, &w)?;
    Ok(i2t.add(t2i)?.scale(T::of(0.5)))
}

/// Mean binary cross-entropy of matching logits against 0/1 labels.
pub fn itm_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[T]) -> Result<Var<'t, T>> {
    if labels.is_empty() {
        return Err(CoreError::contract("itm_loss", "empty batch"));
    }
    if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(CoreError::contract("itm_loss", "labels must be 0 or 1"));
    }
    Ok(logits.bce_with_logits(labels)?)
}

/// Token-averaged negative log-likelihood of `targets` under `[len, vocab]`
/// logits; positions with a zero in `mask` are ignored.
pub fn lm_loss<'t, T: Real>(logits: Var<'t, T>, targets: &[usize], mask: &[u8]) -> Result<Var<'t, T>> {
    if mask.iter().all(|&m| m == 0) {
        return Err(CoreError::contract("lm_loss", "loss mask selects no positions"));
    }
    let w: Vec<T> = mask.iter().map(|&m| if m == 0 { T::zero() } else { T::one() }).collect();
    Ok(logits.cross_entropy(targets, &w)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            itc: 1.0,
            itm: 1.0,
            lm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("itc", self.itc), ("itm", self.itm), ("lm", self.lm)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CoreError::contract(
                    "joint_loss",
                    format!("weight for {name} must be a finite non-negative number, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// Weighted sum of the available loss terms. Terms whose weight is zero are
/// left out of the graph entirely, so parameters that only feed them receive
/// exactly zero gradient.
pub fn joint_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    itc: Option<Var<'t, T>>,
    itm: Option<Var<'t, T>>,
    lm: Option<Var<'t, T>>,
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    weights.validate()?;
    let mut total: Option<Var<'t, T>> = None;
    for (term, w) in [(itc, weights.itc), (itm, weights.itm), (lm, weights.lm)] {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { term } else { term.scale(T::of(w)) };
        total = Some(match total {
            None => scaled,
            Some(acc) => acc.add(scaled)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant_from(&[1], vec![T::zero()])?),
    }
}

/// Unit image and text embeddings with a temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub tau: f64,
}

fn rows_tensor<'t>(tape: &'t Tape<f64>, rows: &[Vec<f64>]) -> Result<Var<'t, f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CoreError::contract("batch", "ragged rows"));
    }
    Ok(tape.constant_from(&[rows.len(), cols], rows.concat())?)
}

impl ContrastiveBatch {
    pub fn loss(&self) -> Result<f64> {
        if self.image.is_empty() {
            return Err(CoreError::contract("itc_loss", "empty batch"));
        }
        for r in self.image.iter().chain(&self.text) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(CoreError::contract("itc_loss", format!("embedding norm {norm} is not 1")));
            }
        }
        let tape = Tape::inference();
        let v = rows_tensor(&tape, &self.image)?;
        let t = rows_tensor(&tape, &self.text)?;
        let tau = tape.constant_from(&[1], vec![self.tau])?;
        Ok(itc_loss(v, t, tau)?.item()?)
    }
}

/// Matching logits with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchBatch {
    pub logits: Vec<f64>,
    pub labels: Vec<f64>,
}

impl MatchBatch {
    /// Builds the batch from probabilities, which must lie strictly inside (0, 1).
    pub fn from_probs(probs: &[f64], labels: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(CoreError::contract("itm_loss", "probabilities must lie in (0, 1)"));
        }
        Ok(MatchBatch {
            logits: probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn loss(&self) -> Result<f64> {
        if self.logits.len() != self.labels.len() {
            return Err(CoreError::contract("itm_loss", "logits and labels differ in length"));
        }
        let tape = Tape::inference();
        let l = tape.constant_from(&[self.logits.len()], self.logits.clone())?;
        Ok(itm_loss(l, &self.labels)?.item()?)
    }
}

/// Decoder logits, next-token targets and the positions that count.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub logits: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub mask: Vec<u8>,
}

impl LmBatch {
    pub fn loss(&self) -> Result<f64> {
        let tape = Tape::inference();
        let l = rows_tensor(&tape, &self.logits)?;
        Ok(lm_loss(l, &self.targets, &self.mask)?.item()?)
    }
}
