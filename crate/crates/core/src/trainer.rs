//! Training loop, learning-rate schedule, early stopping and k-fold
//! cross-validation.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use mvaema_tensor::{AdamConfig, AdamState, Real, Tape, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{CoreError, Result};
use crate::model::{save_checkpoint, Model, Net, Variant};
use crate::objectives::{itc_loss, itm_loss, joint_loss, lm_loss, LossWeights};
use crate::tokenization::{decoder_pair, frame_ids, Mode, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub folds: usize,
    pub seed: u64,
    pub variant: Variant,
    pub weights: LossWeights,
    /// Draw matching negatives in both directions, weighted by contrastive
    /// similarity, instead of one uniform wrong text per image.
    pub hard_negatives: bool,
    /// Stop as soon as a step's joint loss falls below this value.
    pub target_loss: Option<f64>,
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch: 48,
            scheduler_patience: 5,
            early_stop_patience: 10,
            min_delta: 1e-4,
            folds: 10,
            seed: 0,
            variant: Variant::None,
            weights: LossWeights::default(),
            hard_negatives: false,
            target_loss: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.batch < 2 {
            return fail("batch must be at least 2 for in-batch negatives");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.min_delta >= 0.0) {
            return fail("min_delta must be non-negative");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        self.weights.validate()
    }

    /// Loss weights after the variant has removed its term.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.variant {
            Variant::NoItc => w.itc = 0.0,
            Variant::NoCtc => w.itm = 0.0,
            _ => {}
        }
        w
    }
}

/// `k` disjoint index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Indices outside fold `i`.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Seeded shuffle of `0..n` cut into `k` contiguous slices whose sizes
/// differ by at most one; the larger slices come last.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(CoreError::contract("kfold_split", format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i >= k - extra);
        folds.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(FoldPlan { folds })
}

/// Halves the learning rate after `patience` epochs without an improvement
/// larger than `min_delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrScheduler {
    pub lr: f64,
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl LrScheduler {
    pub fn new(lr: f64, patience: usize, min_delta: f64) -> Self {
        LrScheduler {
            lr,
            best: f64::INFINITY,
            stale: 0,
            patience,
            min_delta,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr /= 2.0;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` epochs without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            best: f64::INFINITY,
            stale: 0,
            patience,
            min_delta,
        }
    }

    /// Records an epoch; returns true when training should stop.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// Loss terms of one batch; `None` marks a term excluded by its weight.
pub struct BatchTerms<'t, T: Real> {
    pub itc: Option<Var<'t, T>>,
    pub itm: Option<Var<'t, T>>,
    pub lm: Option<Var<'t, T>>,
    pub joint: Var<'t, T>,
}

/// For each item `i`, another batch item whose match text differs, or `None`
/// when there is none. With `scores` (row-major `[n, n]`), candidate `j` is
/// drawn with probability proportional to `exp(scores[i][j])`; otherwise
/// uniformly.
pub fn sample_negatives(batch: &[&Sample], scores: Option<&[f64]>, rng: &mut impl Rng) -> Vec<Option<usize>> {
    let n = batch.len();
    (0..n)
        .map(|i| {
            let cands: Vec<usize> = (0..n).filter(|&j| j != i && batch[j].caption != batch[i].caption).collect();
            if cands.is_empty() {
                return None;
            }
            let Some(s) = scores else {
                return Some(cands[rng.random_range(0..cands.len())]);
            };
            let row = &s[i * n..(i + 1) * n];
            let max = cands.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = cands.iter().map(|&j| (row[j] - max).exp()).collect();
            let mut u = rng.random_range(0.0..w.iter().sum::<f64>());
            for (&j, &wj) in cands.iter().zip(&w) {
                if u < wj {
                    return Some(j);
                }
                u -= wj;
            }
            cands.last().copied()
        })
        .collect()
}

/// Image-to-text and text-to-image score matrices `v tᵀ / tau`, row-major.
fn similarities<T: Real>(v: &[T], t: &[T], n: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let p = v.len() / n;
    let mut i2t = vec![0.0; n * n];
    let mut t2i = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = v[i * p..(i + 1) * p]
                .iter()
                .zip(&t[j * p..(j + 1) * p])
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            i2t[i * n + j] = dot / tau;
            t2i[j * n + i] = dot / tau;
        }
    }
    (i2t, t2i)
}

pub fn patches_var<'t, T: Real>(tape: &'t Tape<T>, s: &Sample) -> Result<Var<'t, T>> {
    let data = s.patches.iter().map(|&x| T::of(x as f64)).collect();
    Ok(tape.constant_from(&[crate::imaging::NUM_PATCHES, crate::imaging::PATCH_DIM], data)?)
}

/// Records all active loss terms for `batch` on the net's tape. Each image
/// gets one matching negative text. With `hard`, each text also gets a
/// negative image and both are drawn by contrastive similarity (uniformly
/// when the contrastive term is off).
pub fn batch_loss<'t, T: Real>(
    net: &Net<'t, '_, T>,
    batch: &[&Sample],
    rng: &mut impl Rng,
    weights: &LossWeights,
    hard: bool,
) -> Result<BatchTerms<'t, T>> {
    let tape = net.tape();
    if batch.is_empty() {
        return Err(CoreError::contract("batch_loss", "empty batch"));
    }
    let n = batch.len();
    let cfg = net.config();
    let images = batch
        .iter()
        .map(|s| net.encode_image(patches_var(tape, s)?))
        .collect::<Result<Vec<_>>>()?;

    let mut sims: Option<(Vec<f64>, Vec<f64>)> = None;
    let itc = if weights.itc > 0.0 {
        let mut v_rows = Vec::with_capacity(batch.len());
        let mut t_rows = Vec::with_capacity(batch.len());
        for (s, img) in batch.iter().zip(&images) {
            let text = frame_ids(&s.caption, Mode::Cls, cfg.max_text_len)?;
            t_rows.push(net.encode_text(&text)?.cls);
            v_rows.push(img.cls);
        }
        let (v, t) = net.itc_project(tape.concat(&v_rows, 0)?, tape.concat(&t_rows, 0)?)?;
        let tau = net.tau()?;
        if hard {
            sims = Some(similarities(&v.to_vec(), &t.to_vec(), n, tau.item()?.as_f64()));
        }
        Some(itc_loss(v, t, tau)?)
    } else {
        None
    };

    let itm = if weights.itm > 0.0 {
        let neg_text = sample_negatives(batch, sims.as_ref().map(|s| s.0.as_slice()), rng);
        let neg_image = if hard {
            sample_negatives(batch, sims.as_ref().map(|s| s.1.as_slice()), rng)
        } else {
            vec![None; n]
        };
        let texts = batch
            .iter()
            .map(|s| frame_ids(&s.caption, Mode::Encode, cfg.max_text_len))
            .collect::<Result<Vec<_>>>()?;
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (i, img) in images.iter().enumerate() {
            logits.push(net.fuse(&texts[i], img.seq)?.itm_logit);
            labels.push(T::one());
            if let Some(j) = neg_text[i] {
                logits.push(net.fuse(&texts[j], img.seq)?.itm_logit);
                labels.push(T::zero());
            }
            if let Some(j) = neg_image[i] {
                logits.push(net.fuse(&texts[i], images[j].seq)?.itm_logit);
                labels.push(T::zero());
            }
        }
        Some(itm_loss(tape.concat(&logits, 0)?, &labels)?)
    } else {
        None
    };

    let lm = if weights.lm > 0.0 {
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (s, img) in batch.iter().zip(&images) {
            let (input, tgt) = decoder_pair(&s.answer, cfg.max_answer_len)?;
            let (prefix, memory) = net.decoder_context(&s.question, img.seq)?;
            rows.push(net.decoder_forward(&prefix, &input, memory)?);
            targets.extend(tgt);
        }
        let logits = tape.concat(&rows, 0)?;
        let mask = vec![1u8; targets.len()];
        Some(lm_loss(logits, &targets, &mask)?)
    } else {
        None
    };

    let joint = joint_loss(tape, itc, itm, lm, weights)?;
    Ok(BatchTerms { itc, itm, lm, joint })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub lm: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss, or the parameters at the
    /// moment `target_loss` was reached.
    pub model: Model<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_val: f64,
    pub stopped_early: bool,
    pub reached_target: bool,
}

impl TrainOutcome {
    pub fn final_step(&self) -> Option<&StepLog> {
        self.steps.last()
    }
}

fn value<T: Real>(v: Option<Var<'_, T>>) -> Result<Option<f64>> {
    v.map(|v| v.item().map(T::as_f64)).transpose().map_err(Into::into)
}

/// Mean joint loss over `data` in fixed batches, with negatives drawn from a
/// fixed seed so epochs are comparable.
pub fn evaluate_loss(model: &Model<f32>, data: &[Sample], batch: usize, weights: &LossWeights, hard: bool, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let tape = Tape::inference();
        let net = model.bind(&tape);
        let terms = batch_loss(&net, &refs, &mut rng, weights, hard)?;
        total += terms.joint.item()? as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains `model` on `train`, validating on `val` after every epoch (on the
/// training set itself when `val` is empty).
pub fn train(cfg: &TrainConfig, mut model: Model<f32>, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(CoreError::contract("train", "need at least two training samples"));
    }
    model.config.blocks = cfg.variant.blocks();
    let weights = cfg.effective_weights();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params.tensors());
    let mut sched = LrScheduler::new(cfg.lr, cfg.scheduler_patience, cfg.min_delta);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut step: u64 = 0;
    let mut stopped_early = false;
    let mut reached_target = false;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_items = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = adam.lr();
            model.params.zero_grad();
            let non_finite = |e: CoreError| match e {
                CoreError::Tensor(TensorError::NonFinite { op }) => CoreError::NonFiniteLoss {
                    step,
                    seed: cfg.seed,
                    detail: format!("non-finite value in {op} during epoch {epoch}"),
                },
                e => e,
            };
            let (log, grads) = (|| -> Result<_> {
                let tape = Tape::new();
                let net = model.bind(&tape);
                let terms = batch_loss(&net, &refs, &mut rng, &weights, cfg.hard_negatives)?;
                let joint = terms.joint.item()? as f64;
                if !joint.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        step,
                        seed: cfg.seed,
                        detail: format!("joint loss {joint} in epoch {epoch}"),
                    });
                }
                let log = StepLog {
                    step,
                    itc: value(terms.itc)?,
                    itm: value(terms.itm)?,
                    lm: value(terms.lm)?,
                    joint,
                    lr,
                };
                Ok((log, tape.backward(terms.joint)?))
            })()
            .map_err(non_finite)?;
            model.params.accumulate(&grads)?;
            adam.step(model.params.tensors_mut())?;
            model.clamp_tau()?;
            if model.params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(CoreError::NonFiniteLoss {
                    step,
                    seed: cfg.seed,
                    detail: "parameters became non-finite".into(),
                });
            }
            debug!("step {step} joint {:.5}", log.joint);
            epoch_sum += log.joint * chunk.len() as f64;
            epoch_items += chunk.len();
            let joint = log.joint;
            steps.push(log);
            step += 1;
            if cfg.target_loss.is_some_and(|t| joint < t) {
                reached_target = true;
                break 'epochs;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let train_loss = epoch_sum / epoch_items.max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            evaluate_loss(&model, val, cfg.batch, &weights, cfg.hard_negatives, cfg.seed)?
        };
        if !val_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                step,
                seed: cfg.seed,
                detail: format!("validation loss {val_loss} after epoch {epoch}"),
            });
        }
        let lr_used = adam.lr();
        adam.set_lr(sched.step(val_loss));
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        });
        info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr_used:.2e}");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
        if stopper.step(val_loss) {
            stopped_early = true;
            break;
        }
    }

    let (best_val, best_model) = match best {
        Some((v, m)) if !reached_target => (v, m),
        Some((v, _)) => (v, model),
        None => (f64::NAN, model),
    };
    Ok(TrainOutcome {
        model: best_model,
        steps,
        epochs,
        best_val,
        stopped_early,
        reached_target,
    })
}

/// Per-step losses as CSV; terms removed by the variant read `excluded`.
pub fn history_csv(steps: &[StepLog]) -> String {
    let mut s = String::from("step,itc,itm,lm,joint,lr\n");
    let cell = |v: Option<f64>| v.map_or_else(|| "excluded".to_string(), |x| format!("{x:.6}"));
    for l in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:e}",
            l.step,
            cell(l.itc),
            cell(l.itm),
            cell(l.lm),
            l.joint,
            l.lr
        );
    }
    s
}

pub fn write_history(path: &Path, steps: &[StepLog]) -> Result<()> {
    std::fs::write(path, history_csv(steps)).map_err(|e| CoreError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub best_val: f64,
    pub steps: usize,
    pub epochs: usize,
}

/// k-fold cross-validation; every fold starts from the same initialization.
/// With `out_dir`, each fold's best checkpoint and history go to `fold_{i}/`.
pub fn cross_validate(
    cfg: &TrainConfig,
    init: &Model<f32>,
    data: &[Sample],
    vocab: &Vocab,
    out_dir: Option<&Path>,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    let plan = kfold_split(data.len(), cfg.folds, cfg.seed)?;
    let mut results = Vec::with_capacity(cfg.folds);
    for (i, fold) in plan.folds.iter().enumerate() {
        let train_set: Vec<Sample> = plan.train_indices(i).into_iter().map(|j| data[j].clone()).collect();
        let val_set: Vec<Sample> = fold.iter().map(|&j| data[j].clone()).collect();
        let out = train(cfg, init.clone(), &train_set, &val_set)?;
        if let Some(dir) = out_dir {
            let fd = dir.join(format!("fold_{i}"));
            save_checkpoint(&fd, &out.model, vocab, cfg.seed)?;
            write_history(&fd.join("history.csv"), &out.steps)?;
        }
        results.push(FoldResult {
            fold: i,
            train_size: train_set.len(),
            val_size: val_set.len(),
            best_val: out.best_val,
            steps: out.steps.len(),
            epochs: out.epochs.len(),
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kfold_sizes() {
        let p = kfold_split(20, 10, 1).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 2));
        let p = kfold_split(21, 10, 1).unwrap();
        let sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 2).count(), 9);
        assert_eq!(sizes.iter().filter(|&&s| s == 3).count(), 1);
        let mut all: Vec<usize> = p.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert_eq!(p, kfold_split(21, 10, 1).unwrap());
        assert!(kfold_split(5, 10, 0).is_err());
    }

    #[test]
    fn scheduler_halves_after_patience() {
        let mut s = LrScheduler::new(1e-3, 5, 1e-4);
        let lrs: Vec<f64> = (0..6).map(|_| s.step(1.0)).collect();
        assert_eq!(lrs[4], 1e-3);
        assert_eq!(lrs[5], 5e-4);
        let mut s = LrScheduler::new(1e-3, 5, 1e-4);
        for i in 0..20 {
            assert_eq!(s.step(1.0 - 0.01 * i as f64), 1e-3);
        }
        let mut s = LrScheduler::new(1e-3, 5, 1e-4);
        for l in [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5] {
            assert_eq!(s.step(l), 1e-3);
        }
    }

    #[test]
    fn early_stop_on_worsening() {
        let mut e = EarlyStopping::new(3, 1e-4);
        let stops: Vec<bool> = [1.0, 0.9, 1.0, 1.1, 1.2, 1.3].iter().map(|&v| e.step(v)).collect();
        assert_eq!(stops, [false, false, false, false, true, true]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { folds: 1, ..Default::default() }.validate().is_err());
        let w = TrainConfig {
            variant: Variant::NoItc,
            ..Default::default()
        }
        .effective_weights();
        assert_eq!(w.itc, 0.0);
    }

    #[test]
    fn csv_marks_excluded() {
        let csv = history_csv(&[StepLog {
            step: 0,
            itc: None,
            itm: Some(0.5),
            lm: Some(1.0),
            joint: 1.5,
            lr: 1e-3,
        }]);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,excluded,0.500000,1.000000,1.500000"));
    }
}
