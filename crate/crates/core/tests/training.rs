use std::rc::Rc;

use mvaema_core::dataset::{corpus, synthetic_records, Sample, MORPHOLOGY_QUESTION};
use mvaema_core::imaging::{load_normalize, patchify, synth_micrograph, FixtureEntry};
use mvaema_core::model::{Model, ModelConfig, Variant, ITC_PARAMS};
use mvaema_core::tokenization::Vocab;
use mvaema_core::trainer::{batch_loss, history_csv, kfold_split, train, EarlyStopping, LrScheduler, TrainConfig};
use mvaema_core::{Category, CoreError};
use mvaema_tensor::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(n: usize) -> (Vec<Sample>, Vocab) {
    let entries: Vec<FixtureEntry> = Category::ALL
        .iter()
        .cycle()
        .take(n)
        .enumerate()
        .map(|(i, &category)| FixtureEntry {
            category,
            seed: i as u64,
            path: format!("{i}.png").into(),
        })
        .collect();
    let records = synthetic_records(&entries);
    let vocab = Vocab::build(&corpus(&records), 1).unwrap();
    let samples = records
        .iter()
        .zip(&entries)
        .map(|(r, e)| {
            let img = load_normalize(&synth_micrograph(e.category, e.seed).unwrap()).unwrap();
            let p = Rc::new(patchify(&img).unwrap().data().to_vec());
            Sample::new(p, r.category, &r.instruction, &r.answer, &vocab).unwrap()
        })
        .collect();
    (samples, vocab)
}

fn micro(vocab: &Vocab, seed: u64) -> Model<f32> {
    Model::init(ModelConfig::micro(vocab.len()), seed).unwrap()
}

fn quick(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch,
        seed: 4,
        early_stop_patience: 100,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_the_dataset(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plan = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(plan, kfold_split(n, k, seed).unwrap());
    }
}

#[test]
fn fold_edge_cases() {
    let p = kfold_split(21, 10, 3).unwrap();
    let mut sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, [2, 2, 2, 2, 2, 2, 2, 2, 2, 3]);
    assert!(kfold_split(5, 10, 0).is_err());
    assert_eq!(p.train_indices(0).len(), 21 - p.folds[0].len());
}

#[test]
fn schedule_rules() {
    let mut s = LrScheduler::new(1e-3, 5, 1e-4);
    let lrs: Vec<f64> = (0..6).map(|_| s.step(1.0)).collect();
    assert_eq!(lrs[4], 1e-3);
    assert_eq!(lrs[5], 5e-4);
    let mut s = LrScheduler::new(1e-3, 5, 1e-4);
    assert!((0..20).map(|i| s.step(1.0 - 0.01 * i as f64)).all(|lr| lr == 1e-3));

    let mut e = EarlyStopping::new(3, 1e-4);
    let stops: Vec<bool> = [1.0, 0.9, 0.95, 1.0, 1.1, 0.5].iter().map(|&v| e.step(v)).collect();
    assert_eq!(stops, [false, false, false, false, true, false]);
}

#[test]
fn step_count_matches_epochs_times_batches() {
    let (data, vocab) = fixture(7);
    // 7 items in batches of 3: two full batches and one of size one (dropped)
    let out = train(&quick(3, 3), micro(&vocab, 1), &data, &[]).unwrap();
    assert_eq!(out.steps.len(), 3 * 2);
    // 8 items in batches of 3: 3 + 3 + 2
    let (data, vocab) = fixture(8);
    let out = train(&quick(2, 3), micro(&vocab, 1), &data, &[]).unwrap();
    assert_eq!(out.steps.len(), 2 * 3);
    assert!(out.steps.iter().all(|s| s.joint.is_finite()));
    assert_eq!(out.epochs.len(), 2);
}

#[test]
fn training_is_bitwise_reproducible() {
    let (data, vocab) = fixture(6);
    let cfg = quick(2, 3);
    let a = train(&cfg, micro(&vocab, 9), &data, &data[..3]).unwrap();
    let b = train(&cfg, micro(&vocab, 9), &data, &data[..3]).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(history_csv(&a.steps), history_csv(&b.steps));
    let c = train(&TrainConfig { seed: 5, ..cfg }, micro(&vocab, 9), &data, &[]).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn no_itc_leaves_contrastive_parameters_untouched() {
    let (data, vocab) = fixture(4);
    let mut model = micro(&vocab, 2);
    let cfg = TrainConfig {
        variant: Variant::NoItc,
        ..quick(1, 4)
    };
    model.params.zero_grad();
    let grads = {
        let tape = Tape::new();
        let net = model.bind(&tape);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let terms = batch_loss(&net, &refs, &mut rng, &cfg.effective_weights(), false).unwrap();
        assert!(terms.itc.is_none());
        tape.backward(terms.joint).unwrap()
    };
    model.params.accumulate(&grads).unwrap();
    for name in ITC_PARAMS {
        let g = model.params.get(name).unwrap().grad().unwrap();
        assert!(g.iter().all(|&x| x == 0.0), "{name} received gradient");
    }
    let out = train(&cfg, micro(&vocab, 2), &data, &[]).unwrap();
    let csv = history_csv(&out.steps);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("excluded")));
    let init = micro(&vocab, 2);
    for name in ITC_PARAMS {
        assert_eq!(out.model.params.get(name).unwrap().data(), init.params.get(name).unwrap().data());
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (data, vocab) = fixture(4);
    let mut model = micro(&vocab, 3);
    model.params.get_mut("img.patch.w").unwrap().data_mut()[0] = f32::NAN;
    match train(&quick(1, 4), model, &data, &[]) {
        Err(CoreError::NonFiniteLoss { step, seed, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(seed, 4);
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.steps.len())),
    }
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { batch: 1, ..TrainConfig::default() },
        TrainConfig { folds: 1, ..TrainConfig::default() },
        TrainConfig { scheduler_patience: 0, ..TrainConfig::default() },
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
    assert_eq!(MORPHOLOGY_QUESTION.split_whitespace().count(), 9);
}
