use mvaema_core::metrics::{
    bleu_n, meteor, metric_tokens, percentage_drop, prf_confusion, relative_improvement, rouge_l, rouge_n, score_pair,
    topk_accuracy, TextScores,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "the", "particles", "are", "spherical", "rods", "film", "porous", "smooth", "uniform", "size", "edges", "surface",
];

fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..max).prop_map(|v| v.into_iter().map(String::from).collect())
}

fn all_scores(c: &[String], r: &[String]) -> [f64; 6] {
    score_pair(&c.join(" "), &r.join(" ")).unwrap().values()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn text_metrics_stay_in_unit_interval(c in words(20), r in words(20)) {
        for v in all_scores(&c, &r) {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        for n in 1..=4 {
            let b = bleu_n(&c, std::slice::from_ref(&r), n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn identity_scores_are_maximal(c in words(20), r in words(20)) {
        let own = all_scores(&r, &r);
        let other = all_scores(&c, &r);
        for (o, x) in own.iter().zip(other) {
            prop_assert!(x <= o + 1e-12, "{x} > {o}");
        }
        prop_assert_eq!(rouge_l(&r, &r).unwrap(), 1.0);
        prop_assert_eq!(rouge_n(&r, &r, 1).unwrap(), 1.0);
        prop_assert_eq!(bleu_n(&r, std::slice::from_ref(&r), 1).unwrap(), 1.0);
        let m = r.len() as f64;
        prop_assert!((meteor(&r, &r) - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
    }

    #[test]
    fn rouge1_matches_bleu1_on_equal_lengths(r in words(20), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<String> = (0..r.len()).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
        let b1 = bleu_n(&c, std::slice::from_ref(&r), 1).unwrap();
        let r1 = rouge_n(&c, &r, 1).unwrap();
        prop_assert!((b1 - r1).abs() < 1e-6, "bleu1 {b1} rouge1 {r1}");
    }

    #[test]
    fn confusion_rows_sum_to_support(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let rep = prf_confusion(&preds, &labels, 6).unwrap();
        for (row, prf) in rep.matrix.iter().zip(&rep.per_class) {
            prop_assert_eq!(row.iter().sum::<usize>(), prf.support);
        }
        prop_assert!((rep.micro_avg.recall - rep.accuracy).abs() < 1e-12);
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert!((rep.accuracy - correct as f64 / labels.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn top1_never_exceeds_top5(rows in prop::collection::vec((Just((0..10).collect::<Vec<usize>>()).prop_shuffle(), 0usize..10), 1..40)) {
        let (rankings, labels): (Vec<Vec<usize>>, Vec<usize>) = rows.into_iter().unzip();
        let t1 = topk_accuracy(&rankings, &labels, 1).unwrap();
        let t5 = topk_accuracy(&rankings, &labels, 5).unwrap();
        prop_assert!(t1 <= t5);
    }
}

#[test]
fn word_deletion_does_not_raise_scores() {
    let reference = metric_tokens(
        "the particles are spherical with smooth surfaces and a uniform size distribution across the sample area",
    );
    let mut means = Vec::new();
    for k in 0..6 {
        let mut sum = [0.0; 6];
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
            let mut cand = reference.clone();
            for _ in 0..k {
                let i = rng.random_range(0..cand.len());
                cand.remove(i);
            }
            for (s, v) in sum.iter_mut().zip(all_scores(&cand, &reference)) {
                *s += v / 40.0;
            }
        }
        means.push(sum);
    }
    for w in means.windows(2) {
        for (m, (a, b)) in TextScores::NAMES.iter().zip(w[0].iter().zip(&w[1])) {
            assert!(b <= a, "{m}: mean rose from {a} to {b}");
        }
    }
}

#[test]
fn hand_counted_cases() {
    let t = |s: &str| metric_tokens(s);
    let f = rouge_n(&t("a b c"), &t("a b d"), 1).unwrap();
    assert!((f - 2.0 / 3.0).abs() < 1e-12);
    assert!(bleu_n(&t("x y z w"), &[t("a b c d")], 4).unwrap() <= 1e-6);
    assert_eq!(meteor(&t("x y"), &t("a b")), 0.0);
    assert_eq!(rouge_l(&[] as &[String], &t("a b")).unwrap(), 0.0);
    assert!(rouge_l(&t("a"), &[] as &[String]).is_err());
    assert!(bleu_n(&t("a"), &[], 2).is_err());
    assert!(bleu_n(&t("a"), &[t("a")], 5).is_err());
    let ten = t("one two three four five six seven eight nine ten");
    assert!((meteor(&ten, &ten) - 0.9995).abs() < 1e-12);

    // two classes, class 1 positive: TP 3, FP 1, FN 1, TN 5
    let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let preds = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
    let rep = prf_confusion(&preds, &labels, 2).unwrap();
    let p = rep.per_class[1];
    assert!((p.precision - 0.75).abs() < 1e-12 && (p.recall - 0.75).abs() < 1e-12 && (p.f1 - 0.75).abs() < 1e-12);

    let ranked_third = vec![vec![4, 7, 2, 0, 1, 3, 5, 6, 8, 9]];
    assert_eq!(topk_accuracy(&ranked_third, &[2], 1).unwrap(), 0.0);
    assert_eq!(topk_accuracy(&ranked_third, &[2], 5).unwrap(), 1.0);
    assert!(topk_accuracy(&ranked_third, &[2], 0).is_err());

    assert!((relative_improvement(0.947, 0.749).unwrap() - 26.435).abs() < 0.01);
    assert!((percentage_drop(0.822, 0.740).unwrap() - 9.976).abs() < 0.01);
    assert!(percentage_drop(0.0, 0.5).is_err());
}
