use proptest::prelude::*;
use revise_core::metrics::{self, Prediction};

mod support;

use support::metrics_oracle::{fixtures, oracle, owned};

#[test]
fn bleu_matches_oracle_on_fixtures() {
    for (i, f) in fixtures().iter().enumerate() {
        let (c, r) = owned(f);
        let got = metrics::bleu(&c, &r).unwrap();
        let want = oracle::bleu(&f.0, &f.1);
        for n in 0..4 {
            assert!((got[n] - want[n]).abs() < 1e-6, "fixture {i} B{}: {} vs {}", n + 1, got[n], want[n]);
        }
    }
}

#[test]
fn rouge_matches_oracle_on_fixtures() {
    for (i, f) in fixtures().iter().enumerate() {
        let (c, r) = owned(f);
        let got = metrics::rouge_l(&c, &r).unwrap();
        let want = oracle::rouge(&f.0, &f.1);
        assert!((got - want).abs() < 1e-6, "fixture {i}: {got} vs {want}");
    }
}

#[test]
fn cider_matches_oracle_on_fixtures() {
    for sigma in [6.0, 12.0] {
        for (i, f) in fixtures().iter().enumerate() {
            let (c, r) = owned(f);
            let got = metrics::cider(&c, &r, sigma).unwrap();
            let want = oracle::cider(&f.0, &f.1, sigma);
            assert!((got - want).abs() < 1e-6, "fixture {i} sigma {sigma}: {got} vs {want}");
        }
    }
}

/// Corpus BLEU-2 exceeds BLEU-1 whenever pooled bigram precision beats
/// unigram precision, so the orders are not monotone in general.
/// Fixture 8 shows the same with BLEU-4 above BLEU-3.
#[test]
fn bleu_orders_can_increase_on_a_corpus() {
    let c = vec!["a c".to_string(), "b".to_string()];
    let r = vec![vec!["a c".to_string()], vec!["c".to_string()]];
    let b = metrics::bleu(&c, &r).unwrap();
    assert!((b[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((b[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!(b[1] > b[0]);
    let want = oracle::bleu(&["a c", "b"], &[vec!["a c"], vec!["c"]]);
    assert!((b[1] - want[1]).abs() < 1e-12);
}

#[test]
fn hand_derived_values() {
    let c = vec!["the cat sat".to_string()];
    let r = vec![vec!["the cat ran".to_string()]];
    assert!((metrics::bleu(&c, &r).unwrap()[0] - 2.0 / 3.0).abs() < 1e-12);

    let c = vec!["a b c".to_string()];
    let r = vec![vec!["a c".to_string()]];
    let f = (1.0 + 1.44) * (2.0 / 3.0) / (1.0 + 1.44 * 2.0 / 3.0);
    assert!((metrics::rouge_l(&c, &r).unwrap() - f).abs() < 1e-12);
}

#[test]
fn cider_sigma_scales_by_the_length_penalty() {
    // One item, one reference, differing only in length by two tokens, next
    // to a second identical item so frequencies are non-trivial.
    let c = ["red square left".to_string(), "blue circle".to_string()];
    let r = vec![vec!["red square left of it".to_string()], vec!["blue circle".to_string()]];
    let s6 = metrics::cider(&c[..1], &r[..1], 6.0);
    assert!(s6.is_err(), "a single item has no document frequencies");
    let df = metrics::DocFreq::from_references(&r).unwrap();
    let a = metrics::cider_with(&c[..1], &r[..1], &df, 6.0).unwrap();
    let b = metrics::cider_with(&c[..1], &r[..1], &df, 12.0).unwrap();
    let ratio = (-(4.0f64) / (2.0 * 144.0)).exp() / (-(4.0f64) / (2.0 * 36.0)).exp();
    assert!((b / a - ratio).abs() < 1e-9, "{} vs {ratio}", b / a);
}

#[test]
fn disjoint_candidate_contributes_nothing() {
    let c = vec!["zebra".to_string(), "a b".to_string()];
    let r = vec![vec!["a b".to_string()], vec!["a b".to_string()]];
    let both = metrics::cider(&c, &r, 6.0).unwrap();
    let df = metrics::DocFreq::from_references(&r).unwrap();
    let second = metrics::cider_with(&c[1..], &r[1..], &df, 6.0).unwrap();
    assert!((both - second / 2.0).abs() < 1e-12);
}

fn pred(id: u64, answer: &str, gold: &str, expl: &str, reference: &str) -> Prediction {
    Prediction {
        id,
        answer: answer.into(),
        explanation: expl.into(),
        reference_answer: gold.into(),
        reference_explanations: vec![reference.into()],
    }
}

#[test]
fn filtered_report_subsets() {
    let preds = vec![
        pred(0, "red", "red", "the square is red", "the square is red"),
        pred(1, "blue", "red", "the circle is blue", "the circle is red"),
        pred(2, "yes", "yes", "there is a square", "there is a red square in the image"),
        pred(3, "no", "yes", "there is no square", "there is a square in the image"),
    ];
    let rep = metrics::filtered_report("test", 0, &preds, None, None, 5).unwrap();
    assert_eq!(rep.counts.correct, 2);
    assert_eq!(rep.filtered.count, 2);
    assert!((rep.accuracy - 0.5).abs() < 1e-12);
    // Items 0 and 2: ROUGE-L 1.0, and LCS 4 of (4, 8).
    let (p, r) = (1.0, 0.5);
    let f2 = (1.0 + 1.44) * p * r / (r + 1.44 * p);
    assert!((rep.filtered.rouge_l.unwrap() - (1.0 + f2) / 2.0).abs() < 1e-12);
    // Corpus BLEU-1 over the two: all 8 unigrams match, reference lengths 4 + 8.
    let bp = (1.0f64 - 12.0 / 8.0).exp();
    assert!((rep.filtered.bleu1.unwrap() - bp).abs() < 1e-12);

    let wrong: Vec<Prediction> = preds.iter().filter(|p| !p.is_correct()).cloned().collect();
    let rep = metrics::filtered_report("test", 0, &wrong, None, None, 5).unwrap();
    assert!(rep.filtered.is_empty() && rep.filtered.bleu1.is_none());
    assert_eq!(rep.unfiltered.count, 2);
    assert!(rep.unfiltered.bleu1.unwrap().is_finite());
    let json = serde_json::to_value(&rep).unwrap();
    assert!(json["filtered"]["bleu1"].is_null() && json["filtered"]["meteor"].is_null());

    let right: Vec<Prediction> = preds.iter().filter(|p| p.is_correct()).cloned().collect();
    let rep = metrics::filtered_report("test", 0, &right, None, None, 5).unwrap();
    assert_eq!(rep.filtered.bleu1, rep.unfiltered.bleu1);
    assert_eq!(rep.filtered.cider, rep.unfiltered.cider);
}

fn corpus() -> impl Strategy<Value = Vec<(String, String)>> {
    let word = prop::sample::select(vec!["a", "b", "c", "red", "square", "is", "the"]);
    let sentence = prop::collection::vec(word, 0..8).prop_map(|w| w.join(" "));
    let nonempty = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "red", "the"]), 1..8)
        .prop_map(|w| w.join(" "));
    prop::collection::vec((sentence, nonempty), 2..8)
}

fn split(items: &[(String, String)]) -> (Vec<String>, Vec<Vec<String>>) {
    (
        items.iter().map(|p| p.0.clone()).collect(),
        items.iter().map(|p| vec![p.1.clone()]).collect(),
    )
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(items in corpus(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (c1, r1) = split(&items);
        let (c2, r2) = split(&shuffled);
        let (b1, b2) = (metrics::bleu(&c1, &r1).unwrap(), metrics::bleu(&c2, &r2).unwrap());
        for n in 0..4 {
            prop_assert!((b1[n] - b2[n]).abs() < 1e-12);
        }
        prop_assert!((metrics::rouge_l(&c1, &r1).unwrap() - metrics::rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((metrics::cider(&c1, &r1, 6.0).unwrap() - metrics::cider(&c2, &r2, 6.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn bleu_stays_in_range(items in corpus()) {
        let (c, r) = split(&items);
        let b = metrics::bleu(&c, &r).unwrap();
        prop_assert!(b.iter().all(|x| (0.0..=1.0).contains(x)), "{:?}", b);
    }

    #[test]
    fn appending_an_identity_pair_never_lowers_bleu1(items in corpus(), extra in "[abc]( [abc]){0,5}") {
        let (mut c, mut r) = split(&items);
        let before = metrics::bleu(&c, &r).unwrap()[0];
        c.push(extra.clone());
        r.push(vec![extra]);
        let after = metrics::bleu(&c, &r).unwrap()[0];
        prop_assert!(after + 1e-12 >= before, "{before} -> {after}");
    }

    #[test]
    fn scores_stay_in_range(items in corpus()) {
        let (c, r) = split(&items);
        let rl = metrics::rouge_l(&c, &r).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&rl));
        let ci = metrics::cider(&c, &r, 6.0).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&ci));
    }
}
