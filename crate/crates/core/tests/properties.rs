use proptest::prelude::*;

use jointslu::autodiff::{log_softmax, Tensor};
use jointslu::ctc::ctc_loss;
use jointslu::lattice::{binomial, collapse_rnnt, enumerate_ctc_alignments, enumerate_rnnt_paths};
use jointslu::metrics::{edit_distance, slu_scores, wer, EntitySet};
use jointslu::rnnt::rnnt_loss;
use jointslu::sluhead::BoeTarget;

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vals.iter().cycle().take(n).copied().collect()).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4.0f64..4.0, 1..=24)
}

proptest! {
    #[test]
    fn ctc_loss_matches_alignment_sum(
        t in 1usize..=5,
        v in 2usize..=4,
        raw in proptest::collection::vec(1usize..4, 0..=3),
        vals in values(),
    ) {
        let y: Vec<usize> = raw.iter().map(|&s| 1 + s % (v - 1)).collect();
        let x = tensor(&[t, v], &vals);
        let lp = log_softmax(&x);
        let paths = enumerate_ctc_alignments(&y, t, 0).unwrap();
        match ctc_loss(&x, &y, 0) {
            Ok(l) => {
                let p: f64 = paths
                    .iter()
                    .map(|a| a.symbols.iter().enumerate().map(|(i, &s)| lp.at2(i, s)).sum::<f64>().exp())
                    .sum();
                prop_assert!((l.loss + p.ln()).abs() < 1e-10);
                for i in 0..t {
                    let s: f64 = l.grad.row(i).iter().sum();
                    prop_assert!(s.abs() < 1e-10, "gradient row {i} sums to {s}");
                }
            }
            Err(_) => prop_assert!(paths.is_empty()),
        }
    }

    #[test]
    fn rnnt_loss_matches_path_sum(
        t in 1usize..=4,
        v in 2usize..=4,
        raw in proptest::collection::vec(1usize..4, 0..=3),
        vals in values(),
    ) {
        let y: Vec<usize> = raw.iter().map(|&s| 1 + s % (v - 1)).collect();
        let u = y.len() + 1;
        let jlp = log_softmax(&tensor(&[t * u, v], &vals)).reshape(&[t, u, v]).unwrap();
        let at = |ti: usize, ui: usize, k: usize| jlp.data()[(ti * u + ui) * v + k];
        let paths = enumerate_rnnt_paths(&y, t, 0).unwrap();
        prop_assert_eq!(paths.len() as u64, binomial((t + y.len() - 1) as u64, y.len() as u64));
        let mut p = 0.0;
        for a in &paths {
            prop_assert_eq!(collapse_rnnt(&a.symbols, 0), y.clone());
            let (mut ti, mut ui, mut s) = (0, 0, 0.0);
            for &k in &a.symbols {
                s += at(ti, ui, k);
                if k == 0 { ti += 1 } else { ui += 1 }
            }
            p += f64::exp(s);
        }
        let l = rnnt_loss(&jlp, &y, 0).unwrap();
        prop_assert!((l.loss + p.ln()).abs() < 1e-10);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in proptest::collection::vec(0u8..4, 0..8),
        b in proptest::collection::vec(0u8..4, 0..8),
        c in proptest::collection::vec(0u8..4, 0..8),
    ) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn wer_of_reference_is_zero(words in proptest::collection::vec("[a-z]{1,4}", 1..6)) {
        let text = words.join(" ");
        prop_assert_eq!(wer(&text, &text), 0.0);
        prop_assert_eq!(wer("", &text), 1.0);
    }

    #[test]
    fn scoring_references_against_themselves_is_perfect(
        sets in proptest::collection::vec(
            (0u8..3, proptest::collection::vec((0u8..3, "[a-z]{1,3}"), 1..4)),
            1..6,
        ),
    ) {
        let refs: Vec<EntitySet> = sets
            .iter()
            .map(|(i, es)| EntitySet {
                intent: Some(format!("i{i}")),
                entities: es.iter().map(|(s, v)| (format!("s{s}"), v.clone())).collect(),
                dropped: 0,
            })
            .collect();
        let s = slu_scores(&refs, &refs);
        prop_assert_eq!((s.precision, s.recall, s.f1, s.intent_accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn bag_of_entities_target_is_a_distribution(labels in proptest::collection::vec(0usize..6, 1..8)) {
        let b = BoeTarget::from_labels(&labels, 6).unwrap();
        let w = b.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for (i, &x) in w.iter().enumerate() {
            let expected = if distinct.contains(&i) { 1.0 / distinct.len() as f64 } else { 0.0 };
            prop_assert!((x - expected).abs() < 1e-12);
        }
        prop_assert!(BoeTarget::from_weights(w.to_vec()).is_ok());
    }
}
