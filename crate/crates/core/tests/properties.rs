use locoop::autodiff::{row_entropy, softmax_into, Tape};
use locoop::matrix::normalize;
use locoop::scoring::{region_probs, score_records};
use locoop::training::extract_id_irrelevant;
use locoop::{auroc, fpr_at_tpr, ExtractionStrategy, FeatureRecord, Matrix};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..40)
}

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(finite_vec(dim), rows).prop_filter_map("degenerate row", move |rs| {
        if rs.iter().any(|r| r.iter().map(|x| x * x).sum::<f64>() < 1e-6) {
            return None;
        }
        let rs: Vec<Vec<f64>> = rs.iter().map(|r| normalize(r)).collect();
        Matrix::from_rows(&rs).ok()
    })
}

/// `sum(softmax(x·W / t) ⊙ C)` for a fixed W and C.
fn objective(tape: &mut Tape, x: locoop::autodiff::Value, w: &Matrix, c: &Matrix) -> locoop::autodiff::Value {
    let w = tape.constant(w.clone());
    let c = tape.constant(c.clone());
    let xw = tape.matmul(x, w).unwrap();
    let p = tape.softmax_rows(xw, 0.5).unwrap();
    let pc = tape.mul(p, c).unwrap();
    tape.sum(pc)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gradient_is_linear_in_the_output(
        x in finite_vec(6), w in finite_vec(12), c in finite_vec(8), a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let x = Matrix::from_vec(2, 3, x).unwrap();
        let w = Matrix::from_vec(3, 4, w).unwrap();
        let c1 = Matrix::from_vec(2, 4, c).unwrap();
        let c2 = c1.map(|v| v * v - 1.0);

        let grad_of = |coef: &[(f64, &Matrix)]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone());
            let mut acc = None;
            for &(k, c) in coef {
                let term = objective(&mut tape, leaf, &w, c);
                let term = tape.scale(term, k);
                acc = Some(match acc { None => term, Some(prev) => tape.add(prev, term).unwrap() });
            }
            tape.backward(acc.unwrap()).unwrap().get(leaf)
        };
        let combined = grad_of(&[(a, &c1), (b, &c2)]);
        let g1 = grad_of(&[(1.0, &c1)]);
        let g2 = grad_of(&[(1.0, &c2)]);
        for i in 0..combined.data().len() {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn softmax_and_entropy_are_bounded(x in prop::collection::vec(-50.0f64..50.0, 2..30), t in 0.005f64..5.0) {
        let mut p = vec![0.0; x.len()];
        softmax_into(&x, t, &mut p);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = row_entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (x.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn auroc_is_rank_based(id in scores(), ood in scores(), shift in -10.0f64..10.0, scale in 0.01f64..10.0) {
        let base = auroc(&id, &ood).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let f = |v: &f64| (scale * v + shift).exp();
        let id2: Vec<f64> = id.iter().map(f).collect();
        let ood2: Vec<f64> = ood.iter().map(f).collect();
        prop_assert!((auroc(&id2, &ood2).unwrap() - base).abs() < 1e-12);
        prop_assert!((auroc(&ood, &id).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_threshold_reaches_the_tpr(id in scores(), ood in scores(), tpr in 0.01f64..1.0) {
        let (fpr, t) = fpr_at_tpr(&id, &ood, tpr).unwrap();
        let hit = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        prop_assert!(hit >= tpr);
        prop_assert!(id.contains(&t));
        // no larger ID score would also reach it
        let above = id.iter().filter(|&&s| s > t).count() as f64 / id.len() as f64;
        prop_assert!(above < tpr);
        prop_assert_eq!(fpr, ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64);
    }

    #[test]
    fn larger_k_never_adds_regions(local in unit_rows(9, 5), text in unit_rows(6, 5), gt in 0usize..6) {
        let rec = FeatureRecord { global: local.row(0).to_vec(), local, label: gt as i32 };
        let p = region_probs(&rec, &text, 0.05).unwrap();
        let sets: Vec<_> = (0..=6)
            .map(|k| extract_id_irrelevant(&p, gt, ExtractionStrategy::Rank { k }).unwrap())
            .collect();
        prop_assert_eq!(sets[0].len(), 9);
        prop_assert!(sets[6].is_empty());
        for w in sets.windows(2) {
            prop_assert!(w[1].is_subset_of(&w[0]));
        }
    }

    #[test]
    fn parallel_scoring_matches_serial(locals in prop::collection::vec(unit_rows(4, 6), 1..12), text in unit_rows(5, 6)) {
        let records: Vec<FeatureRecord> = locals
            .into_iter()
            .enumerate()
            .map(|(i, l)| FeatureRecord { global: l.row(1).to_vec(), local: l, label: (i % 5) as i32 })
            .collect();
        let serial = score_records(&records, &text, false).unwrap();
        let parallel = score_records(&records, &text, true).unwrap();
        prop_assert_eq!(serial, parallel);
    }
}
