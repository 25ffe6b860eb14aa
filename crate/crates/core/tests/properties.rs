//! Property tests of the divergences, the tabular optimality argument and the
//! evaluation metrics against brute-force references.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crlab::cld_gen::{check_support_condition, DomainSpec};
use crlab::evaluator::{head_weight_histogram, macro_f1};
use crlab::linalg::{self, Matrix};
use crlab::model::{init_params, Activation, ShapeConfig};
use crlab::regularizers::{r_groupvar, r_js, r_kl, r_lam, r_lm, r_tlm};

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn probability(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(normalize)
}

fn probability_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|n| (probability(n), probability(n)))
}

proptest! {
    #[test]
    fn js_is_symmetric_and_bounded((p, q) in probability_pair()) {
        let a = r_js(&p, &q).unwrap();
        let b = r_js(&q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_match((p, q) in probability_pair()) {
        prop_assert!(r_kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(r_kl(&p, &p).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn gibbs_inequality((p, q) in probability_pair()) {
        prop_assert!(linalg::cross_entropy(&p, &q) >= linalg::entropy(&p) - 1e-12);
    }

    #[test]
    fn lam_bounds_tlm(
        m in 1usize..40,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..m).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let (f, g, w) = (v(), v(), v());
        let lam = r_lam(&f, &g, &w).unwrap();
        let tlm = r_tlm(&[linalg::dot(&f, &w)], &[linalg::dot(&g, &w)], 0).unwrap();
        prop_assert!(lam >= tlm / m as f64 * (1.0 - 1e-9));
    }

    #[test]
    fn groupvar_of_a_pair_is_half_lm(z in prop::collection::vec(-10.0f64..10.0, 1..8), shift in -3.0f64..3.0) {
        let zt: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + shift * (i as f64 - 1.5)).collect();
        let gv = r_groupvar(&[&z, &zt]).unwrap();
        prop_assert!((gv - 0.5 * r_lm(&z, &zt).unwrap()).abs() <= 1e-9 * (1.0 + gv));
    }

    #[test]
    fn support_condition_matches_brute_force(
        source in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0]), 12),
        target in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0]), 12),
    ) {
        let table = |raw: &[f64]| -> Option<DomainSpec> {
            let total: f64 = raw.iter().sum();
            (total > 0.0).then(|| DomainSpec {
                joint_table: Matrix::from_fn(4, 3, |c, s| raw[c * 3 + s] / total),
            })
        };
        if let (Some(s), Some(t)) = (table(&source), table(&target)) {
            let row_mass = |raw: &[f64], c: usize| raw[c * 3..c * 3 + 3].iter().sum::<f64>();
            let expected = (0..4).all(|c| row_mass(&target, c) == 0.0 || row_mass(&source, c) > 0.0);
            prop_assert_eq!(check_support_condition(&s, &t), expected);
        }
    }

    #[test]
    fn macro_f1_matches_confusion_matrix(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let (pred, label): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut confusion = [[0usize; 4]; 4];
        for (&p, &l) in pred.iter().zip(&label) {
            confusion[l][p] += 1;
        }
        let mut f1_sum = 0.0;
        #[allow(clippy::needless_range_loop)]
        for k in 0..4 {
            let tp = confusion[k][k] as f64;
            let fp: f64 = (0..4).filter(|&l| l != k).map(|l| confusion[l][k] as f64).sum();
            let fn_: f64 = (0..4).filter(|&p| p != k).map(|p| confusion[k][p] as f64).sum();
            // F1 = 2TP / (2TP + FP + FN), 0 when the denominator vanishes
            let denom = 2.0 * tp + fp + fn_;
            f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        }
        let got = macro_f1(&pred, &label, 4).unwrap();
        prop_assert!((got - f1_sum / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn head_histogram_matches_brute_force(
        seed in any::<u64>(),
        units in 1usize..10,
        classes in 2usize..6,
        bins in 1usize..8,
    ) {
        let shape = ShapeConfig {
            obs_dim: 3,
            hidden_widths: vec![],
            num_feature_units: units,
            num_classes: classes,
            activation: Activation::Tanh,
        };
        let params = init_params(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let edges: Vec<f64> = (0..=bins).map(|i| 0.1 + 0.3 * i as f64).collect();
        let h = head_weight_histogram(&params, &edges, 0.5).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), units * classes);
        let mut expected = vec![0usize; bins];
        let mut high = 0;
        for &w in params.head_weights.as_slice() {
            let a = w.abs();
            let idx = edges[..bins].iter().rposition(|&e| a >= e).unwrap_or(0);
            expected[idx] += 1;
            if a > 0.5 {
                high += 1;
            }
        }
        prop_assert_eq!(&h.counts, &expected);
        prop_assert_eq!(h.high_weight_count, high);
    }
}
