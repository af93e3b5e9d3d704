//! Property tests for the structural invariants: convexity of the loss,
//! ordering of the Bregman divergences, monotone support extraction, the
//! root residual and the honest-dimension identity.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use nbelnet::model::{self, Dataset, Penalty};
use nbelnet::selection;
use nbelnet::theory;

fn small_instance(entries: &[f64], counts: &[u8], theta: f64) -> Dataset<f64> {
    let n = counts.len();
    let p = entries.len() / n;
    let x = Array2::from_shape_fn((n, p), |(i, j)| entries[i * p + j]);
    Dataset::new(x, counts.iter().map(|&c| c as u64).collect(), theta).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_convex_along_segments(
        entries in prop::collection::vec(-1.5f64..1.5, 12),
        counts in prop::collection::vec(0u8..6, 4),
        b1 in prop::collection::vec(-0.8f64..0.8, 3),
        b2 in prop::collection::vec(-0.8f64..0.8, 3),
        t in 0.0f64..1.0,
        theta in 0.4f64..8.0,
    ) {
        let data = small_instance(&entries, &counts, theta);
        let beta1 = Array1::from_vec(b1);
        let beta2 = Array1::from_vec(b2);
        let mix = &beta1 * t + &beta2 * (1.0 - t);
        let lhs = model::nb_loss(&mix.view(), &data).unwrap();
        let rhs = t * model::nb_loss(&beta1.view(), &data).unwrap()
            + (1.0 - t) * model::nb_loss(&beta2.view(), &data).unwrap();
        prop_assert!(lhs <= rhs + 1e-10, "convexity violated: {lhs} > {rhs}");
    }

    #[test]
    fn bregman_ordering(
        entries in prop::collection::vec(-1.5f64..1.5, 12),
        counts in prop::collection::vec(0u8..6, 4),
        b1 in prop::collection::vec(-0.8f64..0.8, 3),
        b2 in prop::collection::vec(-0.8f64..0.8, 3),
        lambda2 in 0.0f64..0.8,
        theta in 0.4f64..8.0,
    ) {
        let data = small_instance(&entries, &counts, theta);
        let beta1 = Array1::from_vec(b1);
        let beta2 = Array1::from_vec(b2);
        let pen = Penalty::new(0.0, lambda2).unwrap();
        let plain =
            model::bregman_symmetric(&beta1.view(), &beta2.view(), &data, &pen, false).unwrap();
        let ridge =
            model::bregman_symmetric(&beta1.view(), &beta2.view(), &data, &pen, true).unwrap();
        prop_assert!(plain >= -1e-12, "plain Bregman negative: {plain}");
        prop_assert!(ridge >= plain - 1e-12, "ridge Bregman below plain");
    }

    #[test]
    fn support_extraction_monotone_and_idempotent(
        beta in prop::collection::vec(-2.0f64..2.0, 8),
        tol_low in 0.0f64..0.5,
        bump in 0.0f64..0.5,
    ) {
        let beta = Array1::from_vec(beta);
        let tol_high = tol_low + bump;
        let loose = selection::support_and_signs(&beta.view(), tol_low);
        let tight = selection::support_and_signs(&beta.view(), tol_high);
        prop_assert!(tight.h_hat.iter().all(|j| loose.h_hat.contains(j)));
        let again = selection::support_and_signs(&beta.view(), tol_low);
        prop_assert_eq!(again, loose);
    }

    #[test]
    fn a_tau_residual_everywhere(frac in 0.0f64..1.0) {
        let tau = frac * theory::max_tau::<f64>();
        let a = theory::a_tau_root(tau).unwrap();
        prop_assert!((0.0..=0.5).contains(&a));
        prop_assert!((a * (-2.0 * a).exp() - tau).abs() <= 1e-12);
    }

    #[test]
    fn honest_dimension_plugs_back(a in 1.05f64..3.0, delta in 0.001f64..0.9) {
        let p = theory::honest_dimension(a, delta).unwrap();
        let back = 5.0 * p * (2.0 * p).powf(-a * a);
        prop_assert!((back - delta).abs() <= 1e-9 * delta.max(1.0));
    }
}
