//! Cross-check of the design-condition diagnostics against a second,
//! independently written evaluation of the same quantities.

use ndarray::Array1;

use nbelnet::model::Penalty;
use nbelnet::selection::{self, ConditionParams};
use nbelnet::simulate::{self, DesignKind, SimSpec};
use nbelnet::solver::{self, SolverConfig};

struct NaiveReport {
    identifiable_ok: bool,
    max_offdiag_rho: f64,
    wcc1_ok: bool,
    wcc2_ok: bool,
    irrepresentable_i: f64,
    ussc_ok: bool,
}

/// Direct transliteration of the condition definitions with plain loops
/// and raw exponentials; shares no helper code with the library path.
#[allow(clippy::needless_range_loop, clippy::too_many_arguments)]
fn naive_conditions(
    x: &ndarray::Array2<f64>,
    y: &[f64],
    beta_hat: &Array1<f64>,
    beta_star: &Array1<f64>,
    support: &[usize],
    theta: f64,
    h: f64,
    l1: f64,
    l2: f64,
    compat_route_bound: f64,
) -> NaiveReport {
    let n = x.nrows();
    let nf = n as f64;
    let d = support.len() as f64;
    let threshold = h / (theta * d);

    let mut max_offdiag_rho = 0.0f64;
    for (a, &k) in support.iter().enumerate() {
        for &l in &support[a + 1..] {
            let mut sum = 0.0;
            for i in 0..n {
                sum += x[(i, k)] * x[(i, l)];
            }
            max_offdiag_rho = max_offdiag_rho.max((sum / nf).abs());
        }
    }

    let eta = |beta: &Array1<f64>, i: usize| -> f64 {
        (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum()
    };

    let mut wcc1_off = 0.0f64;
    let mut wcc1_diag = 0.0f64;
    let mut wcc2_off = 0.0f64;
    let mut wcc2_diag = 0.0f64;
    for endpoint in [beta_hat, beta_star] {
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let e = eta(endpoint, i).exp();
                theta * e / (theta + e).powi(2)
            })
            .collect();
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let e = eta(endpoint, i).exp();
                y[i] * e / (theta + e).powi(2)
            })
            .collect();
        for (a, &k) in support.iter().enumerate() {
            let mut d1 = 0.0;
            let mut d1c = 0.0;
            let mut d2 = 0.0;
            for i in 0..n {
                d1 += x[(i, k)] * x[(i, k)] * w[i];
                d1c += x[(i, k)] * x[(i, k)] * (1.0 - w[i]);
                d2 += x[(i, k)] * x[(i, k)] * v[i];
            }
            wcc1_diag = wcc1_diag.max((d1 / nf).abs()).max((d1c / nf).abs());
            wcc2_diag = wcc2_diag.max((d2 / nf).abs());
            for &l in &support[a + 1..] {
                let mut o1 = 0.0;
                let mut o1c = 0.0;
                let mut o2 = 0.0;
                for i in 0..n {
                    o1 += x[(i, k)] * x[(i, l)] * w[i];
                    o1c += x[(i, k)] * x[(i, l)] * (1.0 - w[i]);
                    o2 += x[(i, k)] * x[(i, l)] * v[i];
                }
                wcc1_off = wcc1_off.max((o1 / nf).abs()).max((o1c / nf).abs());
                wcc2_off = wcc2_off.max((o2 / nf).abs());
            }
        }
    }

    let mut irrepresentable_i = 0.0f64;
    for i in 0..n {
        let mut uh = 0.0;
        let mut us = 0.0;
        for &j in support {
            uh += x[(i, j)] * beta_hat[j];
            us += x[(i, j)] * beta_star[j];
        }
        let diff = uh - us;
        let ratio = if diff.abs() < 1e-12 {
            1.0
        } else {
            (diff.exp() - 1.0) / diff
        };
        let value = theta * (theta + y[i]) / (theta + uh.exp()) * ratio;
        irrepresentable_i = irrepresentable_i.max(value.abs());
    }

    let min_signal = support
        .iter()
        .map(|&j| beta_star[j].abs())
        .fold(f64::INFINITY, f64::min);

    NaiveReport {
        identifiable_ok: max_offdiag_rho <= threshold,
        max_offdiag_rho,
        wcc1_ok: wcc1_off <= threshold && wcc1_diag <= l1 * threshold,
        wcc2_ok: wcc2_off <= threshold && wcc2_diag <= l2 * threshold,
        irrepresentable_i,
        ussc_ok: min_signal >= compat_route_bound,
    }
}

#[test]
fn conditions_agree_with_independent_evaluation() {
    // AR(1) design with rho = 0.3, d* = 4, theta = 2, h = 0.9, columns
    // rescaled so (theta/n) sum x^2 = 1 as the identifiable check assumes.
    let theta = 2.0f64;
    let spec = SimSpec {
        n: 250,
        p: 10,
        d_star: 4,
        beta_min: 0.6,
        beta_max: 0.6,
        design: DesignKind::Ar1(0.3),
        clamp_l: 3.0,
        theta,
        seed: 2024,
    };
    let rep = simulate::make_replicate(&spec, simulate::derive_seed(spec.seed, 0)).unwrap();
    let mut x = rep.data.x().clone();
    x.mapv_inplace(|v| v / theta.sqrt());
    let y_counts: Vec<u64> = rep.data.y().iter().map(|&v| v as u64).collect();
    let data = nbelnet::model::Dataset::new(x.clone(), y_counts.clone(), theta).unwrap();
    // the rescaled design carries the same response; refit on it
    let pen = Penalty::new(0.05, 0.05).unwrap();
    let fit = solver::fit(&data, &pen, &SolverConfig::default(), None).unwrap();
    assert!(fit.converged);

    let support: Vec<usize> = (0..4).collect();
    let params = ConditionParams {
        h: 0.9,
        l1: 1.5,
        l2: 1.5,
        compat_l1_bound: 0.25,
    };
    let report = selection::check_design_conditions(
        &data,
        &fit.beta.view(),
        &rep.beta_star.view(),
        &support,
        &params,
    )
    .unwrap();

    let y_f: Vec<f64> = y_counts.iter().map(|&v| v as f64).collect();
    let naive = naive_conditions(
        &x,
        &y_f,
        &fit.beta,
        &rep.beta_star,
        &support,
        theta,
        0.9,
        1.5,
        1.5,
        0.25,
    );
    assert_eq!(report.identifiable_ok, naive.identifiable_ok);
    assert!(
        (report.max_offdiag_rho - naive.max_offdiag_rho).abs()
            <= 1e-12 * naive.max_offdiag_rho.max(1.0)
    );
    assert_eq!(report.wcc1_ok, naive.wcc1_ok);
    assert_eq!(report.wcc2_ok, naive.wcc2_ok);
    assert!(
        (report.irrepresentable_i - naive.irrepresentable_i).abs()
            <= 1e-10 * naive.irrepresentable_i.max(1.0),
        "{} vs {}",
        report.irrepresentable_i,
        naive.irrepresentable_i
    );
    assert_eq!(report.ussc_ok, naive.ussc_ok);
}

#[test]
fn orthogonal_support_is_identifiable_for_any_h() {
    // Orthogonal columns within the support: the off-diagonal maximum is 0.
    let n = 8;
    let mut x = ndarray::Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        x[(i, 0)] = if i % 2 == 0 { 1.0 } else { -1.0 };
        x[(i, 1)] = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
        x[(i, 2)] = if (i / 4) % 2 == 0 { 1.0 } else { -1.0 };
    }
    let data = nbelnet::model::Dataset::new(x, vec![1; n], 1.0).unwrap();
    let beta = Array1::zeros(3);
    let params = ConditionParams {
        h: 1e-6,
        l1: 10.0,
        l2: 10.0,
        compat_l1_bound: 0.0,
    };
    let report = selection::check_design_conditions(
        &data,
        &beta.view(),
        &beta.view(),
        &[0, 1, 2],
        &params,
    )
    .unwrap();
    assert_eq!(report.max_offdiag_rho, 0.0);
    assert!(report.identifiable_ok);
}

#[test]
fn irrepresentable_limit_at_equal_endpoints() {
    // beta_hat = beta_star: the 0/0 ratio limit is 1 and the statistic is
    // max_i theta (theta + y_i)/(theta + e^{x_iH' beta_H}).
    let spec = SimSpec {
        n: 50,
        p: 4,
        d_star: 2,
        beta_min: 0.5,
        beta_max: 0.5,
        design: DesignKind::IidGaussian,
        clamp_l: 2.5,
        theta: 2.0,
        seed: 77,
    };
    let rep = simulate::make_replicate(&spec, simulate::derive_seed(spec.seed, 0)).unwrap();
    let params = ConditionParams {
        h: 0.5,
        l1: 1.0,
        l2: 1.0,
        compat_l1_bound: 0.1,
    };
    let report = selection::check_design_conditions(
        &rep.data,
        &rep.beta_star.view(),
        &rep.beta_star.view(),
        &[0, 1],
        &params,
    )
    .unwrap();
    let mut expected = 0.0f64;
    for i in 0..spec.n {
        let u: f64 = (0..2).map(|j| rep.data.x()[(i, j)] * rep.beta_star[j]).sum();
        let v = 2.0 * (2.0 + rep.data.y()[i]) / (2.0 + u.exp());
        expected = expected.max(v);
    }
    assert!((report.irrepresentable_i - expected).abs() <= 1e-12 * expected);
}
