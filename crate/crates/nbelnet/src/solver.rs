//! Elastic-net NB fitting by proximal gradient descent, with optimality
//! certified through the coordinatewise KKT conditions.
//!
//! The proximal map of `t (lambda1 ||.||_1 + lambda2 ||.||_2^2)` is the
//! coordinatewise soft threshold followed by ridge shrinkage,
//! `soft(z, t lambda1) / (1 + 2 t lambda2)`, so iterates carry exact
//! zeros and the fitted support can be read directly off the solution.
//! Convergence is declared on the KKT residual, not on objective change:
//! everything downstream (grouping bound, selection events, the de-biased
//! rewrite) is phrased through the KKT system.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::model::{self, Dataset, Penalty};
use crate::num::Real;

/// Proximal-gradient solver knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig<F: Real> {
    /// KKT tolerance declaring convergence.
    pub tol: F,
    /// Iteration cap.
    pub max_iter: usize,
    /// Initial step size for the backtracking line search.
    pub step_init: F,
    /// Multiplicative step shrink factor in (0, 1).
    pub backtrack: F,
}

impl<F: Real> Default for SolverConfig<F> {
    fn default() -> Self {
        Self {
            tol: F::cast(1e-8),
            max_iter: 10_000,
            step_init: F::one(),
            backtrack: F::cast(0.5),
        }
    }
}

impl<F: Real> SolverConfig<F> {
    fn validate(&self) -> Result<()> {
        if !(self.tol > F::zero()) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.step_init > F::zero()) {
            return Err(Error::InvalidParameter("step_init must be positive".into()));
        }
        if !(self.backtrack > F::zero() && self.backtrack < F::one()) {
            return Err(Error::InvalidParameter(
                "backtrack must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

/// Coordinatewise KKT residuals at a candidate solution.
#[derive(Debug, Clone)]
pub struct KktReport<F: Real> {
    /// Per-coordinate residuals.
    pub residuals: Array1<F>,
    /// Largest residual.
    pub max_violation: F,
    /// `max_violation <= tol` for the tolerance used.
    pub satisfied: bool,
    /// Tolerance the report was evaluated at.
    pub tol: F,
    /// With `lambda2 > 0` the certificate is necessary *and* sufficient;
    /// with `lambda2 = 0` the nonzero branch is only necessary.
    pub exact_certificate: bool,
}

/// A fitted elastic-net NB estimate.
#[derive(Debug, Clone)]
pub struct Fit<F: Real> {
    pub beta: Array1<F>,
    pub objective_value: F,
    pub iterations: usize,
    pub converged: bool,
    pub kkt: KktReport<F>,
    /// Penalized objective after each accepted step (entry 0 is the start
    /// point), reported relative to the loss at `beta = 0`, an additive
    /// constant shared across entries; differences between entries are
    /// exact at unit scale.
    pub objective_trace: Vec<F>,
}

/// Soft-threshold operator `sign(z) max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold<F: Real>(z: F, t: F) -> F {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        F::zero()
    }
}

fn prox_step<F: Real>(beta: &Array1<F>, grad: &Array1<F>, step: F, pen: &Penalty<F>) -> Array1<F> {
    let denom = F::one() + F::cast(2.0) * step * pen.lambda2;
    Array1::from_iter(beta.iter().zip(grad.iter()).map(|(&b, &g)| {
        soft_threshold(b - step * g, step * pen.lambda1) / denom
    }))
}

/// Evaluates the coordinatewise KKT residuals of Lemma-style optimality:
/// on the nonzero branch `|score_k + sgn(b_k)(lambda1 + 2 lambda2 |b_k|)|`,
/// on the zero branch `max(0, |score_k| - lambda1)`.
pub fn kkt_check<F: Real>(
    beta: &ArrayView1<F>,
    data: &Dataset<F>,
    pen: &Penalty<F>,
    tol: F,
) -> Result<KktReport<F>> {
    let score = model::nb_score(beta, data)?;
    Ok(kkt_from_score(beta, &score, pen, tol))
}

fn kkt_from_score<F: Real>(
    beta: &ArrayView1<F>,
    score: &Array1<F>,
    pen: &Penalty<F>,
    tol: F,
) -> KktReport<F> {
    let two = F::cast(2.0);
    let residuals = Array1::from_iter(beta.iter().zip(score.iter()).map(|(&b, &g)| {
        if b != F::zero() {
            (g + b.signum() * (pen.lambda1 + two * pen.lambda2 * b.abs())).abs()
        } else {
            (g.abs() - pen.lambda1).max(F::zero())
        }
    }));
    let max_violation = residuals.iter().fold(F::zero(), |acc, &r| acc.max(r));
    KktReport {
        max_violation,
        satisfied: max_violation <= tol,
        tol,
        exact_certificate: pen.lambda2 > F::zero(),
        residuals,
    }
}

/// Fits the elastic-net NB estimate by proximal gradient with backtracking.
///
/// Returns the best iterate with `converged = false` when the KKT residual
/// has not dropped below `config.tol` within `config.max_iter` iterations.
/// The accepted objective sequence is nonincreasing and the whole procedure
/// is deterministic in its inputs.
pub fn fit<F: Real>(
    data: &Dataset<F>,
    pen: &Penalty<F>,
    config: &SolverConfig<F>,
    beta0: Option<&ArrayView1<F>>,
) -> Result<Fit<F>> {
    config.validate()?;
    if pen.lambda1 == F::zero() && pen.lambda2 == F::zero() && data.p() > data.n() {
        log::warn!(
            "unpenalized fit with p = {} > n = {}: the MLE may not exist",
            data.p(),
            data.n()
        );
    }
    let mut beta = match beta0 {
        Some(b) => {
            if b.len() != data.p() {
                return Err(Error::DimensionMismatch(format!(
                    "warm start has length {}, design has {} columns",
                    b.len(),
                    data.p()
                )));
            }
            b.to_owned()
        }
        None => Array1::zeros(data.p()),
    };

    // The line search runs on the shifted loss (same gradient, same
    // minimizer, unit-scale terms), so acceptance comparisons keep full
    // precision even when theta log(theta) dwarfs the per-step decrease.
    let mut loss = model::nb_loss_shifted(&beta.view(), data)?;
    let mut step = config.step_init;
    let min_step = F::cast(1e-20);
    let mut iterations = 0usize;
    let mut converged = false;
    let mut score = model::nb_score(&beta.view(), data)?;
    let mut objective_trace = vec![loss + pen.value(&beta.view())];

    for iter in 0..config.max_iter {
        let report = kkt_from_score(&beta.view(), &score, pen, config.tol);
        if report.satisfied {
            converged = true;
            iterations = iter;
            break;
        }
        iterations = iter + 1;

        // Try a slightly larger step than last time, then backtrack on the
        // quadratic upper-bound condition; trial points that overflow the
        // linear predictor are treated as rejections.
        step /= config.backtrack;
        let mut accepted = None;
        while step >= min_step {
            let candidate = prox_step(&beta, &score, step, pen);
            match model::nb_loss_shifted(&candidate.view(), data) {
                Ok(cand_loss) => {
                    let mut dot = F::zero();
                    let mut sq = F::zero();
                    for j in 0..beta.len() {
                        let d = candidate[j] - beta[j];
                        dot += score[j] * d;
                        sq += d * d;
                    }
                    let bound = loss + dot + sq / (F::cast(2.0) * step);
                    if cand_loss <= bound + F::cast(1e-15) * bound.abs() {
                        accepted = Some((candidate, cand_loss));
                        break;
                    }
                }
                Err(Error::Domain(_)) => {}
                Err(e) => return Err(e),
            }
            step *= config.backtrack;
        }
        let Some((next, next_loss)) = accepted else {
            break; // line search stalled at the minimum step
        };
        beta = next;
        loss = next_loss;
        objective_trace.push(loss + pen.value(&beta.view()));
        score = model::nb_score(&beta.view(), data)?;
    }

    if !converged {
        let report = kkt_from_score(&beta.view(), &score, pen, config.tol);
        converged = report.satisfied;
    }
    let kkt = kkt_from_score(&beta.view(), &score, pen, config.tol);
    let objective_value = model::objective(&beta.view(), data, pen)?;
    Ok(Fit {
        beta,
        objective_value,
        iterations,
        converged,
        kkt,
        objective_trace,
    })
}

/// Warm-started fits along a descending `lambda1` grid at fixed `lambda2`.
pub fn fit_path<F: Real>(
    data: &Dataset<F>,
    lambda1_grid: &[F],
    lambda2: F,
    config: &SolverConfig<F>,
) -> Result<Vec<Fit<F>>> {
    if lambda1_grid.is_empty() {
        return Err(Error::InvalidParameter("empty lambda1 grid".into()));
    }
    if lambda1_grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter(
            "lambda1 grid must be sorted in descending order".into(),
        ));
    }
    let mut fits = Vec::with_capacity(lambda1_grid.len());
    let mut warm: Option<Array1<F>> = None;
    for &lambda1 in lambda1_grid {
        let pen = Penalty::new(lambda1, lambda2)?;
        let fit_result = fit(data, &pen, config, warm.as_ref().map(|b| b.view()).as_ref())?;
        warm = Some(fit_result.beta.clone());
        fits.push(fit_result);
    }
    Ok(fits)
}

/// Exhaustive grid minimizer of the penalized objective over
/// `[-box_radius, box_radius]^p`; the independent oracle for `p <= 3`.
pub fn brute_force_fit<F: Real>(
    data: &Dataset<F>,
    pen: &Penalty<F>,
    box_radius: F,
    step: F,
) -> Result<Array1<F>> {
    let p = data.p();
    if p > 3 {
        return Err(Error::InvalidParameter(format!(
            "brute force oracle supports p <= 3, got p = {p}"
        )));
    }
    if !(step > F::zero()) || !(box_radius > F::zero()) {
        return Err(Error::InvalidParameter(
            "box radius and step must be positive".into(),
        ));
    }
    let m = (F::cast(2.0) * box_radius / step).to_f64().round() as usize;
    let grid: Vec<F> = (0..=m)
        .map(|k| -box_radius + F::cast(k as f64) * step)
        .collect();
    let mut best = Array1::zeros(p);
    let mut best_val = F::infinity();
    let mut candidate = Array1::zeros(p);
    let consider = |cand: &Array1<F>, best: &mut Array1<F>, best_val: &mut F| {
        if let Ok(v) = model::objective(&cand.view(), data, pen) {
            if v < *best_val {
                *best_val = v;
                best.assign(cand);
            }
        }
    };
    match p {
        1 => {
            for &a in &grid {
                candidate[0] = a;
                consider(&candidate, &mut best, &mut best_val);
            }
        }
        2 => {
            for &a in &grid {
                candidate[0] = a;
                for &b in &grid {
                    candidate[1] = b;
                    consider(&candidate, &mut best, &mut best_val);
                }
            }
        }
        _ => {
            for &a in &grid {
                candidate[0] = a;
                for &b in &grid {
                    candidate[1] = b;
                    for &c in &grid {
                        candidate[2] = c;
                        consider(&candidate, &mut best, &mut best_val);
                    }
                }
            }
        }
    }
    if !best_val.is_finite() {
        return Err(Error::Domain(
            "objective non-finite over the whole search box".into(),
        ));
    }
    Ok(best)
}

/// Grid search followed by repeated local zooming around the incumbent;
/// refines [`brute_force_fit`] to roughly `step * 10^-rounds` resolution.
pub fn brute_force_refined<F: Real>(
    data: &Dataset<F>,
    pen: &Penalty<F>,
    box_radius: F,
    step: F,
    rounds: usize,
) -> Result<Array1<F>> {
    let mut center = brute_force_fit(data, pen, box_radius, step)?;
    let mut width = step;
    let ten = F::cast(10.0);
    for _ in 0..rounds {
        let fine = width / ten;
        center = local_grid_min(data, pen, &center, width, fine)?;
        width = fine;
    }
    Ok(center)
}

fn local_grid_min<F: Real>(
    data: &Dataset<F>,
    pen: &Penalty<F>,
    center: &Array1<F>,
    radius: F,
    step: F,
) -> Result<Array1<F>> {
    let p = center.len();
    let m = (F::cast(2.0) * radius / step).to_f64().round() as usize;
    let axis = |c: F| -> Vec<F> {
        (0..=m)
            .map(|k| c - radius + F::cast(k as f64) * step)
            .collect()
    };
    let mut best = center.clone();
    let mut best_val = model::objective(&center.view(), data, pen)?;
    let mut candidate = center.clone();
    let grids: Vec<Vec<F>> = (0..p).map(|j| axis(center[j])).collect();
    let mut index = vec![0usize; p];
    loop {
        for j in 0..p {
            candidate[j] = grids[j][index[j]];
        }
        if let Ok(v) = model::objective(&candidate.view(), data, pen) {
            if v < best_val {
                best_val = v;
                best.assign(&candidate);
            }
        }
        // odometer increment over the p-dimensional grid
        let mut j = 0;
        loop {
            if j == p {
                return Ok(best);
            }
            index[j] += 1;
            if index[j] <= m {
                break;
            }
            index[j] = 0;
            j += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(n: usize, p: usize, theta: f64, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-1.2..1.2f64));
        let beta_true = Array1::from_shape_fn(p, |j| if j % 2 == 0 { 0.6f64 } else { -0.4 });
        let y: Vec<u64> = x
            .rows()
            .into_iter()
            .map(|row| {
                let mu: f64 = row.dot(&beta_true).exp();
                let noise: f64 = rng.gen_range(0.0..1.0);
                (mu + noise).floor() as u64
            })
            .collect();
        Dataset::new(x, y, theta).unwrap()
    }

    #[test]
    fn large_lambda1_gives_null_fit() {
        let data = random_instance(30, 4, 2.0, 1);
        let zero = Array1::zeros(4);
        let score0 = model::nb_score(&zero.view(), &data).unwrap();
        let lambda_max = score0.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        let pen = Penalty::new(lambda_max * 1.001, 0.3).unwrap();
        let fit_res = fit(&data, &pen, &SolverConfig::default(), None).unwrap();
        assert!(fit_res.converged);
        assert!(fit_res.beta.iter().all(|&b| b == 0.0));
        assert_eq!(fit_res.iterations, 0);
    }

    #[test]
    fn p1_fit_matches_grid_minimizer() {
        let data = random_instance(40, 1, 1.0, 2);
        let pen = Penalty::new(0.05, 0.1).unwrap();
        let fit_res = fit(&data, &pen, &SolverConfig::default(), None).unwrap();
        assert!(fit_res.converged);
        let oracle = brute_force_fit(&data, &pen, 10.0, 1e-3).unwrap();
        assert!(
            (fit_res.beta[0] - oracle[0]).abs() <= 2e-3,
            "{} vs {}",
            fit_res.beta[0],
            oracle[0]
        );
    }

    #[test]
    fn duplicated_columns_share_a_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let col: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = Array2::zeros((n, 2));
        for i in 0..n {
            x[(i, 0)] = col[i];
            x[(i, 1)] = col[i];
        }
        let y: Vec<u64> = col.iter().map(|&c| (c.exp() + 0.5) as u64).collect();
        let data = Dataset::new(x, y, 2.0).unwrap();
        let pen = Penalty::new(0.01, 0.2).unwrap();
        let config = SolverConfig::default();
        let fit_res = fit(&data, &pen, &config, None).unwrap();
        assert!(fit_res.converged);
        assert!((fit_res.beta[0] - fit_res.beta[1]).abs() <= 10.0 * config.tol);
    }

    #[test]
    fn kkt_zero_branch_saturated_point() {
        // n=1, x=[1], y=1: at beta=0, score = theta (1 - 1)/(theta + 1) = 0.
        let data = Dataset::new(arr2(&[[1.0]]), vec![1], 5.0).unwrap();
        for lambda1 in [0.0, 0.2, 3.0] {
            let pen = Penalty::new(lambda1, 0.5).unwrap();
            let report = kkt_check(&arr1(&[0.0]).view(), &data, &pen, 1e-10).unwrap();
            assert!(report.satisfied);
        }
    }

    #[test]
    fn kkt_detects_perturbed_solutions() {
        let data = random_instance(50, 3, 2.0, 4);
        let pen = Penalty::new(0.02, 0.1).unwrap();
        let config = SolverConfig::default();
        let fit_res = fit(&data, &pen, &config, None).unwrap();
        assert!(fit_res.converged);
        assert!(fit_res.kkt.satisfied);

        let mut perturbed = fit_res.beta.clone();
        let j = perturbed
            .iter()
            .position(|&b| b != 0.0)
            .expect("some active coordinate");
        perturbed[j] += 10.0 * config.tol;
        let report = kkt_check(&perturbed.view(), &data, &pen, config.tol).unwrap();
        assert!(!report.satisfied);
    }

    #[test]
    fn path_entries_all_satisfy_kkt() {
        let data = random_instance(35, 5, 1.0, 5);
        let zero = Array1::zeros(5);
        let lambda_max = model::nb_score(&zero.view(), &data)
            .unwrap()
            .iter()
            .fold(0.0f64, |a, &g| a.max(g.abs()));
        let grid: Vec<f64> = (0..6).map(|k| lambda_max * 0.8f64.powi(k)).collect();
        let config = SolverConfig::default();
        let fits = fit_path(&data, &grid, 0.05, &config).unwrap();
        assert_eq!(fits.len(), grid.len());
        let mut prev_l1 = -1.0f64;
        for (fit_res, &l1) in fits.iter().zip(grid.iter()) {
            let pen = Penalty::new(l1, 0.05).unwrap();
            let report = kkt_check(&fit_res.beta.view(), &data, &pen, config.tol).unwrap();
            assert!(report.satisfied, "lambda1 = {l1}");
            let norm: f64 = fit_res.beta.iter().map(|b| b.abs()).sum();
            assert!(norm + 1e-6 >= prev_l1, "l1 norms should grow down the path");
            prev_l1 = norm;
        }
    }

    #[test]
    fn singleton_grid_matches_cold_start() {
        let data = random_instance(30, 3, 2.0, 6);
        let config = SolverConfig::default();
        let path = fit_path(&data, &[0.07], 0.1, &config).unwrap();
        let pen = Penalty::new(0.07, 0.1).unwrap();
        let cold = fit(&data, &pen, &config, None).unwrap();
        for j in 0..3 {
            assert!((path[0].beta[j] - cold.beta[j]).abs() <= 10.0 * config.tol);
        }
    }

    #[test]
    fn path_rejects_unsorted_grid() {
        let data = random_instance(10, 2, 1.0, 7);
        assert!(fit_path(&data, &[0.1, 0.5], 0.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn strict_convexity_start_independence() {
        let data = random_instance(40, 4, 2.0, 8);
        let pen = Penalty::new(0.03, 0.2).unwrap();
        let config = SolverConfig::default();
        let from_zero = fit(&data, &pen, &config, None).unwrap();
        let start = arr1(&[1.0, -1.0, 0.5, -0.5]);
        let from_away = fit(&data, &pen, &config, Some(&start.view())).unwrap();
        assert!(from_zero.converged && from_away.converged);
        for j in 0..4 {
            assert!(
                (from_zero.beta[j] - from_away.beta[j]).abs() <= 10.0 * config.tol,
                "coordinate {j}"
            );
        }
    }

    #[test]
    fn brute_force_huge_lambda_returns_zero() {
        let data = random_instance(20, 2, 1.0, 9);
        let pen = Penalty::new(50.0, 0.0).unwrap();
        let oracle = brute_force_fit(&data, &pen, 2.0, 0.05).unwrap();
        assert_eq!(oracle, arr1(&[0.0, 0.0]));
    }

    #[test]
    fn brute_force_rejects_large_p() {
        let data = random_instance(10, 4, 1.0, 10);
        let pen = Penalty::new(0.1, 0.1).unwrap();
        assert!(brute_force_fit(&data, &pen, 1.0, 0.5).is_err());
    }

    #[test]
    fn fit_is_at_least_grid_optimal() {
        let data = random_instance(25, 2, 2.0, 11);
        let pen = Penalty::new(0.05, 0.05).unwrap();
        let fit_res = fit(&data, &pen, &SolverConfig::default(), None).unwrap();
        let oracle = brute_force_refined(&data, &pen, 3.0, 1e-2, 2).unwrap();
        let f_fit = model::objective(&fit_res.beta.view(), &data, &pen).unwrap();
        let f_oracle = model::objective(&oracle.view(), &data, &pen).unwrap();
        assert!(f_oracle >= f_fit - 1e-6);
        assert!((f_fit - f_oracle).abs() <= 1e-6);
        for j in 0..2 {
            assert!((fit_res.beta[j] - oracle[j]).abs() <= 2e-2);
        }
    }

    #[test]
    fn soft_threshold_cases() {
        assert_relative_eq!(soft_threshold(5.0, 2.0), 3.0);
        assert_relative_eq!(soft_threshold(-5.0, 2.0), -3.0);
        assert_eq!(soft_threshold(1.0, 2.0), 0.0);
        assert_eq!(soft_threshold(-2.0, 2.0), 0.0);
    }
}
