//! Design generation, NB sampling, the dispersion test and the seeded
//! replication engine.
//!
//! Determinism contract: every randomized routine takes an explicit seed,
//! replicate `i` of a run draws from streams derived as
//! `splitmix(master ^ golden * i)`, and aggregation walks replicates in
//! index order, so summaries are identical for any thread count.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::debias;
use crate::error::{Error, Result};
use crate::model::{self, Dataset, Penalty};
use crate::num::Real;
use crate::selection;
use crate::solver::{self, SolverConfig};
use crate::theory::{self, ConeSpec, GramSigma, TheoryConfig, TheoryReport};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-stream seed for (master, index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index.wrapping_mul(GOLDEN))
}

/// Design family for simulated covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DesignKind<F: Real> {
    IidGaussian,
    /// Row-wise AR(1) correlation `rho^{|j-k|}`.
    Ar1(F),
    /// Constant off-diagonal correlation `rho`.
    Equicorrelated(F),
    /// Column `2k+1` is an exact copy of column `2k`.
    DuplicatedPairs,
}

/// Generative configuration for one simulated regression problem.
#[derive(Debug, Clone, Copy)]
pub struct SimSpec<F: Real> {
    pub n: usize,
    pub p: usize,
    pub d_star: usize,
    /// Nonzero coefficients have magnitudes in `[beta_min, beta_max]`
    /// (equal endpoints pin them to `beta_min`) and alternating signs.
    pub beta_min: F,
    pub beta_max: F,
    pub design: DesignKind<F>,
    /// Raw covariates are truncated to `[-clamp_l, clamp_l]` before
    /// standardization.
    pub clamp_l: F,
    pub theta: F,
    pub seed: u64,
}

impl<F: Real> SimSpec<F> {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::InvalidParameter("n and p must be >= 1".into()));
        }
        if self.d_star > self.p {
            return Err(Error::InvalidParameter(format!(
                "d_star = {} exceeds p = {}",
                self.d_star, self.p
            )));
        }
        if !(self.clamp_l > F::zero()) {
            return Err(Error::InvalidParameter("clamp_l must be positive".into()));
        }
        if !(self.theta > F::zero()) {
            return Err(Error::InvalidParameter("theta must be positive".into()));
        }
        if self.beta_min < F::zero() || self.beta_max < self.beta_min {
            return Err(Error::InvalidParameter(
                "need 0 <= beta_min <= beta_max".into(),
            ));
        }
        match self.design {
            DesignKind::Ar1(rho) if rho.abs() >= F::one() => Err(Error::InvalidParameter(
                "ar1 rho must lie in (-1, 1)".into(),
            )),
            DesignKind::Equicorrelated(rho) if rho < F::zero() || rho >= F::one() => Err(
                Error::InvalidParameter("equicorrelated rho must lie in [0, 1)".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Generates a design matrix, clamped to `[-L, L]`, then each column
/// centered to mean zero and scaled to `(1/n) sum x_ij^2 = 1`.
pub fn gen_design<F: Real>(spec: &SimSpec<F>) -> Result<Array2<F>> {
    gen_design_seeded(spec, spec.seed)
}

/// Same as [`gen_design`] with an explicit seed (the replication engine
/// derives a fresh one per replicate).
pub fn gen_design_seeded<F: Real>(spec: &SimSpec<F>, seed: u64) -> Result<Array2<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p) = (spec.n, spec.p);
    let mut x = Array2::zeros((n, p));
    match spec.design {
        DesignKind::IidGaussian => {
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = F::standard_normal(&mut rng);
                }
            }
        }
        DesignKind::Ar1(rho) => {
            let innovation = (F::one() - rho * rho).sqrt();
            for i in 0..n {
                let mut prev = F::standard_normal(&mut rng);
                x[(i, 0)] = prev;
                for j in 1..p {
                    prev = rho * prev + innovation * F::standard_normal(&mut rng);
                    x[(i, j)] = prev;
                }
            }
        }
        DesignKind::Equicorrelated(rho) => {
            let own = (F::one() - rho).sqrt();
            let shared_scale = rho.sqrt();
            for i in 0..n {
                let shared = F::standard_normal(&mut rng);
                for j in 0..p {
                    x[(i, j)] = own * F::standard_normal(&mut rng) + shared_scale * shared;
                }
            }
        }
        DesignKind::DuplicatedPairs => {
            for i in 0..n {
                for j in 0..p {
                    if j.is_multiple_of(2) {
                        x[(i, j)] = F::standard_normal(&mut rng);
                    } else {
                        x[(i, j)] = x[(i, j - 1)];
                    }
                }
            }
        }
    }

    let limit = spec.clamp_l;
    x.mapv_inplace(|v| v.max(-limit).min(limit));

    let n_f = F::cast(n as f64);
    for j in 0..p {
        let mut col = x.column_mut(j);
        let mean = col.sum() / n_f;
        col.mapv_inplace(|v| v - mean);
        let ms = col.iter().map(|&v| v * v).sum::<F>() / n_f;
        if !(ms > F::cast(1e-24)) {
            return Err(Error::Degenerate(format!(
                "column {j} is constant before standardization"
            )));
        }
        let scale = ms.sqrt();
        col.mapv_inplace(|v| v / scale);
    }
    Ok(x)
}

/// True coefficient vector on the support `{0, ..., d_star - 1}`:
/// alternating signs, magnitudes at `beta_min` (or drawn uniformly from
/// `[beta_min, beta_max]` when the interval is nondegenerate).
pub fn make_beta_star<F: Real>(spec: &SimSpec<F>) -> Array1<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX));
    let mut beta = Array1::zeros(spec.p);
    for j in 0..spec.d_star {
        let magnitude = if spec.beta_max > spec.beta_min {
            spec.beta_min + (spec.beta_max - spec.beta_min) * F::uniform_01(&mut rng)
        } else {
            spec.beta_min
        };
        let sign = if j % 2 == 0 { F::one() } else { -F::one() };
        beta[j] = sign * magnitude;
    }
    beta
}

/// Samples NB counts with means `mu` and dispersion `theta` through the
/// Gamma(shape `theta`, scale `mu/theta`) - Poisson mixture.
pub fn sample_nb<F: Real>(mu: &ArrayView1<F>, theta: F, seed: u64) -> Result<Vec<u64>> {
    if !(theta > F::zero()) || !theta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(mu.len());
    for (i, &m) in mu.iter().enumerate() {
        if !(m > F::zero()) || !m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mu[{i}] = {m} must be positive and finite"
            )));
        }
        let rate = F::gamma(theta, m / theta, &mut rng);
        out.push(F::poisson(rate, &mut rng));
    }
    Ok(out)
}

/// Auxiliary-regression variant of the overdispersion test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionVariant {
    /// `Var = mu + alpha mu`.
    Linear,
    /// `Var = mu + alpha mu^2`.
    Quadratic,
}

impl FromStr for DispersionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::InvalidParameter(format!(
                "unknown dispersion-test variant '{other}' (expected linear|quadratic)"
            ))),
        }
    }
}

/// Result of the auxiliary overdispersion regression.
#[derive(Debug, Clone, Copy)]
pub struct DispersionTest<F: Real> {
    pub alpha_hat: F,
    pub t_stat: F,
    pub p_value: F,
}

/// Tests for overdispersion: no-intercept least squares of
/// `((y - mu)^2 - y)/mu` on `g(mu)/mu` with `g(mu) = mu` (linear) or
/// `mu^2` (quadratic); returns the slope, its t-statistic and a two-sided
/// p-value against `alpha = 0`.
pub fn cameron_trivedi_test<F: Real>(
    y: &[u64],
    mu_hat: &ArrayView1<F>,
    variant: DispersionVariant,
) -> Result<DispersionTest<F>> {
    let n = y.len();
    if n != mu_hat.len() {
        return Err(Error::DimensionMismatch(format!(
            "y has length {n}, mu_hat has length {}",
            mu_hat.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidParameter(
            "dispersion test needs at least 3 observations".into(),
        ));
    }
    let mut zz = F::zero();
    let mut zt = F::zero();
    let mut regressand = Vec::with_capacity(n);
    let mut regressor = Vec::with_capacity(n);
    for (i, (&yi, &mi)) in y.iter().zip(mu_hat.iter()).enumerate() {
        if !(mi > F::zero()) {
            return Err(Error::InvalidParameter(format!(
                "mu_hat[{i}] = {mi} must be positive"
            )));
        }
        let yf = F::cast(yi as f64);
        let t = ((yf - mi) * (yf - mi) - yf) / mi;
        let z = match variant {
            DispersionVariant::Linear => F::one(),
            DispersionVariant::Quadratic => mi,
        };
        zz += z * z;
        zt += z * t;
        regressand.push(t);
        regressor.push(z);
    }
    if !(zz > F::zero()) {
        return Err(Error::Degenerate("zero regressor in dispersion test".into()));
    }
    let alpha_hat = zt / zz;
    let mut rss = F::zero();
    for i in 0..n {
        let e = regressand[i] - alpha_hat * regressor[i];
        rss += e * e;
    }
    let df = F::cast((n - 1) as f64);
    let sigma2 = rss / df;
    if !(sigma2 > F::zero()) {
        // residuals identically zero: no evidence either way
        return Ok(DispersionTest {
            alpha_hat,
            t_stat: F::zero(),
            p_value: F::one(),
        });
    }
    let se = (sigma2 / zz).sqrt();
    let t_stat = alpha_hat / se;
    let dist = StudentsT::new(0.0, 1.0, df.to_f64())
        .map_err(|e| Error::InvalidParameter(format!("t distribution: {e}")))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t_stat.to_f64().abs()));
    Ok(DispersionTest {
        alpha_hat,
        t_stat,
        p_value: F::cast(p_value.clamp(0.0, 1.0)),
    })
}

/// Registered replication experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    FitError,
    OracleCheck,
    SignConsistency,
    HonestSelection,
    DebiasCoverage,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FitError => "fit-error",
            Self::OracleCheck => "oracle-check",
            Self::SignConsistency => "sign-consistency",
            Self::HonestSelection => "honest-selection",
            Self::DebiasCoverage => "debias-coverage",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit-error" => Ok(Self::FitError),
            "oracle-check" => Ok(Self::OracleCheck),
            "sign-consistency" => Ok(Self::SignConsistency),
            "honest-selection" => Ok(Self::HonestSelection),
            "debias-coverage" => Ok(Self::DebiasCoverage),
            other => Err(Error::UnknownExperiment(other.to_string())),
        }
    }
}

/// A fully parameterized experiment to replicate.
#[derive(Debug, Clone)]
pub enum Experiment<F: Real> {
    FitError {
        pen: Penalty<F>,
        solver: SolverConfig<F>,
    },
    OracleCheck {
        pen: Penalty<F>,
        solver: SolverConfig<F>,
        theory: TheoryConfig<F>,
        q: F,
    },
    SignConsistency {
        pen: Penalty<F>,
        solver: SolverConfig<F>,
        /// Split of the KKT budget between the score event `E2` and the
        /// score-increment event `E3`.
        eta: F,
    },
    HonestSelection {
        pen: Penalty<F>,
        solver: SolverConfig<F>,
        theory: TheoryConfig<F>,
    },
    DebiasCoverage {
        pen: Penalty<F>,
        solver: SolverConfig<F>,
        lambda_node: F,
        level: F,
    },
}

impl<F: Real> Experiment<F> {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Self::FitError { .. } => ExperimentKind::FitError,
            Self::OracleCheck { .. } => ExperimentKind::OracleCheck,
            Self::SignConsistency { .. } => ExperimentKind::SignConsistency,
            Self::HonestSelection { .. } => ExperimentKind::HonestSelection,
            Self::DebiasCoverage { .. } => ExperimentKind::DebiasCoverage,
        }
    }
}

/// Per-replicate table: named columns, one row per replicate.
#[derive(Debug, Clone)]
pub struct ReplicateTable<F: Real> {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<F>>,
}

/// Monte Carlo aggregates plus the optional per-replicate table.
#[derive(Debug, Clone)]
pub struct ReplicationSummary<F: Real> {
    pub replicates: usize,
    pub metrics: BTreeMap<String, F>,
    pub per_replicate: Option<ReplicateTable<F>>,
}

/// One simulated regression problem plus its generative truth.
pub struct Replicate<F: Real> {
    pub data: Dataset<F>,
    pub beta_star: Array1<F>,
}

/// Builds the design, truth and NB response for one replicate.
pub fn make_replicate<F: Real>(spec: &SimSpec<F>, rep_seed: u64) -> Result<Replicate<F>> {
    let x = gen_design_seeded(spec, derive_seed(rep_seed, 0))?;
    let beta_star = make_beta_star(spec);
    let eta = x.dot(&beta_star);
    let mu = eta.mapv(|u| u.exp());
    let y = sample_nb(&mu.view(), spec.theta, derive_seed(rep_seed, 1))?;
    let data = Dataset::new(x, y, spec.theta)?;
    Ok(Replicate { data, beta_star })
}

/// Runs `replicates` independent repetitions of the experiment with
/// derived sub-seeds and aggregates the per-replicate rows.
pub fn run_replications<F: Real>(
    spec: &SimSpec<F>,
    experiment: &Experiment<F>,
    replicates: usize,
    seed: u64,
) -> Result<ReplicationSummary<F>> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be >= 1".into()));
    }
    spec.validate()?;
    let rows: Result<Vec<Vec<F>>> = (0..replicates)
        .into_par_iter()
        .map(|i| run_one(spec, experiment, derive_seed(seed, i as u64)))
        .collect();
    let rows = rows?;
    let columns = experiment_columns(experiment.kind());
    let metrics = summarize(experiment.kind(), &columns, &rows);
    Ok(ReplicationSummary {
        replicates,
        metrics,
        per_replicate: Some(ReplicateTable { columns, rows }),
    })
}

fn experiment_columns(kind: ExperimentKind) -> Vec<&'static str> {
    match kind {
        ExperimentKind::FitError => vec![
            "l1_error",
            "l2_error",
            "linf_error",
            "support_size",
            "contains_h",
            "equals_h",
            "sign_match",
            "converged",
            "iterations",
            "objective",
            "kkt_max_violation",
        ],
        ExperimentKind::OracleCheck => vec![
            "l1_error",
            "l2_error",
            "z_star",
            "event_e",
            "event_a",
            "compat",
            "cif_q",
            "tau",
            "tau_ok",
            "a_tau",
            "l1_bound_compat",
            "lq_bound_compat",
            "violated_compat",
            "stabil_k",
            "a_const",
            "l1_bound_stabil",
            "violated_stabil",
            "converged",
        ],
        ExperimentKind::SignConsistency => vec![
            "sign_match", "e1", "e2", "e3", "l1_error", "linf_error", "converged",
        ],
        ExperimentKind::HonestSelection => vec![
            "contains_h",
            "contained_in_h",
            "equals_h",
            "hvs_surrogate",
            "implication_ok",
            "l1_error",
            "support_size",
            "threshold_b0",
            "threshold_free",
            "min_signal_clears_b0",
            "min_signal_clears_free",
            "converged",
        ],
        ExperimentKind::DebiasCoverage => vec![
            "covered_first",
            "ci_width_first",
            "b_hat_first",
            "se_first",
            "rewrite_gap",
            "converged",
        ],
    }
}

fn run_one<F: Real>(spec: &SimSpec<F>, experiment: &Experiment<F>, rep_seed: u64) -> Result<Vec<F>> {
    let rep = make_replicate(spec, rep_seed)?;
    let truth_support: Vec<usize> = (0..spec.p)
        .filter(|&j| rep.beta_star[j] != F::zero())
        .collect();
    match experiment {
        Experiment::FitError { pen, solver } => {
            let fit = solver::fit(&rep.data, pen, solver, None)?;
            let err = error_norms(&fit.beta, &rep.beta_star);
            let ss = selection::support_and_signs(&fit.beta.view(), F::zero());
            let star_ss = selection::support_and_signs(&rep.beta_star.view(), F::zero());
            Ok(vec![
                err.0,
                err.1,
                err.2,
                F::cast(ss.h_hat.len() as f64),
                flag(contains(&ss.h_hat, &truth_support)),
                flag(ss.h_hat == truth_support),
                flag(ss.signs == star_ss.signs),
                flag(fit.converged),
                F::cast(fit.iterations as f64),
                fit.objective_value,
                fit.kkt.max_violation,
            ])
        }
        Experiment::OracleCheck {
            pen,
            solver,
            theory: cfg,
            q,
        } => oracle_check_row(&rep, &truth_support, pen, solver, cfg, *q, rep_seed),
        Experiment::SignConsistency { pen, solver, eta } => {
            let fit = solver::fit(&rep.data, pen, solver, None)?;
            let err = error_norms(&fit.beta, &rep.beta_star);
            let ss = selection::support_and_signs(&fit.beta.view(), F::zero());
            let star_ss = selection::support_and_signs(&rep.beta_star.view(), F::zero());
            let beta_min = min_signal(&rep.beta_star, &truth_support);
            // Proof-decomposition events: E1 bounds the sup-norm error by the
            // weakest signal, E2 the off-support score at the truth, E3 the
            // off-support score increment between truth and fit.
            let e1 = err.2 < beta_min;
            let score_star = model::nb_score(&rep.beta_star.view(), &rep.data)?;
            let score_hat = model::nb_score(&fit.beta.view(), &rep.data)?;
            let mut max_e2 = F::zero();
            let mut max_e3 = F::zero();
            for j in 0..spec.p {
                if !truth_support.contains(&j) {
                    max_e2 = max_e2.max(score_star[j].abs());
                    max_e3 = max_e3.max((score_hat[j] - score_star[j]).abs());
                }
            }
            let e2 = max_e2 <= *eta * pen.lambda1;
            let e3 = max_e3 <= (F::one() - *eta) * pen.lambda1;
            Ok(vec![
                flag(ss.signs == star_ss.signs),
                flag(e1),
                flag(e2),
                flag(e3),
                err.0,
                err.2,
                flag(fit.converged),
            ])
        }
        Experiment::HonestSelection {
            pen,
            solver,
            theory: cfg,
        } => honest_selection_row(&rep, &truth_support, pen, solver, cfg, rep_seed),
        Experiment::DebiasCoverage {
            pen,
            solver,
            lambda_node,
            level,
        } => {
            let fit = solver::fit(&rep.data, pen, solver, None)?;
            if !fit.converged {
                return Ok(vec![F::zero(), F::zero(), F::zero(), F::zero(), F::zero(), flag(false)]);
            }
            let theta_hat = debias::nodewise_inverse(&rep.data, &fit.beta.view(), *lambda_node)?;
            let result = debias::debias(&fit, &rep.data, &theta_hat, *level)?;
            let rewrite = debias::debias_kkt_rewrite_exact(&fit, pen, &theta_hat, &rep.data)?;
            let mut gap = F::zero();
            for j in 0..spec.p {
                gap = gap.max((result.b_hat[j] - rewrite[j]).abs());
            }
            let covered =
                result.ci_low[0] <= rep.beta_star[0] && rep.beta_star[0] <= result.ci_high[0];
            Ok(vec![
                flag(covered),
                result.ci_high[0] - result.ci_low[0],
                result.b_hat[0],
                result.se[0],
                gap,
                flag(true),
            ])
        }
    }
}

/// Assembles the full bound report for one instance with known truth:
/// both cone constants on the Hessian-at-truth (with the realized error
/// direction among the search candidates), the `tau` machinery, the
/// Stabil route on the empirical Gram matrix and the score events. `K`
/// is taken as the realized design sup-norm.
pub fn instance_theory_report<F: Real>(
    data: &Dataset<F>,
    beta_star: &Array1<F>,
    beta_hat: &Array1<F>,
    pen: &Penalty<F>,
    cfg: &TheoryConfig<F>,
    q: F,
) -> Result<(TheoryReport<F>, theory::EventA<F>)> {
    let truth_support: Vec<usize> = (0..beta_star.len())
        .filter(|&j| beta_star[j] != F::zero())
        .collect();
    if truth_support.is_empty() {
        return Err(Error::Degenerate(
            "the bound report requires a nonempty true support".into(),
        ));
    }
    let event_e = theory::event_e_check(&beta_star.view(), data, pen, cfg.zeta)?;
    let event_a = theory::event_a_check(&beta_hat.view(), &beta_star.view(), data, pen.lambda1)?;

    // Hessian at the truth as a Gram operator over the weighted design.
    let weights = model::hessian_weights(&beta_star.view(), data)?;
    let mut factor = data.x().clone();
    for (i, mut row) in factor.rows_mut().into_iter().enumerate() {
        let w = weights[i].max(F::zero()).sqrt();
        row.mapv_inplace(|v| v * w);
    }
    let sigma = GramSigma::new(factor.view());
    let cone = ConeSpec::new(cfg.zeta, truth_support.clone(), F::zero())?;

    // The realized error direction joins the search candidates so the
    // reported constants are tight on the direction the bound is used on.
    let diff = beta_hat - beta_star;
    let extra: Vec<Array1<F>> = if diff.iter().any(|&v| v != F::zero()) {
        vec![diff]
    } else {
        Vec::new()
    };
    let realized_k = data.sup_norm();
    let cfg_realized = TheoryConfig {
        l_or_k: realized_k,
        ..*cfg
    };
    let compat =
        theory::compatibility_factor_op(&sigma, &cone, cfg.samples, cfg.seed, &extra)?;
    let cif_q = theory::weak_cif_op(&sigma, &cone, q, cfg.samples, cfg.seed, &extra)?;

    let sentinel = F::cast(-1.0);
    let (tau, compat_applicable, a_tau, l1_bound_compat, lq_bound_compat) =
        match theory::compat_route_bounds_from_constants(
            realized_k,
            cfg.zeta,
            truth_support.len(),
            pen.lambda1,
            compat,
            cif_q,
            q,
        ) {
            Ok(b) => (b.tau, true, b.a_tau, b.l1_bound, b.lq_bound),
            // sentinel values mark the route as inapplicable
            Err(Error::BoundInapplicable { tau, .. }) => {
                (F::cast(tau), false, sentinel, sentinel, sentinel)
            }
            Err(e) => return Err(e),
        };

    // Stabil route on the unweighted empirical Gram matrix.
    let gram = GramSigma::new(data.x().view());
    let stabil_cone = ConeSpec::new(F::cast(3.5), truth_support.clone(), cfg.epsilon_n)?;
    let stabil = theory::stabil_constant_op(
        &gram,
        &stabil_cone,
        cfg.samples,
        derive_seed(cfg.seed, 8),
        cfg.stabil_radius(),
    )?;
    let (l1_bound_stabil, pred_bound_stabil, a_const) = if stabil.degenerate {
        (sentinel, sentinel, sentinel)
    } else {
        let bounds = theory::stabil_route_bounds(
            pen,
            &cfg_realized,
            data.theta(),
            truth_support.len(),
            stabil.k,
        )?;
        (bounds.l1_bound, bounds.pred_bound, bounds.a_const)
    };

    Ok((
        TheoryReport {
            compat,
            cif_q,
            q,
            stabil_k: stabil.k,
            tau,
            a_tau,
            l1_bound_compat,
            lq_bound_compat,
            l1_bound_stabil,
            pred_bound_stabil,
            a_const,
            z_star: event_e.z_star,
            event_e: event_e.holds,
            compat_applicable,
            stabil_degenerate: stabil.degenerate,
        },
        event_a,
    ))
}

fn oracle_check_row<F: Real>(
    rep: &Replicate<F>,
    truth_support: &[usize],
    pen: &Penalty<F>,
    solver_cfg: &SolverConfig<F>,
    cfg: &TheoryConfig<F>,
    q: F,
    rep_seed: u64,
) -> Result<Vec<F>> {
    if truth_support.is_empty() {
        return Err(Error::Degenerate(
            "oracle-check requires a nonempty true support".into(),
        ));
    }
    let fit = solver::fit(&rep.data, pen, solver_cfg, None)?;
    let (l1_error, l2_error, _) = error_norms(&fit.beta, &rep.beta_star);
    let cfg_rep = TheoryConfig {
        seed: derive_seed(rep_seed, 7),
        ..*cfg
    };
    let (report, event_a) =
        instance_theory_report(&rep.data, &rep.beta_star, &fit.beta, pen, &cfg_rep, q)?;
    let violated_compat =
        report.event_e && report.compat_applicable && l1_error > report.l1_bound_compat;
    let violated_stabil = !report.stabil_degenerate && l1_error > report.l1_bound_stabil;

    Ok(vec![
        l1_error,
        l2_error,
        report.z_star,
        flag(report.event_e),
        flag(event_a.holds),
        report.compat,
        report.cif_q,
        report.tau,
        flag(report.compat_applicable),
        report.a_tau,
        report.l1_bound_compat,
        report.lq_bound_compat,
        flag(violated_compat),
        report.stabil_k,
        report.a_const,
        report.l1_bound_stabil,
        flag(violated_stabil),
        flag(fit.converged),
    ])
}

fn honest_selection_row<F: Real>(
    rep: &Replicate<F>,
    truth_support: &[usize],
    pen: &Penalty<F>,
    solver_cfg: &SolverConfig<F>,
    cfg: &TheoryConfig<F>,
    rep_seed: u64,
) -> Result<Vec<F>> {
    let fit = solver::fit(&rep.data, pen, solver_cfg, None)?;
    let (l1_error, _, _) = error_norms(&fit.beta, &rep.beta_star);
    let ss = selection::support_and_signs(&fit.beta.view(), F::zero());
    let contains_h = contains(&ss.h_hat, truth_support);
    let contained_in_h = contains(truth_support, &ss.h_hat);
    let beta_min = min_signal(&rep.beta_star, truth_support);
    let surrogate = l1_error >= beta_min;
    // Samplewise containment lemma: missing a true variable forces the l1
    // error past the weakest signal.
    let implication_ok = contains_h || surrogate;

    let (b0, free) = if truth_support.is_empty() {
        (F::zero(), F::cast(3.0) * pen.lambda1)
    } else {
        let gram = GramSigma::new(rep.data.x().view());
        let cone = ConeSpec::new(F::cast(3.5), truth_support.to_vec(), cfg.epsilon_n)?;
        let stabil = theory::stabil_constant_op(
            &gram,
            &cone,
            cfg.samples,
            derive_seed(rep_seed, 9),
            cfg.stabil_radius(),
        )?;
        if stabil.degenerate {
            (F::infinity(), F::cast(3.0) * pen.lambda1)
        } else {
            let a = theory::curvature_floor(rep.data.theta(), cfg);
            let t = selection::detection_thresholds(pen, cfg, truth_support.len(), stabil.k, a)?;
            (t.0, t.1)
        }
    };

    Ok(vec![
        flag(contains_h),
        flag(contained_in_h),
        flag(contains_h && contained_in_h),
        flag(surrogate),
        flag(implication_ok),
        l1_error,
        F::cast(ss.h_hat.len() as f64),
        b0,
        free,
        flag(beta_min >= b0),
        flag(beta_min >= free),
        flag(fit.converged),
    ])
}

fn flag<F: Real>(b: bool) -> F {
    if b {
        F::one()
    } else {
        F::zero()
    }
}

fn contains(outer: &[usize], inner: &[usize]) -> bool {
    inner.iter().all(|j| outer.contains(j))
}

fn min_signal<F: Real>(beta_star: &Array1<F>, support: &[usize]) -> F {
    support
        .iter()
        .map(|&j| beta_star[j].abs())
        .fold(F::infinity(), |a, b| a.min(b))
}

fn error_norms<F: Real>(beta: &Array1<F>, beta_star: &Array1<F>) -> (F, F, F) {
    let mut l1 = F::zero();
    let mut l2 = F::zero();
    let mut linf = F::zero();
    for j in 0..beta.len() {
        let d = (beta[j] - beta_star[j]).abs();
        l1 += d;
        l2 += d * d;
        linf = linf.max(d);
    }
    (l1, l2.sqrt(), linf)
}

fn summarize<F: Real>(
    kind: ExperimentKind,
    columns: &[&'static str],
    rows: &[Vec<F>],
) -> BTreeMap<String, F> {
    let mut metrics = BTreeMap::new();
    let n = F::cast(rows.len() as f64);
    let idx = |name: &str| columns.iter().position(|&c| c == name);
    let mean = |j: usize| rows.iter().map(|r| r[j]).sum::<F>() / n;

    let freq_columns: &[&str] = match kind {
        ExperimentKind::FitError => &["contains_h", "equals_h", "sign_match", "converged"],
        ExperimentKind::OracleCheck => &[
            "event_e",
            "event_a",
            "tau_ok",
            "violated_compat",
            "violated_stabil",
            "converged",
        ],
        ExperimentKind::SignConsistency => &["sign_match", "e1", "e2", "e3", "converged"],
        ExperimentKind::HonestSelection => &[
            "contains_h",
            "contained_in_h",
            "equals_h",
            "hvs_surrogate",
            "implication_ok",
            "min_signal_clears_b0",
            "min_signal_clears_free",
            "converged",
        ],
        ExperimentKind::DebiasCoverage => &["covered_first", "converged"],
    };
    let mean_columns: &[&str] = match kind {
        ExperimentKind::FitError => &["l1_error", "l2_error", "linf_error", "support_size", "iterations"],
        ExperimentKind::OracleCheck => &["l1_error", "z_star", "compat", "cif_q", "stabil_k"],
        ExperimentKind::SignConsistency => &["l1_error", "linf_error"],
        ExperimentKind::HonestSelection => &["l1_error", "support_size", "threshold_b0", "threshold_free"],
        ExperimentKind::DebiasCoverage => &["ci_width_first", "se_first", "rewrite_gap"],
    };
    for name in freq_columns {
        if let Some(j) = idx(name) {
            metrics.insert(format!("freq_{name}"), mean(j));
        }
    }
    for name in mean_columns {
        if let Some(j) = idx(name) {
            metrics.insert(format!("mean_{name}"), mean(j));
        }
    }
    if kind == ExperimentKind::OracleCheck {
        // Violation accounting restricted to qualifying replicates.
        let (e, t, v32) = (
            idx("event_e").unwrap(),
            idx("tau_ok").unwrap(),
            idx("violated_compat").unwrap(),
        );
        let qualifying = rows
            .iter()
            .filter(|r| r[e] == F::one() && r[t] == F::one())
            .count();
        let violations = rows
            .iter()
            .filter(|r| r[e] == F::one() && r[t] == F::one() && r[v32] == F::one())
            .count();
        metrics.insert("compat_qualifying".into(), F::cast(qualifying as f64));
        metrics.insert("compat_violations".into(), F::cast(violations as f64));
    }
    metrics
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base_spec() -> SimSpec<f64> {
        SimSpec {
            n: 200,
            p: 8,
            d_star: 3,
            beta_min: 0.8,
            beta_max: 0.8,
            design: DesignKind::IidGaussian,
            clamp_l: 3.0,
            theta: 2.0,
            seed: 42,
        }
    }

    #[test]
    fn design_postconditions_hold_exactly() {
        for design in [
            DesignKind::IidGaussian,
            DesignKind::Ar1(0.5),
            DesignKind::Equicorrelated(0.3),
            DesignKind::DuplicatedPairs,
        ] {
            let spec = SimSpec { design, ..base_spec() };
            let x = gen_design(&spec).unwrap();
            for j in 0..spec.p {
                let col = x.column(j);
                let mean = col.sum() / spec.n as f64;
                let ms = col.iter().map(|v| v * v).sum::<f64>() / spec.n as f64;
                assert!(mean.abs() <= 1e-12, "column {j} mean {mean}");
                assert!((ms - 1.0).abs() <= 1e-12, "column {j} mean square {ms}");
                assert!(col.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn duplicated_pairs_have_unit_correlation() {
        let spec = SimSpec {
            design: DesignKind::DuplicatedPairs,
            ..base_spec()
        };
        let x = gen_design(&spec).unwrap();
        for k in (0..spec.p - 1).step_by(2) {
            let rho = x.column(k).dot(&x.column(k + 1)) / spec.n as f64;
            assert_relative_eq!(rho, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ar1_sample_correlation_close_to_rho() {
        let spec = SimSpec {
            n: 2000,
            p: 10,
            design: DesignKind::Ar1(0.5),
            ..base_spec()
        };
        let x = gen_design(&spec).unwrap();
        let rho12 = x.column(0).dot(&x.column(1)) / spec.n as f64;
        assert!((rho12 - 0.5).abs() < 0.05, "sample rho {rho12}");
    }

    #[test]
    fn beta_star_alternates_and_uses_beta_min() {
        let spec = base_spec();
        let beta = make_beta_star(&spec);
        assert_eq!(beta[0], 0.8);
        assert_eq!(beta[1], -0.8);
        assert_eq!(beta[2], 0.8);
        assert!(beta.iter().skip(3).all(|&b| b == 0.0));
    }

    #[test]
    fn nb_sampler_moments() {
        let mu = Array1::from_elem(100_000, 3.0);
        let y = sample_nb(&mu.view(), 2.0, 7).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        // Var = mu + mu^2/theta = 3 + 4.5 = 7.5; se(mean) = sqrt(7.5/n)
        let se_mean = (7.5f64 / n).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se_mean, "mean {mean}");
        // sampling error of the variance is of order sqrt(E(Y-mu)^4/n)
        assert!((var - 7.5).abs() < 0.2, "var {var}");
    }

    #[test]
    fn nb_sampler_poisson_limit() {
        let mu = Array1::from_elem(100_000, 3.0);
        let y = sample_nb(&mu.view(), 1e8, 11).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((var / mean - 1.0).abs() < 0.05, "var/mean {}", var / mean);
    }

    #[test]
    fn nb_sampler_is_deterministic() {
        let mu = Array1::from_elem(100, 2.5);
        let a = sample_nb(&mu.view(), 1.5, 13).unwrap();
        let b = sample_nb(&mu.view(), 1.5, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nb_pmf_matches_sampler_frequencies() {
        use statrs::function::gamma::ln_gamma;
        let (mu, theta, n_draws) = (2.0f64, 3.0f64, 200_000usize);
        let mu_vec = Array1::from_elem(n_draws, mu);
        let y = sample_nb(&mu_vec.view(), theta, 17).unwrap();
        let p = mu / (theta + mu);
        for k in 0..=10u64 {
            let pk = (ln_gamma(theta + k as f64) - ln_gamma(theta) - ln_gamma(k as f64 + 1.0)
                + theta * (1.0 - p).ln()
                + k as f64 * p.ln())
            .exp();
            let freq = y.iter().filter(|&&v| v == k).count() as f64 / n_draws as f64;
            let se = (pk * (1.0 - pk) / n_draws as f64).sqrt();
            assert!(
                (freq - pk).abs() <= 4.0 * se,
                "cell {k}: freq {freq}, pmf {pk}, se {se}"
            );
        }
    }

    #[test]
    fn dispersion_test_zero_residuals() {
        let mu = Array1::from_elem(10, 4.0);
        let y: Vec<u64> = vec![4; 10];
        // (y - mu)^2 - y = -4 != 0, so alpha_hat is estimated; use exact
        // y = mu with (y-mu)^2 = y impossible for counts, instead check the
        // documented degenerate branch with a synthetic regressand of zeros:
        // y_i = mu_i and mu_i chosen so (y-mu)^2 - y = 0 => y = 0.
        let zeros: Vec<u64> = vec![0; 10];
        let tiny_mu = Array1::from_elem(10, 1e-12f64);
        let result = cameron_trivedi_test(&zeros, &tiny_mu.view(), DispersionVariant::Linear).unwrap();
        assert!(result.alpha_hat.abs() < 1e-6);
        let _ = cameron_trivedi_test(&y, &mu.view(), DispersionVariant::Quadratic).unwrap();
    }

    #[test]
    fn replication_is_deterministic() {
        let spec = SimSpec { n: 60, p: 5, ..base_spec() };
        let pen = Penalty::new(0.1, 0.05).unwrap();
        let experiment = Experiment::FitError {
            pen,
            solver: SolverConfig::default(),
        };
        let a = run_replications(&spec, &experiment, 4, 99).unwrap();
        let b = run_replications(&spec, &experiment, 4, 99).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(
            a.per_replicate.as_ref().unwrap().rows,
            b.per_replicate.as_ref().unwrap().rows
        );
    }

    #[test]
    fn single_replicate_summary_equals_single_run() {
        let spec = SimSpec { n: 60, p: 5, ..base_spec() };
        let pen = Penalty::new(0.1, 0.05).unwrap();
        let experiment = Experiment::FitError {
            pen,
            solver: SolverConfig::default(),
        };
        let summary = run_replications(&spec, &experiment, 1, 5).unwrap();
        assert_eq!(summary.replicates, 1);
        let table = summary.per_replicate.as_ref().unwrap();
        assert_eq!(table.rows.len(), 1);
        let j = table.columns.iter().position(|&c| c == "l1_error").unwrap();
        assert_relative_eq!(summary.metrics["mean_l1_error"], table.rows[0][j]);
    }

    #[test]
    fn null_truth_experiments_are_trivially_perfect() {
        // d* = 0: the truth is the zero vector, a large lambda1 returns the
        // null fit, and both sign matching and containment hold by
        // construction on every replicate.
        let spec = SimSpec {
            n: 40,
            p: 6,
            d_star: 0,
            ..base_spec()
        };
        let pen = Penalty::new(5.0, 0.1).unwrap();
        let signs = Experiment::SignConsistency {
            pen,
            solver: SolverConfig::default(),
            eta: 0.5,
        };
        let summary = run_replications(&spec, &signs, 5, 3).unwrap();
        assert_eq!(summary.metrics["freq_sign_match"], 1.0);

        let theory_cfg = crate::theory::TheoryConfig::new(1.0, 3.0, 0.0, 3.0, 64, 3).unwrap();
        let honest = Experiment::HonestSelection {
            pen,
            solver: SolverConfig::default(),
            theory: theory_cfg,
        };
        let summary = run_replications(&spec, &honest, 5, 3).unwrap();
        assert_eq!(summary.metrics["freq_contains_h"], 1.0);
        assert_eq!(summary.metrics["freq_implication_ok"], 1.0);
    }

    #[test]
    fn unknown_experiment_name_is_an_error() {
        let err = "bogus".parse::<ExperimentKind>().unwrap_err();
        assert!(matches!(err, Error::UnknownExperiment(_)));
        assert_eq!(
            "oracle-check".parse::<ExperimentKind>().unwrap(),
            ExperimentKind::OracleCheck
        );
    }

    #[test]
    fn degenerate_design_is_rejected() {
        // clamp_l so small that every entry collapses to the same value is
        // impossible after centering; a constant column arises from
        // duplicated clamping when all draws exceed the clamp.
        let spec = SimSpec {
            clamp_l: 1e-300,
            ..base_spec()
        };
        // all entries clamp to about +-1e-300; columns become constant in
        // magnitude but signs still vary, so variance survives. Use n = 1
        // instead: a single row centres to exactly zero.
        let spec = SimSpec { n: 1, ..spec };
        assert!(gen_design(&spec).is_err());
    }
}
