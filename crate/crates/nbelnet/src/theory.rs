//! Design constants and non-asymptotic error bounds.
//!
//! The cone infima (compatibility factor, weak cone invertibility factor,
//! Stabil constant) are NP-hard to certify globally; this module reports
//! *upper-bound estimates* obtained from seeded random sampling plus
//! multi-start projected-gradient refinement over the cone. Increasing the
//! sampling budget under a fixed seed can only lower (never raise) the
//! returned estimate, because samples are drawn as a prefix of a fixed
//! stream and the refinement schedule does not depend on the budget.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, mean_fraction, theta_fraction, Dataset, Penalty};
use crate::num::Real;
use crate::simulate::derive_seed;

/// Largest admissible `tau`: the maximum of `z e^{-2z}`, reached at `z = 1/2`.
pub fn max_tau<F: Real>() -> F {
    F::cast(0.5) * (-F::one()).exp()
}

/// Cone parameters: slope (`zeta` for the plain cone, `c` for the shifted
/// one), the reference support `H` (0-based indices) and the shift
/// `epsilon` (0 recovers the plain cone).
#[derive(Debug, Clone)]
pub struct ConeSpec<F: Real> {
    slope: F,
    support: Vec<usize>,
    epsilon: F,
}

impl<F: Real> ConeSpec<F> {
    pub fn new(slope: F, mut support: Vec<usize>, epsilon: F) -> Result<Self> {
        if !(slope > F::zero()) {
            return Err(Error::InvalidParameter("cone slope must be positive".into()));
        }
        if epsilon < F::zero() {
            return Err(Error::InvalidParameter("cone epsilon must be >= 0".into()));
        }
        support.sort_unstable();
        support.dedup();
        if support.is_empty() {
            return Err(Error::Degenerate("cone support is empty".into()));
        }
        Ok(Self {
            slope,
            support,
            epsilon,
        })
    }

    pub fn slope(&self) -> F {
        self.slope
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn epsilon(&self) -> F {
        self.epsilon
    }

    /// `d* = |H|`.
    pub fn d_star(&self) -> usize {
        self.support.len()
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if let Some(&j) = self.support.iter().find(|&&j| j >= p) {
            return Err(Error::DimensionMismatch(format!(
                "support index {j} out of range for dimension {p}"
            )));
        }
        Ok(())
    }
}

/// Global constants of the bound framework: the sup-norm bound `B` on the
/// true coefficients, the covariate bound `K` (called `L` in the random
/// design sections), the slack `epsilon_n`, the cone slope `zeta`, the
/// sampling budget and the seed for the cone searches.
#[derive(Debug, Clone, Copy)]
pub struct TheoryConfig<F: Real> {
    pub b_sup: F,
    pub l_or_k: F,
    pub epsilon_n: F,
    pub zeta: F,
    pub samples: usize,
    pub seed: u64,
}

impl<F: Real> TheoryConfig<F> {
    pub fn new(b_sup: F, l_or_k: F, epsilon_n: F, zeta: F, samples: usize, seed: u64) -> Result<Self> {
        if !(b_sup > F::zero()) || !(l_or_k > F::zero()) {
            return Err(Error::InvalidParameter(
                "B and K (L) must be positive".into(),
            ));
        }
        if epsilon_n < F::zero() {
            return Err(Error::InvalidParameter("epsilon_n must be >= 0".into()));
        }
        if !(zeta > F::one()) {
            return Err(Error::InvalidParameter("zeta must exceed 1".into()));
        }
        Ok(Self {
            b_sup,
            l_or_k,
            epsilon_n,
            zeta,
            samples,
            seed,
        })
    }

    /// Localization radius `M = 16 B + 2 epsilon_n`.
    pub fn m(&self) -> F {
        F::cast(16.0) * self.b_sup + F::cast(2.0) * self.epsilon_n
    }

    /// Search radius for the shifted cone, `max(1, 2M)`.
    pub fn stabil_radius(&self) -> F {
        (F::cast(2.0) * self.m()).max(F::one())
    }

    /// `T(L, B) = L B + log(theta + e^{L B})`.
    pub fn t_const(&self, theta: F) -> F {
        let lb = self.l_or_k * self.b_sup;
        lb + model::log_theta_plus_exp(lb, theta)
    }
}

impl<F: Real> Default for TheoryConfig<F> {
    fn default() -> Self {
        Self {
            b_sup: F::one(),
            l_or_k: F::one(),
            epsilon_n: F::zero(),
            zeta: F::cast(3.0),
            samples: 20_000,
            seed: 0,
        }
    }
}

/// Everything the bound machinery produces for one instance. Entries of
/// an inapplicable route carry the sentinel `-1` together with the
/// corresponding flag.
#[derive(Debug, Clone, Copy)]
pub struct TheoryReport<F: Real> {
    pub compat: F,
    pub cif_q: F,
    pub q: F,
    pub stabil_k: F,
    pub tau: F,
    pub a_tau: F,
    pub l1_bound_compat: F,
    pub lq_bound_compat: F,
    pub l1_bound_stabil: F,
    pub pred_bound_stabil: F,
    pub a_const: F,
    pub z_star: F,
    pub event_e: bool,
    /// `tau <= (1/2)e^-1`, so the compatibility-route bounds exist.
    pub compat_applicable: bool,
    /// The Stabil search pinned its constant at zero.
    pub stabil_degenerate: bool,
}

/// Quadratic form access used by the cone searches; implemented for dense
/// matrices and for Gram factors `Sigma = F'F / m` so that `n x p` designs
/// never need the `p x p` matrix materialized.
pub trait SigmaOp<F: Real>: Sync {
    fn dim(&self) -> usize;
    fn matvec(&self, b: &ArrayView1<F>) -> Array1<F>;
    fn quad(&self, b: &ArrayView1<F>) -> F {
        b.dot(&self.matvec(b))
    }
}

impl<F: Real> SigmaOp<F> for Array2<F> {
    fn dim(&self) -> usize {
        self.ncols()
    }

    fn matvec(&self, b: &ArrayView1<F>) -> Array1<F> {
        self.dot(b)
    }
}

/// `Sigma = factor' factor / nrows(factor)`.
pub struct GramSigma<'a, F: Real> {
    factor: ArrayView2<'a, F>,
}

impl<'a, F: Real> GramSigma<'a, F> {
    pub fn new(factor: ArrayView2<'a, F>) -> Self {
        Self { factor }
    }
}

impl<F: Real> SigmaOp<F> for GramSigma<'_, F> {
    fn dim(&self) -> usize {
        self.factor.ncols()
    }

    fn matvec(&self, b: &ArrayView1<F>) -> Array1<F> {
        let fb = self.factor.dot(b);
        let mut out = self.factor.t().dot(&fb);
        let scale = F::one() / F::cast(self.factor.nrows() as f64);
        out.mapv_inplace(|v| v * scale);
        out
    }

    fn quad(&self, b: &ArrayView1<F>) -> F {
        let fb = self.factor.dot(b);
        fb.dot(&fb) / F::cast(self.factor.nrows() as f64)
    }
}

/// Projects `v` onto the l1 ball of the given radius (Duchi et al. style
/// threshold on the sorted magnitudes).
fn project_l1_ball<F: Real>(v: &mut [F], radius: F) {
    if radius <= F::zero() {
        v.iter_mut().for_each(|x| *x = F::zero());
        return;
    }
    let total: F = v.iter().map(|x| x.abs()).sum();
    if total <= radius {
        return;
    }
    let mut mags: Vec<F> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    let mut cumulative = F::zero();
    let mut threshold = F::zero();
    for (k, &m) in mags.iter().enumerate() {
        cumulative += m;
        let t = (cumulative - radius) / F::cast((k + 1) as f64);
        if m > t {
            threshold = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - threshold).max(F::zero());
    }
}

#[derive(Clone, Copy, PartialEq)]
enum RatioKind<F> {
    /// `d* b'Sb / ||b_H||_1^2`; the compatibility factor is its square root.
    Compatibility,
    /// `d*^{1/q} b'Sb / (||b_H||_1 ||b||_q)`.
    WeakCif(F),
}

struct ConeSearch<'a, F: Real, S: SigmaOp<F>> {
    sigma: &'a S,
    cone: &'a ConeSpec<F>,
    on_support: Vec<bool>,
    kind: RatioKind<F>,
}

const REFINE_STARTS: usize = 4;
const REFINE_ITERS: usize = 200;
const SAMPLE_CHUNK: usize = 256;
// Refinement halts early once a full stall window brings no improvement.
const REFINE_STALL_WINDOW: usize = 25;
const REFINE_STALL_RTOL: f64 = 1e-9;

// Per-start refinement effort shrinks with the dimension (each step costs
// O(p) to O(np)); the effort never depends on the sampling budget, which
// keeps estimates monotone in the budget.
fn refine_iters(dim: usize) -> usize {
    (60_000 / dim.max(1)).clamp(60, REFINE_ITERS)
}

fn refine_starts(dim: usize) -> usize {
    if dim > 512 {
        2
    } else {
        REFINE_STARTS
    }
}

impl<'a, F: Real, S: SigmaOp<F>> ConeSearch<'a, F, S> {
    fn new(sigma: &'a S, cone: &'a ConeSpec<F>, kind: RatioKind<F>) -> Result<Self> {
        cone.check_dim(sigma.dim())?;
        let mut on_support = vec![false; sigma.dim()];
        for &j in cone.support() {
            on_support[j] = true;
        }
        Ok(Self {
            sigma,
            cone,
            on_support,
            kind,
        })
    }

    fn support_l1(&self, b: &Array1<F>) -> F {
        self.cone.support().iter().map(|&j| b[j].abs()).sum()
    }

    /// Ratio value; `None` for unusable points, error for indefinite forms.
    fn eval(&self, b: &Array1<F>) -> Result<Option<F>> {
        let s = self.support_l1(b);
        if !(s > F::zero()) {
            return Ok(None);
        }
        let quad = self.sigma.quad(&b.view());
        let norm_sq = b.dot(b);
        if quad < -F::cast(1e-10) * norm_sq {
            return Err(Error::NotPsd(format!(
                "quadratic form evaluated to {quad} on a unit-scale direction"
            )));
        }
        let quad = quad.max(F::zero());
        let d_star = F::cast(self.cone.d_star() as f64);
        let value = match self.kind {
            RatioKind::Compatibility => d_star * quad / (s * s),
            RatioKind::WeakCif(q) => {
                let norm_q = lq_norm(b, q);
                if !(norm_q > F::zero()) {
                    return Ok(None);
                }
                d_star.powf(F::one() / q) * quad / (s * norm_q)
            }
        };
        Ok(Some(value))
    }

    /// Rescale so `||b_H||_1 = 1`, then pull the complement back into the
    /// slope ball. Both operations keep cone membership.
    fn normalize(&self, b: &mut Array1<F>) -> bool {
        let s = self.support_l1(b);
        if !(s > F::zero()) {
            return false;
        }
        b.mapv_inplace(|v| v / s);
        let mut complement: Vec<F> = Vec::with_capacity(b.len());
        let mut idx = Vec::with_capacity(b.len());
        for j in 0..b.len() {
            if !self.on_support[j] {
                idx.push(j);
                complement.push(b[j]);
            }
        }
        project_l1_ball(&mut complement, self.cone.slope());
        for (j, v) in idx.into_iter().zip(complement) {
            b[j] = v;
        }
        true
    }

    fn ratio_gradient(&self, b: &Array1<F>) -> Option<Array1<F>> {
        let s = self.support_l1(b);
        if !(s > F::zero()) {
            return None;
        }
        let sv = self.sigma.matvec(&b.view());
        let quad = b.dot(&sv).max(F::zero());
        let two = F::cast(2.0);
        let mut grad_s = Array1::zeros(b.len());
        for &j in self.cone.support() {
            grad_s[j] = b[j].signum();
        }
        match self.kind {
            RatioKind::Compatibility => {
                // r = quad / s^2 (d* constant): r' = 2 Sv / s^2 - 2 quad grad_s / s^3
                let mut g = sv;
                g.mapv_inplace(|v| two * v / (s * s));
                g.scaled_add(-two * quad / (s * s * s), &grad_s);
                Some(g)
            }
            RatioKind::WeakCif(q) => {
                let nq = lq_norm(b, q);
                if !(nq > F::zero()) {
                    return None;
                }
                let mut grad_nq = Array1::zeros(b.len());
                let scale = nq.powf(F::one() - q);
                for j in 0..b.len() {
                    if b[j] != F::zero() {
                        grad_nq[j] = b[j].signum() * b[j].abs().powf(q - F::one()) * scale;
                    }
                }
                // r = quad / (s nq): r' = 2 Sv/(s nq) - quad (grad_s nq + s grad_nq)/(s nq)^2
                let denom = s * nq;
                let mut g = sv;
                g.mapv_inplace(|v| two * v / denom);
                g.scaled_add(-quad * nq / (denom * denom), &grad_s);
                g.scaled_add(-quad * s / (denom * denom), &grad_nq);
                Some(g)
            }
        }
    }

    /// Projected-gradient descent on the scale-invariant ratio.
    fn refine(&self, start: Array1<F>) -> Result<Option<F>> {
        let mut b = start;
        if !self.normalize(&mut b) {
            return Ok(None);
        }
        let Some(mut value) = self.eval(&b)? else {
            return Ok(None);
        };
        let mut step = F::cast(0.25);
        let mut window_start = value;
        for iter in 0..refine_iters(self.sigma.dim()) {
            if iter % REFINE_STALL_WINDOW == 0 {
                if iter > 0
                    && window_start - value
                        <= F::cast(REFINE_STALL_RTOL) * value.abs().max(F::one())
                {
                    break;
                }
                window_start = value;
            }
            let Some(grad) = self.ratio_gradient(&b) else {
                break;
            };
            let mut candidate = b.clone();
            candidate.scaled_add(-step, &grad);
            if !self.normalize(&mut candidate) {
                step *= F::cast(0.4);
                continue;
            }
            match self.eval(&candidate)? {
                Some(v) if v < value => {
                    b = candidate;
                    value = v;
                    step *= F::cast(1.5);
                }
                _ => {
                    step *= F::cast(0.4);
                    if step < F::cast(1e-14) {
                        break;
                    }
                }
            }
        }
        Ok(Some(value))
    }

    fn random_cone_point(&self, rng: &mut impl Rng) -> Array1<F> {
        let p = self.sigma.dim();
        let mut b = Array1::zeros(p);
        for &j in self.cone.support() {
            b[j] = F::standard_normal(rng);
        }
        let s = self.support_l1(&b);
        if s > F::zero() {
            for &j in self.cone.support() {
                b[j] /= s;
            }
        } else if let Some(&j) = self.cone.support().first() {
            b[j] = F::one();
        }
        // Complement drawn as a random direction scaled to a uniform
        // fraction of the slope budget.
        let mut mass = F::zero();
        for j in 0..p {
            if !self.on_support[j] {
                b[j] = F::standard_normal(rng);
                mass += b[j].abs();
            }
        }
        if mass > F::zero() {
            let target = self.cone.slope() * F::uniform_01(rng);
            let scale = target / mass;
            for j in 0..p {
                if !self.on_support[j] {
                    b[j] *= scale;
                }
            }
        }
        b
    }

    fn canonical_starts(&self) -> Vec<Array1<F>> {
        let p = self.sigma.dim();
        let mut starts = Vec::new();
        for &j in self.cone.support() {
            let mut b = Array1::zeros(p);
            b[j] = F::one();
            starts.push(b);
        }
        let mut flat = Array1::zeros(p);
        for (pos, &j) in self.cone.support().iter().enumerate() {
            flat[j] = if pos % 2 == 0 { F::one() } else { -F::one() };
        }
        starts.push(flat);
        starts
    }

    /// Minimum ratio over samples, refined starts and caller-supplied
    /// candidate directions.
    fn minimize(&self, budget: usize, seed: u64, extra: &[Array1<F>]) -> Result<F> {
        let mut best = F::infinity();

        // Candidate starts: the support axes, caller-supplied directions
        // and a few seeded random cone points. All are scored once; the
        // caller's candidates and the most promising of the rest are
        // refined by projected gradient.
        let mut starts = self.canonical_starts();
        let canonical_count = starts.len();
        for cand in extra {
            if cand.len() == self.sigma.dim() {
                starts.push(cand.clone());
            }
        }
        let extra_range = canonical_count..starts.len();
        for r in 0..refine_starts(self.sigma.dim()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1_000_000 + r as u64));
            starts.push(self.random_cone_point(&mut rng));
        }
        let mut scored: Vec<(usize, F)> = Vec::with_capacity(starts.len());
        for (i, start) in starts.iter().enumerate() {
            let mut b = start.clone();
            if self.normalize(&mut b) {
                if let Some(v) = self.eval(&b)? {
                    best = best.min(v);
                    scored.push((i, v));
                }
            }
        }
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite ratios").then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = scored.iter().take(3).map(|&(i, _)| i).collect();
        for (i, _) in &scored {
            if extra_range.contains(i) && !chosen.contains(i) {
                chosen.push(*i);
            }
        }
        let refined: Result<Vec<Option<F>>> = chosen
            .into_par_iter()
            .map(|i| self.refine(starts[i].clone()))
            .collect();
        for v in refined?.into_iter().flatten() {
            best = best.min(v);
        }

        // Budgeted sampling: chunk c evaluates draws [c*CHUNK, ...) of its
        // own stream, so a larger budget extends the sampled set.
        let chunks = budget.div_ceil(SAMPLE_CHUNK);
        let sampled: Result<Vec<F>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
                let in_chunk = SAMPLE_CHUNK.min(budget - c * SAMPLE_CHUNK);
                let mut chunk_best = F::infinity();
                for _ in 0..in_chunk {
                    let b = self.random_cone_point(&mut rng);
                    if let Some(v) = self.eval(&b)? {
                        chunk_best = chunk_best.min(v);
                    }
                }
                Ok(chunk_best)
            })
            .collect();
        for v in sampled? {
            best = best.min(v);
        }

        if !best.is_finite() {
            return Err(Error::Degenerate(
                "cone search produced no usable direction".into(),
            ));
        }
        Ok(best)
    }
}

fn lq_norm<F: Real>(b: &Array1<F>, q: F) -> F {
    if q == F::one() {
        b.iter().map(|v| v.abs()).sum()
    } else if q == F::cast(2.0) {
        b.dot(b).sqrt()
    } else {
        b.iter()
            .map(|v| v.abs().powf(q))
            .sum::<F>()
            .powf(F::one() / q)
    }
}

fn validate_symmetric<F: Real>(sigma: &Array2<F>) -> Result<()> {
    let (r, c) = sigma.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!(
            "sigma must be square, got {r}x{c}"
        )));
    }
    let tol = F::cast(1e-8);
    for i in 0..r {
        if sigma[(i, i)] < -tol {
            return Err(Error::NotPsd(format!(
                "negative diagonal entry at {i}: {}",
                sigma[(i, i)]
            )));
        }
        for j in (i + 1)..c {
            let diff = (sigma[(i, j)] - sigma[(j, i)]).abs();
            let scale = sigma[(i, j)].abs().max(sigma[(j, i)].abs()).max(F::one());
            if diff > tol * scale {
                return Err(Error::NotPsd(format!(
                    "asymmetric entries at ({i},{j}): {} vs {}",
                    sigma[(i, j)],
                    sigma[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Upper-bound estimate of the compatibility factor
/// `inf sqrt(d* b'Sb) / ||b_H||_1` over the cone `||b_Hc||_1 <= zeta ||b_H||_1`.
pub fn compatibility_factor<F: Real>(
    sigma: &Array2<F>,
    cone: &ConeSpec<F>,
    budget: usize,
    seed: u64,
) -> Result<F> {
    validate_symmetric(sigma)?;
    compatibility_factor_op(sigma, cone, budget, seed, &[])
}

/// Operator-form compatibility search; `extra` supplies candidate
/// directions (for instance a realized error direction) that join the
/// refinement starts.
pub fn compatibility_factor_op<F: Real>(
    sigma: &impl SigmaOp<F>,
    cone: &ConeSpec<F>,
    budget: usize,
    seed: u64,
    extra: &[Array1<F>],
) -> Result<F> {
    if cone.epsilon() != F::zero() {
        return Err(Error::InvalidParameter(
            "compatibility factor is defined on the unshifted cone (epsilon = 0)".into(),
        ));
    }
    let search = ConeSearch::new(sigma, cone, RatioKind::Compatibility)?;
    Ok(search.minimize(budget, seed, extra)?.max(F::zero()).sqrt())
}

/// Upper-bound estimate of the weak cone invertibility factor
/// `inf d*^{1/q} b'Sb / (||b_H||_1 ||b||_q)` over the same cone.
pub fn weak_cif<F: Real>(
    sigma: &Array2<F>,
    cone: &ConeSpec<F>,
    q: F,
    budget: usize,
    seed: u64,
) -> Result<F> {
    validate_symmetric(sigma)?;
    weak_cif_op(sigma, cone, q, budget, seed, &[])
}

/// Operator-form weak-CIF search.
pub fn weak_cif_op<F: Real>(
    sigma: &impl SigmaOp<F>,
    cone: &ConeSpec<F>,
    q: F,
    budget: usize,
    seed: u64,
    extra: &[Array1<F>],
) -> Result<F> {
    if cone.epsilon() != F::zero() {
        return Err(Error::InvalidParameter(
            "weak CIF is defined on the unshifted cone (epsilon = 0)".into(),
        ));
    }
    if q < F::one() {
        return Err(Error::InvalidParameter("q must be >= 1".into()));
    }
    let search = ConeSearch::new(sigma, cone, RatioKind::WeakCif(q))?;
    Ok(search.minimize(budget, seed, extra)?.max(F::zero()))
}

/// Sampling estimate of the Stabil constant.
#[derive(Debug, Clone, Copy)]
pub struct StabilEstimate<F: Real> {
    /// Largest `k` in `(0, 1]` compatible with the sampled directions.
    pub k: F,
    /// Set when the instance pinned the estimate at zero (for example the
    /// zero matrix), so no positive Stabil constant exists.
    pub degenerate: bool,
}

/// Estimates the largest `k` in `(0, 1]` with `b'Sb >= k ||b_H||_2^2 - eps`
/// over the shifted cone `V(c, eps)` localized to `||b||_1 <= radius`. The
/// returned value is the sample minimum of `(b'Sb + eps) / ||b_H||_2^2`,
/// clipped into `[0, 1]`.
pub fn stabil_constant<F: Real>(
    sigma: &Array2<F>,
    cone: &ConeSpec<F>,
    budget: usize,
    seed: u64,
    radius: F,
) -> Result<StabilEstimate<F>> {
    validate_symmetric(sigma)?;
    stabil_constant_op(sigma, cone, budget, seed, radius)
}

/// Operator-form Stabil search.
pub fn stabil_constant_op<F: Real>(
    sigma: &impl SigmaOp<F>,
    cone: &ConeSpec<F>,
    budget: usize,
    seed: u64,
    radius: F,
) -> Result<StabilEstimate<F>> {
    cone.check_dim(sigma.dim())?;
    if !(radius > F::zero()) {
        return Err(Error::InvalidParameter("stabil radius must be positive".into()));
    }
    let p = sigma.dim();
    let mut on_support = vec![false; p];
    for &j in cone.support() {
        on_support[j] = true;
    }
    let eps = cone.epsilon();
    let slope = cone.slope();

    let ratio = |b: &Array1<F>| -> Result<Option<F>> {
        let h2: F = cone.support().iter().map(|&j| b[j] * b[j]).sum();
        if !(h2 > F::zero()) {
            return Ok(None);
        }
        let quad = sigma.quad(&b.view());
        if quad < -F::cast(1e-10) * b.dot(b) {
            return Err(Error::NotPsd(format!(
                "quadratic form evaluated to {quad} during the stabil search"
            )));
        }
        Ok(Some((quad.max(F::zero()) + eps) / h2))
    };

    // Feasibility projection for V(c, eps) within the l1 ball of `radius`:
    // pull the complement into the slope ball, then shrink everything into
    // the localization ball (uniform shrinkage preserves membership).
    let feasible = |b: &mut Array1<F>| {
        let s: F = cone.support().iter().map(|&j| b[j].abs()).sum();
        let mut complement: Vec<F> = Vec::new();
        let mut idx = Vec::new();
        for j in 0..p {
            if !on_support[j] {
                idx.push(j);
                complement.push(b[j]);
            }
        }
        project_l1_ball(&mut complement, slope * s + eps);
        for (j, v) in idx.into_iter().zip(complement) {
            b[j] = v;
        }
        let total: F = b.iter().map(|v| v.abs()).sum();
        if total > radius {
            let shrink = radius / total;
            b.mapv_inplace(|v| v * shrink);
        }
    };

    let sample_point = |rng: &mut ChaCha8Rng| -> Array1<F> {
        let mut b = Array1::zeros(p);
        let scale_h = radius * F::uniform_01(rng).max(F::cast(1e-3));
        let mut s = F::zero();
        for &j in cone.support() {
            b[j] = F::standard_normal(rng);
            s += b[j].abs();
        }
        if s > F::zero() {
            for &j in cone.support() {
                b[j] *= scale_h / s;
            }
        }
        let budget_c = (slope * scale_h + eps).min((radius - scale_h).max(F::zero()));
        let mut mass = F::zero();
        for j in 0..p {
            if !on_support[j] {
                b[j] = F::standard_normal(rng);
                mass += b[j].abs();
            }
        }
        if mass > F::zero() {
            let target = budget_c * F::uniform_01(rng);
            let scale = target / mass;
            for j in 0..p {
                if !on_support[j] {
                    b[j] *= scale;
                }
            }
        }
        b
    };

    let mut best = F::infinity();

    // Deterministic probes: support axes at full localization scale.
    for &j in cone.support() {
        let mut b = Array1::zeros(p);
        b[j] = radius;
        feasible(&mut b);
        if let Some(v) = ratio(&b)? {
            best = best.min(v);
        }
    }

    // Gradient refinement from a few seeded starts.
    let starts: Vec<Array1<F>> = (0..refine_starts(p))
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2_000_000 + r as u64));
            sample_point(&mut rng)
        })
        .collect();
    let refined: Result<Vec<F>> = starts
        .into_par_iter()
        .map(|mut b| {
            feasible(&mut b);
            let mut value = match ratio(&b)? {
                Some(v) => v,
                None => return Ok(F::infinity()),
            };
            let mut step = F::cast(0.25);
            let mut window_start = value;
            for iter in 0..refine_iters(p) {
                if iter % REFINE_STALL_WINDOW == 0 {
                    if iter > 0
                        && window_start - value
                            <= F::cast(REFINE_STALL_RTOL) * value.abs().max(F::one())
                    {
                        break;
                    }
                    window_start = value;
                }
                let h2: F = cone.support().iter().map(|&j| b[j] * b[j]).sum();
                if !(h2 > F::zero()) {
                    break;
                }
                let sv = sigma.matvec(&b.view());
                let quad = b.dot(&sv).max(F::zero());
                // gradient of (quad + eps)/h2
                let mut grad = sv;
                grad.mapv_inplace(|v| F::cast(2.0) * v / h2);
                for &j in cone.support() {
                    grad[j] -= F::cast(2.0) * (quad + eps) * b[j] / (h2 * h2);
                }
                let mut candidate = b.clone();
                candidate.scaled_add(-step, &grad);
                feasible(&mut candidate);
                match ratio(&candidate)? {
                    Some(v) if v < value => {
                        b = candidate;
                        value = v;
                        step *= F::cast(1.5);
                    }
                    _ => {
                        step *= F::cast(0.4);
                        if step < F::cast(1e-14) {
                            break;
                        }
                    }
                }
            }
            Ok(value)
        })
        .collect();
    for v in refined? {
        best = best.min(v);
    }

    // Budgeted sampling, prefix-stable in the budget.
    let chunks = budget.div_ceil(SAMPLE_CHUNK);
    let sampled: Result<Vec<F>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let in_chunk = SAMPLE_CHUNK.min(budget - c * SAMPLE_CHUNK);
            let mut chunk_best = F::infinity();
            for _ in 0..in_chunk {
                let mut b = sample_point(&mut rng);
                feasible(&mut b);
                if let Some(v) = ratio(&b)? {
                    chunk_best = chunk_best.min(v);
                }
            }
            Ok(chunk_best)
        })
        .collect();
    for v in sampled? {
        best = best.min(v);
    }

    if !best.is_finite() {
        return Err(Error::Degenerate(
            "stabil search produced no usable direction".into(),
        ));
    }
    let clipped = best.max(F::zero()).min(F::one());
    Ok(StabilEstimate {
        k: clipped,
        degenerate: !(clipped > F::zero()),
    })
}

/// Smaller root of `a e^{-2a} = tau` on `[0, 1/2]`, found by bisection to
/// a residual below `1e-12`.
pub fn a_tau_root<F: Real>(tau: F) -> Result<F> {
    let limit = max_tau::<F>();
    if !(tau >= F::zero()) || tau > limit * (F::one() + F::cast(1e-9)) {
        return Err(Error::InvalidParameter(format!(
            "tau = {tau} outside [0, (1/2)e^-1 = {limit}]"
        )));
    }
    let tau = tau.min(limit);
    if tau == F::zero() {
        return Ok(F::zero());
    }
    // The curve is quadratically flat at its maximum, so bisection cannot
    // localize the root there; at the boundary the root is exactly 1/2.
    if limit - tau <= F::cast(1e-13) {
        return Ok(F::cast(0.5));
    }
    let f = |a: F| a * (-F::cast(2.0) * a).exp() - tau;
    let mut lo = F::zero();
    let mut hi = F::cast(0.5);
    // f is monotone increasing on [0, 1/2]
    for _ in 0..200 {
        let mid = (lo + hi) * F::cast(0.5);
        if f(mid) < F::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= F::cast(1e-16) {
            break;
        }
    }
    Ok((lo + hi) * F::cast(0.5))
}

/// Compatibility-factor route bounds (the `tau`/`a_tau` machinery).
#[derive(Debug, Clone, Copy)]
pub struct CompatRouteBounds<F: Real> {
    pub tau: F,
    pub a_tau: F,
    pub l1_bound: F,
    pub lq_bound: F,
    pub compat: F,
    pub cif_q: F,
    pub q: F,
}

/// Bound formulas given already-computed cone constants:
/// `tau = K (zeta+1) d* lambda1 / (2 C^2)`, the l1 bound
/// `e^{2 a_tau} (zeta+1) d* lambda1 / (2 C^2)` and the lq bound
/// `2 e^{2 a_tau} zeta d*^{1/q} lambda1 / ((zeta+1) C_q)`.
pub fn compat_route_bounds_from_constants<F: Real>(
    k_sup: F,
    zeta: F,
    d_star: usize,
    lambda1: F,
    compat: F,
    cif_q: F,
    q: F,
) -> Result<CompatRouteBounds<F>> {
    if !(compat > F::zero()) || !(cif_q > F::zero()) {
        return Err(Error::Degenerate(
            "cone constants must be positive for the bounds to exist".into(),
        ));
    }
    let d = F::cast(d_star as f64);
    let tau = k_sup * (zeta + F::one()) * d * lambda1 / (F::cast(2.0) * compat * compat);
    let limit = max_tau::<F>();
    if tau > limit {
        return Err(Error::BoundInapplicable {
            tau: tau.to_f64(),
            limit: limit.to_f64(),
        });
    }
    let a_tau = a_tau_root(tau)?;
    let grow = (F::cast(2.0) * a_tau).exp();
    let l1_bound = grow * (zeta + F::one()) * d * lambda1 / (F::cast(2.0) * compat * compat);
    let lq_bound = F::cast(2.0) * grow * zeta * d.powf(F::one() / q) * lambda1
        / ((zeta + F::one()) * cif_q);
    Ok(CompatRouteBounds {
        tau,
        a_tau,
        l1_bound,
        lq_bound,
        compat,
        cif_q,
        q,
    })
}

/// Computes the compatibility-route bounds from a Hessian-type matrix,
/// running the cone searches with the configured budget and seed.
pub fn compat_route_bounds<F: Real>(
    sigma: &Array2<F>,
    cone: &ConeSpec<F>,
    pen: &Penalty<F>,
    cfg: &TheoryConfig<F>,
    q: F,
) -> Result<CompatRouteBounds<F>> {
    validate_symmetric(sigma)?;
    compat_route_bounds_op(sigma, cone, pen, cfg, q, &[])
}

/// Operator-form variant of [`compat_route_bounds`] with extra candidate
/// directions passed into both cone searches.
pub fn compat_route_bounds_op<F: Real>(
    sigma: &impl SigmaOp<F>,
    cone: &ConeSpec<F>,
    pen: &Penalty<F>,
    cfg: &TheoryConfig<F>,
    q: F,
    extra: &[Array1<F>],
) -> Result<CompatRouteBounds<F>> {
    let compat = compatibility_factor_op(sigma, cone, cfg.samples, cfg.seed, extra)?;
    let cif_q = weak_cif_op(sigma, cone, q, cfg.samples, cfg.seed, extra)?;
    compat_route_bounds_from_constants(cfg.l_or_k, cfg.zeta, cone.d_star(), pen.lambda1, compat, cif_q, q)
}

/// Stabil-route bounds.
#[derive(Debug, Clone, Copy)]
pub struct StabilRouteBounds<F: Real> {
    pub l1_bound: F,
    pub pred_bound: F,
    pub a_const: F,
}

/// Curvature floor `a = min (1/2) theta e^x (e^y + theta) / (theta + e^x)^2`
/// over `|x| <= L(M + B)`, `|y| <= L B`.
///
/// The integrand factors: the `y` part is minimized at `y = -LB`, and the
/// `x` part `e^x/(theta+e^x)^2` peaks at `x = log theta` and decays on both
/// sides, so its minimum sits at whichever box endpoint lies farther from
/// `log theta`. All corners plus the interior critical line are evaluated
/// anyway.
pub fn curvature_floor<F: Real>(theta: F, cfg: &TheoryConfig<F>) -> F {
    let half = F::cast(0.5);
    let x_max = cfg.l_or_k * (cfg.m() + cfg.b_sup);
    let y_max = cfg.l_or_k * cfg.b_sup;
    let phi = |x: F, y: F| -> F {
        half * mean_fraction(x, theta) * theta_fraction(x, theta) * (y.exp() + theta)
    };
    let mut xs = vec![-x_max, x_max];
    let log_theta = theta.ln();
    if log_theta.abs() <= x_max {
        xs.push(log_theta);
    }
    let mut a = F::infinity();
    for &x in &xs {
        for &y in &[-y_max, y_max] {
            a = a.min(phi(x, y));
        }
    }
    a
}

/// The stabil-route l1 bound
/// `2.25^2 lambda1 d* / (a k + 2 lambda2) + (1 + a/lambda1) eps_n`;
/// shared between the oracle bound and the `B0` detection threshold so the
/// two agree bit for bit.
pub fn stabil_l1_bound<F: Real>(
    pen: &Penalty<F>,
    d_star: usize,
    stabil_k: F,
    a_const: F,
    epsilon_n: F,
) -> F {
    let d = F::cast(d_star as f64);
    let denom = a_const * stabil_k + F::cast(2.0) * pen.lambda2;
    F::cast(2.25) * F::cast(2.25) * pen.lambda1 * d / denom
        + (F::one() + a_const / pen.lambda1) * epsilon_n
}

/// Stabil-route bounds: l1 bound `2.25^2 lambda1 d* / (a k + 2 lambda2) +
/// (1 + a/lambda1) eps_n` and prediction bound
/// `17.71875 d* lambda1^2 / (a (a k + 2 lambda2)) + (4.5 lambda1/a + 3.5) eps_n`.
pub fn stabil_route_bounds<F: Real>(
    pen: &Penalty<F>,
    cfg: &TheoryConfig<F>,
    theta: F,
    d_star: usize,
    stabil_k: F,
) -> Result<StabilRouteBounds<F>> {
    if !(stabil_k > F::zero()) {
        return Err(Error::Degenerate(format!(
            "stabil constant must be positive, got {stabil_k}"
        )));
    }
    if !(pen.lambda1 > F::zero()) {
        return Err(Error::InvalidParameter(
            "lambda1 must be positive for the stabil-route bounds".into(),
        ));
    }
    let coupled = pen.lambda1 / (F::cast(8.0) * cfg.b_sup);
    if (pen.lambda2 - coupled).abs() > F::cast(1e-9) * coupled.max(F::cast(1e-30)) {
        log::warn!(
            "lambda2 = {} differs from the coupling lambda1/(8B) = {}; the bound assumes the coupling",
            pen.lambda2,
            coupled
        );
    }
    let a = curvature_floor(theta, cfg);
    let d = F::cast(d_star as f64);
    let denom = a * stabil_k + F::cast(2.0) * pen.lambda2;
    let l1_bound = stabil_l1_bound(pen, d_star, stabil_k, a, cfg.epsilon_n);
    let pred_bound = F::cast(17.71875) * d * pen.lambda1 * pen.lambda1 / (a * denom)
        + (F::cast(4.5) * pen.lambda1 / a + F::cast(3.5)) * cfg.epsilon_n;
    Ok(StabilRouteBounds {
        l1_bound,
        pred_bound,
        a_const: a,
    })
}

/// Score-at-truth event: `z* = ||score(b*) + 2 lambda2 b*||_inf` must stay
/// below `lambda1 (zeta - 1)/(zeta + 1)`.
#[derive(Debug, Clone, Copy)]
pub struct EventE<F: Real> {
    pub z_star: F,
    pub threshold: F,
    pub holds: bool,
}

pub fn event_e_check<F: Real>(
    beta_star: &ArrayView1<F>,
    data: &Dataset<F>,
    pen: &Penalty<F>,
    zeta: F,
) -> Result<EventE<F>> {
    if !(zeta > F::one()) {
        return Err(Error::InvalidParameter("zeta must exceed 1".into()));
    }
    let score = model::nb_score(beta_star, data)?;
    let two = F::cast(2.0);
    let mut z_star = F::zero();
    for j in 0..beta_star.len() {
        z_star = z_star.max((score[j] + two * pen.lambda2 * beta_star[j]).abs());
    }
    let threshold = pen.lambda1 * (zeta - F::one()) / (zeta + F::one());
    Ok(EventE {
        z_star,
        threshold,
        holds: z_star <= threshold,
    })
}

/// Centered-score event of the stabil route, evaluated at both observable
/// endpoints of the unobservable intermediate point.
#[derive(Debug, Clone, Copy)]
pub struct EventA<F: Real> {
    pub max_at_star: F,
    pub max_at_hat: F,
    pub threshold: F,
    /// Conjunction of the endpoint evaluations. The true event sits at an
    /// intermediate point between the two, so this is an endpoint
    /// approximation, not the event itself.
    pub holds: bool,
}

pub fn event_a_check<F: Real>(
    beta_hat: &ArrayView1<F>,
    beta_star: &ArrayView1<F>,
    data: &Dataset<F>,
    lambda1: F,
) -> Result<EventA<F>> {
    let eta_star = data.linear_predictor(beta_star)?;
    let expected: Array1<F> = eta_star.mapv(|u| u.exp());
    let stat = |beta: &ArrayView1<F>| -> Result<F> {
        let eta = data.linear_predictor(beta)?;
        let n = F::cast(data.n() as f64);
        let theta = data.theta();
        let weights = Array1::from_iter(
            eta.iter()
                .zip(data.y().iter().zip(expected.iter()))
                .map(|(&u, (&y, &ey))| (y - ey) * theta_fraction(u, theta) / n),
        );
        let per_coord = data.x().t().dot(&weights);
        Ok(per_coord.iter().fold(F::zero(), |acc, v| acc.max(v.abs())))
    };
    let max_at_star = stat(beta_star)?;
    let max_at_hat = stat(beta_hat)?;
    let threshold = lambda1 / F::cast(4.0);
    Ok(EventA {
        max_at_star,
        max_at_hat,
        threshold,
        holds: max_at_star <= threshold && max_at_hat <= threshold,
    })
}

/// Both sides of the grouping inequality for a coordinate pair, plus the
/// empirical correlation of the two columns.
#[derive(Debug, Clone, Copy)]
pub struct GroupingBound<F: Real> {
    pub lhs: F,
    pub rhs: F,
    pub rho_kl: F,
}

/// `lhs = |b_k - b_l|`, `rhs = (1/(2 n lambda2)) sum_i theta |x_ik - x_il|
/// |e^{x_i'b} - y_i| / (theta + e^{x_i'b})`, `rho_kl = (1/n) sum_i x_ik x_il`.
pub fn grouping_bound<F: Real>(
    beta: &ArrayView1<F>,
    data: &Dataset<F>,
    pen: &Penalty<F>,
    k: usize,
    l: usize,
) -> Result<GroupingBound<F>> {
    if !(pen.lambda2 > F::zero()) {
        return Err(Error::InvalidParameter(
            "grouping bound requires lambda2 > 0".into(),
        ));
    }
    let p = data.p();
    if k >= p || l >= p {
        return Err(Error::DimensionMismatch(format!(
            "pair ({k}, {l}) out of range for p = {p}"
        )));
    }
    let eta = data.linear_predictor(beta)?;
    let theta = data.theta();
    let n = F::cast(data.n() as f64);
    let mut sum = F::zero();
    let mut rho = F::zero();
    for (i, (&u, &y)) in eta.iter().zip(data.y().iter()).enumerate() {
        let xk = data.x()[(i, k)];
        let xl = data.x()[(i, l)];
        // theta |e^u - y| / (theta + e^u), assembled from the stable pieces
        let resid = (theta * mean_fraction(u, theta) - y * theta_fraction(u, theta)).abs();
        sum += (xk - xl).abs() * resid;
        rho += xk * xl;
    }
    Ok(GroupingBound {
        lhs: (beta[k] - beta[l]).abs(),
        rhs: sum / (F::cast(2.0) * n * pen.lambda2),
        rho_kl: rho / n,
    })
}

/// Dimension `p` solving `5 p (2p)^{-A^2} = delta`:
/// `p = exp{ log(5 / (2^{A^2} delta)) / (A^2 - 1) }`.
pub fn honest_dimension<F: Real>(a: F, delta: F) -> Result<F> {
    if !(a > F::one()) {
        return Err(Error::InvalidParameter("A must exceed 1".into()));
    }
    if !(delta > F::zero()) {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    let a2 = a * a;
    let arg = F::cast(5.0) / (F::cast(2.0).powf(a2) * delta);
    Ok((arg.ln() / (a2 - F::one())).exp())
}
