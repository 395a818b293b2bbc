//! Critical values for the four tests: least-favorable projection (LFP),
//! least favorable (LF), conditional (truncated normal), and hybrid.
//!
//! The LFP and LF values are simulated quantiles over a fixed matrix of
//! standard-normal draws; holding the draws fixed across calls keeps
//! confidence-set boundaries smooth and makes runs reproducible. The
//! conditional value is the quantile of a normal distribution truncated to
//! the interval of statistic values compatible with the observed conditioning
//! event, with the truncation points computed in closed form at a clean dual
//! vertex and by bisection otherwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lp::{DualProgram, LpSolution};
use crate::moments::NormalModel;
use crate::normal;

/// Default bisection width tolerance for truncation bounds.
pub const DEFAULT_TOL_V: f64 = 1e-6;
/// Default membership tolerance `|c - LPValue(c)|` for the bisection set.
pub const DEFAULT_TOL_LP: f64 = 1e-6;
/// Relative eigenvalue clip for the symmetric PSD square root.
const SQRT_EIG_CLIP: f64 = 1e-12;
/// Slack allowed on the `V0 >= 0` diagnostic.
const V_ZERO_SLACK: f64 = 1e-7;

/// A fixed k x S matrix of independent standard normal draws, generated from
/// a seeded ChaCha12 stream so runs reproduce across platforms.
#[derive(Debug, Clone)]
pub struct SimDraws {
    pub xi: DMatrix<f64>,
    pub seed: u64,
}

impl SimDraws {
    pub fn generate(k: usize, count: usize, seed: u64) -> Self {
        assert!(count >= 1, "need at least one simulation draw");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        // Column-major fill: column s is draw s.
        let mut xi = DMatrix::zeros(k, count);
        for s in 0..count {
            for j in 0..k {
                xi[(j, s)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self { xi, seed }
    }

    pub fn count(&self) -> usize {
        self.xi.ncols()
    }

    pub fn k(&self) -> usize {
        self.xi.nrows()
    }
}

/// Symmetric PSD square root by eigendecomposition, clipping small negative
/// eigenvalues that arise from rank-deficient inputs (paired equality moments
/// are expressly allowed to make `Sigma` singular).
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = sigma.nrows();
    let eig = sigma.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.amax();
    let clip = SQRT_EIG_CLIP * max_ev;
    let mut vals = DVector::zeros(k);
    for i in 0..k {
        let ev = eig.eigenvalues[i];
        if ev < -1e-8 * max_ev.max(1.0) {
            return Err(Error::NotPsd(format!("eigenvalue {ev} is negative")));
        }
        vals[i] = if ev <= clip { 0.0 } else { ev.sqrt() };
    }
    let mut half = eig.eigenvectors.clone();
    for c in 0..k {
        half.column_mut(c).scale_mut(vals[c]);
    }
    Ok(&half * eig.eigenvectors.transpose())
}

/// Empirical quantile as the order statistic of rank `ceil((1 - alpha) S)`.
fn empirical_upper_quantile(values: &mut [f64], alpha: f64) -> f64 {
    let s = values.len();
    let rank = ((1.0 - alpha) * s as f64).ceil() as usize;
    let rank = rank.clamp(1, s);
    values.sort_by(|a, b| a.partial_cmp(b).expect("quantile values must be ordered"));
    values[rank - 1]
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Least-favorable projection critical value: the `1 - alpha` quantile of
/// `max_j (Sigma^{1/2} xi)_j / sqrt(Sigma_jj)` over the simulation draws.
pub fn lfp_critical_value(sigma: &DMatrix<f64>, alpha: f64, draws: &SimDraws) -> Result<f64> {
    check_alpha(alpha)?;
    let half = psd_sqrt(sigma)?;
    lfp_critical_value_with(sigma, &half, alpha, draws)
}

pub(crate) fn lfp_critical_value_with(
    sigma: &DMatrix<f64>,
    sigma_half: &DMatrix<f64>,
    alpha: f64,
    draws: &SimDraws,
) -> Result<f64> {
    let k = sigma.nrows();
    if draws.k() != k {
        return Err(Error::Dimension {
            what: "simulation draw rows",
            expected: k.to_string(),
            got: draws.k().to_string(),
        });
    }
    let sds = DVector::from_iterator(k, sigma.diagonal().iter().map(|v| v.sqrt()));
    let scaled = sigma_half * &draws.xi;
    let mut stats: Vec<f64> = (0..draws.count())
        .map(|s| {
            let mut m = f64::NEG_INFINITY;
            for j in 0..k {
                m = m.max(scaled[(j, s)] / sds[j]);
            }
            m
        })
        .collect();
    Ok(empirical_upper_quantile(&mut stats, alpha))
}

/// Least-favorable critical value: for each draw, solve the profiled linear
/// program with the simulated moment vector in place of `Y_n` and take the
/// `1 - alpha` quantile. Draws whose solve fails numerically count as
/// `+infinity`, which can only push the critical value up.
pub fn lf_critical_value(model: &NormalModel, alpha: f64, draws: &SimDraws) -> Result<f64> {
    check_alpha(alpha)?;
    let dual = DualProgram::new(model);
    let half = psd_sqrt(&model.sigma)?;
    lf_critical_value_with(&dual, &half, alpha, draws)
}

pub(crate) fn lf_critical_value_with(
    dual: &DualProgram,
    sigma_half: &DMatrix<f64>,
    alpha: f64,
    draws: &SimDraws,
) -> Result<f64> {
    let scaled = sigma_half * &draws.xi;
    let mut etas: Vec<f64> = (0..draws.count())
        .into_par_iter()
        .map(|s| {
            let xi = scaled.column(s).into_owned();
            match dual.maximize(&xi) {
                Ok(Some(sol)) => sol.objective,
                Ok(None) => f64::NEG_INFINITY,
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    Ok(empirical_upper_quantile(&mut etas, alpha))
}

/// How a set of truncation bounds was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsMethod {
    ClosedForm,
    Bisection,
}

/// The interval of statistic values compatible with the observed conditioning
/// event, plus the `V0 >= 0` diagnostic for the closed-form path.
#[derive(Debug, Clone, Copy)]
pub struct TruncationBounds {
    pub v_lo: f64,
    pub v_up: f64,
    pub v_zero_ok: bool,
    pub method: BoundsMethod,
}

/// Variance of the statistic along the dual vertex, `gamma' Sigma gamma`.
pub fn gamma_variance(model: &NormalModel, gamma: &DVector<f64>) -> f64 {
    gamma.dot(&(&model.sigma * gamma))
}

/// Closed-form truncation bounds at a clean dual vertex: with `B` the rows
/// carrying positive multipliers, `L = I - W W_B^{-1} M_B`,
/// `D = Sigma g / (g' Sigma g)` and `S = (I - D g') Y_n`, the interval is
/// determined by the sign pattern of `L D`:
/// `V^lo = max_{(LD)_j < 0} -(LS)_j / (LD)_j`,
/// `V^up = min_{(LD)_j > 0} -(LS)_j / (LD)_j`, and rows with `(LD)_j = 0`
/// require `-(LS)_j >= 0`.
pub fn truncation_bounds_closed_form(
    model: &NormalModel,
    sol: &LpSolution,
) -> Result<TruncationBounds> {
    if !sol.vertex_ok {
        return Err(Error::VertexNotOk);
    }
    let gvar = gamma_variance(model, &sol.gamma);
    if gvar <= 0.0 {
        return Err(Error::DegenerateGammaVariance);
    }
    let k = model.k();
    let m = sol.gamma_positive.len();
    let w = crate::lp::constraint_matrix(model);
    let w_b = DMatrix::from_fn(m, m, |r, c| w[(sol.gamma_positive[r], c)]);
    let w_b_inv = w_b.try_inverse().ok_or(Error::VertexNotOk)?;
    let w_wbinv = &w * &w_b_inv; // k x m

    // Lambda = I - W W_B^{-1} M_B, applied to D and S directly.
    let delta = (&model.sigma * &sol.gamma) / gvar;
    let eta = sol.gamma.dot(&model.y_n);
    let s_vec = &model.y_n - &delta * eta;

    let apply_lambda = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = v.clone();
        for r in 0..k {
            for (t, &j) in sol.gamma_positive.iter().enumerate() {
                out[r] -= w_wbinv[(r, t)] * v[j];
            }
        }
        // Rows in B are exactly zero in exact arithmetic; enforce it.
        for &j in &sol.gamma_positive {
            out[j] = 0.0;
        }
        out
    };
    let ld = apply_lambda(&delta);
    let ls = apply_lambda(&s_vec);

    let zero_tol = 1e-10 * ld.amax().max(1.0);
    let mut v_lo = f64::NEG_INFINITY;
    let mut v_up = f64::INFINITY;
    let mut v_zero = f64::INFINITY;
    for j in 0..k {
        if sol.gamma_positive.contains(&j) {
            continue;
        }
        let d = ld[j];
        let ratio = -ls[j] / d;
        if d < -zero_tol {
            v_lo = v_lo.max(ratio);
        } else if d > zero_tol {
            v_up = v_up.min(ratio);
        } else {
            v_zero = v_zero.min(-ls[j]);
        }
    }
    let v_zero_ok = v_zero >= -V_ZERO_SLACK * (1.0 + ls.amax());
    Ok(TruncationBounds {
        v_lo,
        v_up,
        v_zero_ok,
        method: BoundsMethod::ClosedForm,
    })
}

/// Truncation bounds by bisection on the membership set
/// `C = { c : c = max_{g~ in F} g~'(s + D c) }`, the dual-path definition
/// that stays valid at degenerate or non-unique solutions. `C` is convex and
/// contains the realized statistic, so each endpoint is found by bisecting
/// between the statistic and an outer cap `M`.
pub fn truncation_bounds_bisection(
    model: &NormalModel,
    sol: &LpSolution,
    m_cap: Option<f64>,
    tol_v: f64,
    tol_lp: f64,
) -> Result<TruncationBounds> {
    let eta = sol.eta;
    if !eta.is_finite() {
        return Err(Error::LpValueInfinite);
    }
    let gvar = gamma_variance(model, &sol.gamma);
    if gvar <= 0.0 {
        return Err(Error::DegenerateGammaVariance);
    }
    let dual = DualProgram::new(model);
    let delta = (&model.sigma * &sol.gamma) / gvar;
    let s_vec = &model.y_n - &delta * sol.gamma.dot(&model.y_n);

    let lp_value = |c: f64| -> Result<f64> {
        let obj = &s_vec + &delta * c;
        let sol = dual
            .maximize(&obj)?
            .ok_or(Error::LpValueInfinite)?;
        Ok(sol.objective)
    };
    let in_set = |c: f64| -> Result<bool> { Ok((c - lp_value(c)?).abs() < tol_lp) };

    if !in_set(eta)? {
        return Err(Error::BisectionInconsistent);
    }
    let m = m_cap.unwrap_or_else(|| (eta + 20.0 * gvar.sqrt()).max(100.0));

    let v_up = if in_set(m)? {
        f64::INFINITY
    } else {
        let mut lb = eta;
        let mut ub = m;
        while ub - lb > tol_v {
            let mid = 0.5 * (lb + ub);
            if in_set(mid)? {
                lb = mid;
            } else {
                ub = mid;
            }
        }
        0.5 * (lb + ub)
    };

    // Mirror of the upper cap; the min keeps the bracket valid when the
    // statistic itself sits below -100.
    let m_lo = (-m).min(eta - 20.0 * gvar.sqrt());
    let v_lo = if in_set(m_lo)? {
        f64::NEG_INFINITY
    } else {
        let mut lb = m_lo;
        let mut ub = eta;
        while ub - lb > tol_v {
            let mid = 0.5 * (lb + ub);
            if in_set(mid)? {
                ub = mid;
            } else {
                lb = mid;
            }
        }
        0.5 * (lb + ub)
    };

    Ok(TruncationBounds {
        v_lo,
        v_up,
        v_zero_ok: true,
        method: BoundsMethod::Bisection,
    })
}

/// Replaces the upper truncation point by its hybrid version
/// `min(V^up, c_{kappa,LF})`; the lower point is unchanged.
pub fn hybrid_upper_bound(bounds: &TruncationBounds, c_kappa_lf: f64) -> TruncationBounds {
    TruncationBounds {
        v_lo: bounds.v_lo,
        v_up: bounds.v_up.min(c_kappa_lf),
        v_zero_ok: bounds.v_zero_ok,
        method: bounds.method,
    }
}

/// The `1 - alpha` quantile of `N(0, gamma' Sigma gamma)` truncated to
/// `[v_lo, v_up]`. Returns `-infinity` when the window is empty, which makes
/// the hybrid test reject outright per its convention.
pub fn conditional_critical_value(
    gamma: &DVector<f64>,
    bounds: &TruncationBounds,
    sigma: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if bounds.v_lo >= bounds.v_up {
        return Ok(f64::NEG_INFINITY);
    }
    let gvar = gamma.dot(&(sigma * gamma));
    if gvar <= 0.0 {
        return Err(Error::DegenerateGammaVariance);
    }
    let sd = gvar.sqrt();
    let a = bounds.v_lo / sd;
    let b = bounds.v_up / sd;
    let z = normal::truncated_quantile(a, b, 1.0 - alpha);
    Ok((z * sd).clamp(bounds.v_lo, bounds.v_up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{solve_primal_dual, PrimalDual};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn model(y: Vec<f64>, x: Option<DMatrix<f64>>, sigma: DMatrix<f64>) -> NormalModel {
        let k = y.len();
        let x = x.unwrap_or_else(|| DMatrix::zeros(k, 0));
        NormalModel::new(DVector::from_vec(y), x, sigma).unwrap()
    }

    #[test]
    fn lfp_scalar_matches_normal_quantile() {
        let draws = SimDraws::generate(1, 100_000, 42);
        let c = lfp_critical_value(&DMatrix::identity(1, 1), 0.05, &draws).unwrap();
        assert!((c - 1.6449).abs() < 0.02, "c = {c}");
    }

    #[test]
    fn lfp_scale_invariance_exact() {
        let draws = SimDraws::generate(3, 2000, 7);
        let sigma = DMatrix::identity(3, 3);
        let c1 = lfp_critical_value(&sigma, 0.05, &draws).unwrap();
        let c2 = lfp_critical_value(&(sigma * 4.0), 0.05, &draws).unwrap();
        // Per-moment studentization makes the value invariant to c^2 I.
        assert_relative_eq!(c1, c2, epsilon = 1e-12);
    }

    #[test]
    fn lfp_two_iid_moments() {
        let draws = SimDraws::generate(2, 100_000, 9);
        let c = lfp_critical_value(&DMatrix::identity(2, 2), 0.05, &draws).unwrap();
        // Quantile of max of two iid normals: Phi^{-1}(sqrt(0.95)).
        assert!((c - 1.9545).abs() < 0.02, "c = {c}");
    }

    #[test]
    fn lf_equals_lfp_without_nuisance() {
        let draws = SimDraws::generate(3, 4000, 11);
        let sigma = {
            let a = DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
            &a * a.transpose() + DMatrix::identity(3, 3)
        };
        let m = model(vec![0.0; 3], None, sigma.clone());
        let lf = lf_critical_value(&m, 0.05, &draws).unwrap();
        let lfp = lfp_critical_value(&sigma, 0.05, &draws).unwrap();
        assert_relative_eq!(lf, lfp, epsilon = 1e-10);
    }

    #[test]
    fn lf_analytic_two_constraint() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let m = model(vec![0.0, 0.0], Some(x), DMatrix::identity(2, 2));
        let draws = SimDraws::generate(2, 100_000, 5);
        let c = lf_critical_value(&m, 0.05, &draws).unwrap();
        // eta_s = (xi_1 + xi_2)/2 ~ N(0, 1/2).
        let expect = normal::quantile(0.95) / 2f64.sqrt();
        assert!((c - expect).abs() < 0.02, "c = {c}, expect = {expect}");
    }

    #[test]
    fn lf_never_exceeds_lfp_on_shared_draws() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..50 {
            let k = rng.random_range(1..=6);
            let p = rng.random_range(0..=2);
            let y = vec![0.0; k];
            let x = DMatrix::from_fn(k, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sigma = &a * a.transpose() + DMatrix::identity(k, k) * 0.3;
            let m = model(y, Some(x), sigma.clone());
            let draws = SimDraws::generate(k, 400, rng.random());
            let lf = lf_critical_value(&m, 0.05, &draws).unwrap();
            let lfp = lfp_critical_value(&sigma, 0.05, &draws).unwrap();
            assert!(lf <= lfp + 1e-10, "lf = {lf} > lfp = {lfp}");
        }
    }

    #[test]
    fn closed_form_bounds_no_nuisance() {
        // Largest moment 2, second largest 1: condition on the runner-up.
        let m = model(vec![2.0, 1.0], None, DMatrix::identity(2, 2));
        let PrimalDual::Optimal(sol) = solve_primal_dual(&m).unwrap() else {
            panic!()
        };
        let b = truncation_bounds_closed_form(&m, &sol).unwrap();
        assert_relative_eq!(b.v_lo, 1.0, epsilon = 1e-9);
        assert_eq!(b.v_up, f64::INFINITY);
        assert!(b.v_zero_ok);
    }

    #[test]
    fn closed_form_single_moment_unbounded() {
        let m = model(vec![0.4], None, DMatrix::identity(1, 1));
        let PrimalDual::Optimal(sol) = solve_primal_dual(&m).unwrap() else {
            panic!()
        };
        let b = truncation_bounds_closed_form(&m, &sol).unwrap();
        assert_eq!(b.v_lo, f64::NEG_INFINITY);
        assert_eq!(b.v_up, f64::INFINITY);
    }

    #[test]
    fn bisection_matches_closed_form() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 0.0]);
        let m = model(vec![1.0, 1.0, 0.0], Some(x), DMatrix::identity(3, 3));
        let PrimalDual::Optimal(sol) = solve_primal_dual(&m).unwrap() else {
            panic!()
        };
        assert!(sol.vertex_ok);
        let cf = truncation_bounds_closed_form(&m, &sol).unwrap();
        let bi = truncation_bounds_bisection(&m, &sol, None, 1e-6, 1e-6).unwrap();
        for (a, b) in [(cf.v_lo, bi.v_lo), (cf.v_up, bi.v_up)] {
            if a.is_finite() {
                assert!((a - b).abs() <= 2e-6, "{a} vs {b}");
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn bisection_mirrors_no_nuisance_example() {
        let m = model(vec![2.0, 1.0], None, DMatrix::identity(2, 2));
        let PrimalDual::Optimal(sol) = solve_primal_dual(&m).unwrap() else {
            panic!()
        };
        let b = truncation_bounds_bisection(&m, &sol, None, 1e-6, 1e-6).unwrap();
        assert!((b.v_lo - 1.0).abs() <= 1e-6);
        assert_eq!(b.v_up, f64::INFINITY);
    }

    #[test]
    fn bisection_handles_exact_degeneracy() {
        // Duplicated moment rows make the vertex degenerate; the bounds must
        // still bracket the statistic.
        let m = model(vec![1.0, 1.0], None, DMatrix::identity(2, 2));
        let PrimalDual::Optimal(sol) = solve_primal_dual(&m).unwrap() else {
            panic!()
        };
        let b = truncation_bounds_bisection(&m, &sol, None, 1e-6, 1e-6).unwrap();
        assert!(b.v_lo <= sol.eta + 1e-6 && sol.eta <= b.v_up + 1e-6);
    }

    #[test]
    fn conditional_critical_value_examples() {
        let gamma = DVector::from_vec(vec![1.0]);
        let sigma = DMatrix::identity(1, 1);
        let no_trunc = TruncationBounds {
            v_lo: f64::NEG_INFINITY,
            v_up: f64::INFINITY,
            v_zero_ok: true,
            method: BoundsMethod::ClosedForm,
        };
        let c = conditional_critical_value(&gamma, &no_trunc, &sigma, 0.05).unwrap();
        assert_relative_eq!(c, 1.6448536269514722, epsilon = 1e-8);

        let lower = TruncationBounds {
            v_lo: 0.0,
            v_up: f64::INFINITY,
            ..no_trunc
        };
        let c = conditional_critical_value(&gamma, &lower, &sigma, 0.05).unwrap();
        assert_relative_eq!(c, 1.959963984540054, epsilon = 1e-6);
    }

    #[test]
    fn hybrid_bound_and_empty_window() {
        let b = TruncationBounds {
            v_lo: 3.0,
            v_up: f64::INFINITY,
            v_zero_ok: true,
            method: BoundsMethod::ClosedForm,
        };
        let hb = hybrid_upper_bound(&b, 2.5);
        assert_eq!(hb.v_up, 2.5);
        assert_eq!(hb.v_lo, 3.0);
        let c = conditional_critical_value(
            &DVector::from_vec(vec![1.0]),
            &hb,
            &DMatrix::identity(1, 1),
            0.05,
        )
        .unwrap();
        assert_eq!(c, f64::NEG_INFINITY);
    }

    #[test]
    fn quantile_rank_convention() {
        let mut vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        // ceil(0.95 * 100) = 95 -> 95th order statistic.
        assert_eq!(empirical_upper_quantile(&mut vals, 0.05), 95.0);
        let mut three = vec![10.0, 20.0, 30.0];
        // ceil(0.5 * 3) = 2.
        assert_eq!(empirical_upper_quantile(&mut three, 0.5), 20.0);
    }

    #[test]
    fn draws_are_deterministic() {
        let a = SimDraws::generate(4, 100, 99);
        let b = SimDraws::generate(4, 100, 99);
        assert_eq!(a.xi, b.xi);
    }
}
