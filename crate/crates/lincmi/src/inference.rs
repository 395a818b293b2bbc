//! The four tests (LFP, LF, conditional, hybrid) and confidence-set
//! construction by grid inversion, direct linear programming for linear
//! targets, and projection over nonlinear nuisance parameters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_sigma, MatchingConfig};
use crate::critical_values::{
    conditional_critical_value, gamma_variance, hybrid_upper_bound, lf_critical_value,
    lfp_critical_value, truncation_bounds_bisection, truncation_bounds_closed_form, SimDraws,
    TruncationBounds, DEFAULT_TOL_LP, DEFAULT_TOL_V,
};
use crate::error::{Error, Result};
use crate::lp::{solve_primal_dual, LpSolution, PrimalDual, StandardOutcome};
use crate::moments::{build_normal_model, NormalModel, ObservationSet};

/// Threshold on `gamma' Sigma gamma` (relative to `max_j Sigma_jj`) below
/// which the conditional path degenerates to "reject iff the statistic is
/// positive".
const GAMMA_VAR_REL_TOL: f64 = 1e-10;

/// Which test to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lfp,
    Lf,
    Conditional,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lfp, Method::Lf, Method::Conditional, Method::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lfp => "lfp",
            Method::Lf => "lf",
            Method::Conditional => "conditional",
            Method::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lfp" => Ok(Method::Lfp),
            "lf" => Ok(Method::Lf),
            "cond" | "conditional" => Ok(Method::Conditional),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// Full description of a single test run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSpec {
    pub method: Method,
    pub alpha: f64,
    /// First-stage level for the hybrid test; defaults to `alpha / 10`.
    pub kappa: Option<f64>,
    /// Never reject when the standardized statistic falls below `-floor_c`
    /// (conditional and hybrid only). Large enough that it cannot bind in any
    /// realistic draw while satisfying the uniformity requirement.
    pub floor_c: f64,
    /// Number of simulation draws used for LF/LFP critical values.
    pub sim_count: usize,
    pub seed: u64,
}

impl TestSpec {
    pub fn new(method: Method, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            kappa: None,
            floor_c: 100.0,
            sim_count: 10_000,
            seed: 0,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(self.alpha / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        let kappa = self.kappa();
        if !(kappa > 0.0 && kappa < self.alpha) {
            return Err(Error::InvalidKappa {
                kappa,
                alpha: self.alpha,
            });
        }
        if self.floor_c <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "floor_c must be positive, got {}",
                self.floor_c
            )));
        }
        if self.sim_count == 0 {
            return Err(Error::InvalidConfig("sim_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Draws sized for this spec and a k-moment model.
    pub fn draws(&self, k: usize) -> SimDraws {
        SimDraws::generate(k, self.sim_count, self.seed)
    }
}

/// Status of the underlying linear program for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatusTag {
    Optimal,
    /// The null holds trivially; the statistic is minus infinity.
    TriviallySatisfied,
}

/// Conditioning diagnostics carried along with each decision.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub lp_status: LpStatusTag,
    pub vertex_ok: Option<bool>,
    pub bounds: Option<TruncationBounds>,
    pub gamma_variance: Option<f64>,
    /// The degenerate-variance fallback (reject iff statistic positive) ran.
    pub degenerate_gamma: bool,
    /// Hybrid only: the statistic exceeded the first-stage LF critical value.
    pub first_stage_reject: Option<bool>,
    /// The `-C` floor suppressed a rejection.
    pub floor_binding: bool,
}

impl Diagnostics {
    fn trivial() -> Self {
        Self {
            lp_status: LpStatusTag::TriviallySatisfied,
            vertex_ok: None,
            bounds: None,
            gamma_variance: None,
            degenerate_gamma: false,
            first_stage_reject: None,
            floor_binding: false,
        }
    }
}

/// Outcome of one test.
#[derive(Debug, Clone)]
pub struct TestDecision {
    pub reject: bool,
    /// The profiled max statistic (minus infinity when trivially satisfied).
    pub statistic: f64,
    pub critical_value: f64,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

/// Runs the requested test on a normal model.
pub fn run_test(model: &NormalModel, spec: &TestSpec, draws: &SimDraws) -> Result<TestDecision> {
    spec.validate()?;
    let sol = match solve_primal_dual(model)? {
        PrimalDual::Optimal(sol) => sol,
        PrimalDual::EtaUnbounded => {
            return Ok(TestDecision {
                reject: false,
                statistic: f64::NEG_INFINITY,
                critical_value: f64::INFINITY,
                method: spec.method,
                diagnostics: Diagnostics::trivial(),
            });
        }
    };
    decide_with_solution(model, spec, draws, &sol)
}

/// Same as [`run_test`] but reuses an already-computed LP solution.
pub fn decide_with_solution(
    model: &NormalModel,
    spec: &TestSpec,
    draws: &SimDraws,
    sol: &LpSolution,
) -> Result<TestDecision> {
    let eta = sol.eta;
    let mut diagnostics = Diagnostics {
        lp_status: LpStatusTag::Optimal,
        vertex_ok: Some(sol.vertex_ok),
        bounds: None,
        gamma_variance: None,
        degenerate_gamma: false,
        first_stage_reject: None,
        floor_binding: false,
    };

    let decision = |reject, critical_value, diagnostics| TestDecision {
        reject,
        statistic: eta,
        critical_value,
        method: spec.method,
        diagnostics,
    };

    match spec.method {
        Method::Lfp => {
            let c = lfp_critical_value(&model.sigma, spec.alpha, draws)?;
            Ok(decision(eta > c, c, diagnostics))
        }
        Method::Lf => {
            let c = lf_critical_value(model, spec.alpha, draws)?;
            Ok(decision(eta > c, c, diagnostics))
        }
        Method::Conditional => {
            let gvar = gamma_variance(model, &sol.gamma);
            diagnostics.gamma_variance = Some(gvar);
            if gvar <= GAMMA_VAR_REL_TOL * max_diag(&model.sigma) {
                diagnostics.degenerate_gamma = true;
                return Ok(decision(eta > 0.0, 0.0, diagnostics));
            }
            let bounds = compute_bounds(model, sol)?;
            diagnostics.bounds = Some(bounds);
            let c = conditional_critical_value(&sol.gamma, &bounds, &model.sigma, spec.alpha)?;
            let (reject, floored) = apply_floor(eta, c, gvar, spec.floor_c);
            diagnostics.floor_binding = floored;
            Ok(decision(reject, c, diagnostics))
        }
        Method::Hybrid => {
            let kappa = spec.kappa();
            let c_kappa = lf_critical_value(model, kappa, draws)?;
            if eta > c_kappa {
                diagnostics.first_stage_reject = Some(true);
                let gvar = gamma_variance(model, &sol.gamma);
                diagnostics.gamma_variance = Some(gvar);
                let (reject, floored) = apply_floor(eta, c_kappa, gvar, spec.floor_c);
                diagnostics.floor_binding = floored;
                return Ok(decision(reject, c_kappa, diagnostics));
            }
            diagnostics.first_stage_reject = Some(false);
            let gvar = gamma_variance(model, &sol.gamma);
            diagnostics.gamma_variance = Some(gvar);
            if gvar <= GAMMA_VAR_REL_TOL * max_diag(&model.sigma) {
                diagnostics.degenerate_gamma = true;
                return Ok(decision(eta > 0.0, 0.0, diagnostics));
            }
            let bounds = hybrid_upper_bound(&compute_bounds(model, sol)?, c_kappa);
            diagnostics.bounds = Some(bounds);
            let level = (spec.alpha - kappa) / (1.0 - kappa);
            let c = conditional_critical_value(&sol.gamma, &bounds, &model.sigma, level)?;
            let (reject, floored) = apply_floor(eta, c, gvar, spec.floor_c);
            diagnostics.floor_binding = floored;
            Ok(decision(reject, c, diagnostics))
        }
    }
}

fn max_diag(sigma: &DMatrix<f64>) -> f64 {
    sigma.diagonal().amax()
}

/// Closed-form bounds at a clean vertex, bisection otherwise.
fn compute_bounds(model: &NormalModel, sol: &LpSolution) -> Result<TruncationBounds> {
    if sol.vertex_ok {
        truncation_bounds_closed_form(model, sol)
    } else {
        truncation_bounds_bisection(model, sol, None, DEFAULT_TOL_V, DEFAULT_TOL_LP)
    }
}

/// Rejection with the `-C` floor in standardized units: reject iff the
/// statistic exceeds the critical value and `eta / sd >= -C`.
fn apply_floor(eta: f64, critical: f64, gvar: f64, floor_c: f64) -> (bool, bool) {
    let base = eta > critical;
    let sd = gvar.max(0.0).sqrt();
    let floored = sd > 0.0 && eta < -floor_c * sd;
    (base && !floored, base && floored)
}

/// One tested grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub beta: f64,
    pub decision: TestDecision,
}

/// Accepted points of a grid inversion plus their interval hull. The hull is
/// the headline interval; the raw point list preserves any gaps.
#[derive(Debug, Clone)]
pub struct ConfidenceSet {
    pub accepted: Vec<f64>,
    pub hull: Option<(f64, f64)>,
    pub records: Vec<GridPoint>,
}

impl ConfidenceSet {
    fn from_records(records: Vec<GridPoint>) -> Self {
        let accepted: Vec<f64> = records
            .iter()
            .filter(|r| !r.decision.reject)
            .map(|r| r.beta)
            .collect();
        let hull = if accepted.is_empty() {
            None
        } else {
            let lo = accepted.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = accepted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Some((lo, hi))
        };
        Self {
            accepted,
            hull,
            records,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }
}

/// Tests every grid point, re-estimating the conditional variance at each
/// point, and collects the non-rejected ones.
pub fn invert_grid<F>(
    problem_at: F,
    grid: &[f64],
    spec: &TestSpec,
    draws: &SimDraws,
    matching: &MatchingConfig,
) -> Result<ConfidenceSet>
where
    F: Fn(f64) -> Result<ObservationSet> + Sync,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let records: Result<Vec<GridPoint>> = grid
        .par_iter()
        .map(|&beta| {
            let obs = problem_at(beta)?;
            let sigma = estimate_sigma(&obs, matching)?;
            let model = build_normal_model(&obs, sigma)?;
            let decision = run_test(&model, spec, draws)?;
            Ok(GridPoint { beta, decision })
        })
        .collect();
    Ok(ConfidenceSet::from_records(records?))
}

/// Direction of a confidence bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upper,
    Lower,
}

/// Endpoint of the LF/LFP confidence interval for a linear combination
/// `l' delta`: the extremum of `l' delta` subject to every studentized moment
/// lying below the critical value. Valid for LF and LFP critical values only;
/// conditional and hybrid intervals require grid inversion.
pub fn linear_ci_bound(
    model: &NormalModel,
    l: &DVector<f64>,
    c_alpha: f64,
    direction: Direction,
) -> Result<f64> {
    if !c_alpha.is_finite() {
        return Err(Error::InvalidConfig("critical value must be finite".into()));
    }
    let p = model.p();
    if l.len() != p || p == 0 {
        return Err(Error::Dimension {
            what: "target vector l",
            expected: format!("{p} (>= 1)"),
            got: l.len().to_string(),
        });
    }
    let k = model.k();
    let sds = model.moment_sds();

    // max l'd s.t. -X d <= q with q_j = c sd_j - Y_j, solved through its
    // standard-form dual: max (-q)' lam s.t. (-X') lam = l, lam >= 0.
    // The equality multipliers y recover d = -y and the bound is -optimum.
    let objective_l = match direction {
        Direction::Upper => l.clone(),
        Direction::Lower => -l,
    };
    let q = DVector::from_fn(k, |j, _| c_alpha * sds[j] - model.y_n[j]);
    let a = -model.x_n.transpose();
    let c_std = -q;
    match crate::lp::solve_standard_max(&a, &objective_l, &c_std)? {
        StandardOutcome::Optimal(sol) => {
            let bound = -sol.objective;
            Ok(match direction {
                Direction::Upper => bound,
                Direction::Lower => -bound,
            })
        }
        // Dual infeasible: the primal is unbounded in this direction.
        StandardOutcome::Infeasible => Ok(match direction {
            Direction::Upper => f64::INFINITY,
            Direction::Lower => f64::NEG_INFINITY,
        }),
        // Dual unbounded: the primal is infeasible, i.e. c < eta-hat.
        StandardOutcome::Unbounded => Err(Error::EmptyCi),
    }
}

/// Confidence set for `beta_1` with a nonlinear nuisance `beta_2` projected
/// out: `beta_1` is accepted iff some `beta_2` in its grid is accepted.
pub fn project_nonlinear_nuisance<F>(
    problem_at: F,
    grid1: &[f64],
    grid2: &[f64],
    spec: &TestSpec,
    draws: &SimDraws,
    matching: &MatchingConfig,
) -> Result<ConfidenceSet>
where
    F: Fn(f64, f64) -> Result<ObservationSet> + Sync,
{
    if grid1.is_empty() || grid2.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let records: Result<Vec<GridPoint>> = grid1
        .par_iter()
        .map(|&b1| {
            let mut best: Option<TestDecision> = None;
            for &b2 in grid2 {
                let obs = problem_at(b1, b2)?;
                let sigma = estimate_sigma(&obs, matching)?;
                let model = build_normal_model(&obs, sigma)?;
                let decision = run_test(&model, spec, draws)?;
                let accepted = !decision.reject;
                best = Some(match best {
                    None => decision,
                    Some(prev) if prev.reject => decision,
                    Some(prev) => prev,
                });
                if accepted {
                    break;
                }
            }
            Ok(GridPoint {
                beta: b1,
                decision: best.expect("grid2 nonempty"),
            })
        })
        .collect();
    Ok(ConfidenceSet::from_records(records?))
}
