//! Synthetic product-entry data generator calibrated to a truck-market
//! entry/exit study, the six moment-inequality families built from it, and a
//! Monte Carlo harness producing rejection curves, size, and excess-length
//! tables.
//!
//! Firms decide each period which weight classes to offer. Offering class j
//! costs `theta_c + theta_g g_j` for a product absent last period and
//! `beta (theta_c + theta_g g_j)` for an incumbent product. Expected profits
//! are `pi* = eta_j + eps_jf` with the mean of `eps` chosen so that offer
//! probabilities do not depend on weight; the econometrician observes
//! `pi = pi* + nu_j + nu_jf`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_sigma, MatchingConfig};
use crate::critical_values::{
    hybrid_upper_bound, lf_critical_value_with, lfp_critical_value_with, psd_sqrt,
    truncation_bounds_bisection, truncation_bounds_closed_form, SimDraws, DEFAULT_TOL_LP,
    DEFAULT_TOL_V,
};
use crate::error::{Error, Result};
use crate::inference::{Direction, Method, TestSpec};
use crate::lp::{solve_primal_dual, LpSolution, PrimalDual};
use crate::moments::{build_normal_model, NormalModel, ObservationSet};

/// Calibrated data-generating-process parameters.
///
/// Weights are measured in units of 10,000 lbs; the calibrated cost slope
/// `theta_g` is scaled for that unit, and only that scaling reproduces the
/// calibration target of roughly 48 offered products per period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpParams {
    pub theta_c: f64,
    pub theta_g: f64,
    pub beta_dgp: f64,
    /// Per-firm mean profitability shifters.
    pub mu_f: Vec<f64>,
    /// Gross weight ratings of the product classes, ascending.
    pub gwr: Vec<f64>,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
    pub sigma_nu: f64,
}

impl Default for DgpParams {
    fn default() -> Self {
        let g = 22;
        let (lo, hi) = (12_700.0 / 1e4, 54_277.0 / 1e4);
        let gwr = (0..g)
            .map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64)
            .collect();
        Self {
            theta_c: 129.73,
            theta_g: -21.38,
            beta_dgp: 0.386,
            mu_f: vec![
                74.31,  // Chrysler
                98.36,  // Ford
                114.69, // Daimler
                80.11,  // GM
                67.71,  // Hino
                110.63, // International
                80.15,  // Isuzu
                114.63, // Paccar
                94.17,  // Volvo
            ],
            gwr,
            sigma_eta: 30.0,
            sigma_eps: 30.0,
            sigma_nu: 57.96,
        }
    }
}

impl DgpParams {
    pub fn n_firms(&self) -> usize {
        self.mu_f.len()
    }

    pub fn n_classes(&self) -> usize {
        self.gwr.len()
    }

    /// Population mean weight across classes. Offer probabilities are
    /// weight-independent by construction, so this is also the mean weight of
    /// offered trucks.
    pub fn mean_weight(&self) -> f64 {
        self.gwr.iter().sum::<f64>() / self.gwr.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_eta <= 0.0 || self.sigma_eps <= 0.0 || self.sigma_nu <= 0.0 {
            return Err(Error::InvalidConfig("all sigmas must be positive".into()));
        }
        if self.mu_f.is_empty() || self.gwr.is_empty() {
            return Err(Error::InvalidConfig("mu_f and gwr must be nonempty".into()));
        }
        Ok(())
    }
}

/// One simulated market (period): offer sets for the previous and current
/// period, latent expected profits, and observed profits.
#[derive(Debug, Clone)]
pub struct MarketDraw {
    /// offered_prev[f][j]
    pub offered_prev: Vec<Vec<bool>>,
    pub offered_cur: Vec<Vec<bool>>,
    /// Common product-level profit shock, observed by firms and used as an
    /// instrument.
    pub eta: Vec<f64>,
    /// Latent expected profits pi*.
    pub pi_star: DMatrix<f64>,
    /// Observed profits pi = pi* + nu_j + nu_jf.
    pub pi_obs: DMatrix<f64>,
}

/// Streams a sequential chain starting from the empty offer state, discarding
/// the first `burnout` periods.
pub fn simulate_chain_visit<F: FnMut(&MarketDraw)>(
    params: &DgpParams,
    length: usize,
    burnout: usize,
    seed: u64,
    mut visit: F,
) -> Result<()> {
    simulate_chain_visit_from(params, length, burnout, seed, false, &mut visit)
}

fn simulate_chain_visit_from<F: FnMut(&MarketDraw)>(
    params: &DgpParams,
    length: usize,
    burnout: usize,
    seed: u64,
    start_all_in: bool,
    visit: &mut F,
) -> Result<()> {
    params.validate()?;
    if burnout >= length {
        return Err(Error::InvalidConfig(format!(
            "burnout {burnout} must be smaller than length {length}"
        )));
    }
    let f_n = params.n_firms();
    let g_n = params.n_classes();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut prev = vec![vec![start_all_in; g_n]; f_n];

    // Incumbent products carry the beta-scaled mean and the beta-scaled entry
    // cost, which makes the offer probability independent of weight.
    let mean_inc: Vec<Vec<f64>> = (0..f_n)
        .map(|f| {
            (0..g_n)
                .map(|j| params.beta_dgp * (params.mu_f[f] + params.theta_g * params.gwr[j]))
                .collect()
        })
        .collect();
    let mean_new: Vec<Vec<f64>> = (0..f_n)
        .map(|f| {
            (0..g_n)
                .map(|j| params.mu_f[f] + params.theta_g * params.gwr[j])
                .collect()
        })
        .collect();
    let cost_inc: Vec<f64> = (0..g_n)
        .map(|j| params.beta_dgp * (params.theta_c + params.theta_g * params.gwr[j]))
        .collect();
    let cost_new: Vec<f64> = (0..g_n)
        .map(|j| params.theta_c + params.theta_g * params.gwr[j])
        .collect();

    for t in 0..length {
        let eta: Vec<f64> = (0..g_n)
            .map(|_| params.sigma_eta * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut pi_star = DMatrix::zeros(f_n, g_n);
        let mut cur = vec![vec![false; g_n]; f_n];
        for f in 0..f_n {
            for j in 0..g_n {
                let incumbent = prev[f][j];
                let mean = if incumbent { mean_inc[f][j] } else { mean_new[f][j] };
                let eps = mean + params.sigma_eps * rng.sample::<f64, _>(StandardNormal);
                let ps = eta[j] + eps;
                pi_star[(f, j)] = ps;
                let threshold = if incumbent { cost_inc[j] } else { cost_new[j] };
                cur[f][j] = ps > threshold;
            }
        }
        let nu_j: Vec<f64> = (0..g_n)
            .map(|_| params.sigma_nu * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut pi_obs = pi_star.clone();
        for f in 0..f_n {
            for j in 0..g_n {
                pi_obs[(f, j)] += nu_j[j] + params.sigma_nu * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if t >= burnout {
            let draw = MarketDraw {
                offered_prev: prev.clone(),
                offered_cur: cur.clone(),
                eta,
                pi_star,
                pi_obs,
            };
            visit(&draw);
        }
        prev = cur;
    }
    Ok(())
}

/// Simulates a chain and collects the post-burnout draws.
pub fn simulate_chain(
    params: &DgpParams,
    length: usize,
    burnout: usize,
    seed: u64,
) -> Result<Vec<MarketDraw>> {
    let mut out = Vec::with_capacity(length - burnout);
    simulate_chain_visit(params, length, burnout, seed, |d| out.push(d.clone()))?;
    Ok(out)
}

/// Per-product offer frequencies, used for the stationarity check.
pub fn offer_frequencies(
    params: &DgpParams,
    length: usize,
    burnout: usize,
    seed: u64,
    start_all_in: bool,
) -> Result<DMatrix<f64>> {
    let f_n = params.n_firms();
    let g_n = params.n_classes();
    let mut freq = DMatrix::zeros(f_n, g_n);
    let mut count = 0usize;
    simulate_chain_visit_from(params, length, burnout, seed, start_all_in, &mut |d| {
        for f in 0..f_n {
            for j in 0..g_n {
                if d.offered_cur[f][j] {
                    freq[(f, j)] += 1.0;
                }
            }
        }
        count += 1;
    })?;
    Ok(freq / count as f64)
}

/// How firms are pooled into fixed-cost groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    OneGroup,
    ThreeGroups,
    PerFirm,
}

/// Instrument set for the first four moment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruments {
    ConstantOnly,
    /// Constant plus the positive and negative parts of the common shock.
    EtaSplit,
}

/// Parameter the experiment targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Fixed cost of the mean-weight truck: `l = (1/G, ..., 1/G, mu_g)`.
    MeanWeightCost,
    /// The weight-cost slope `delta_g`.
    DeltaG,
    /// The incumbency discount `beta` (nonlinear; the whole of `delta` is a
    /// nuisance).
    Beta,
}

/// Moment layout selection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpecConfig {
    pub grouping: Grouping,
    pub instruments: Instruments,
    pub target: Target,
}

impl SpecConfig {
    pub fn n_groups(&self, params: &DgpParams) -> usize {
        match self.grouping {
            Grouping::OneGroup => 1,
            Grouping::ThreeGroups => 3,
            Grouping::PerFirm => params.n_firms(),
        }
    }

    /// Group index of a firm: consecutive blocks in calibration-table order.
    fn group_of(&self, firm: usize, params: &DgpParams) -> usize {
        match self.grouping {
            Grouping::OneGroup => 0,
            Grouping::ThreeGroups => firm * 3 / params.n_firms(),
            Grouping::PerFirm => firm,
        }
    }

    fn n_instruments(&self) -> usize {
        match self.instruments {
            Instruments::ConstantOnly => 1,
            Instruments::EtaSplit => 3,
        }
    }

    /// Number of moment rows: four families per group and instrument, plus
    /// the two weight-swap families interacted with a constant only.
    pub fn n_moments(&self, params: &DgpParams) -> usize {
        4 * self.n_groups(params) * self.n_instruments() + 2
    }

    /// Nuisance dimension: one fixed-cost level per group plus the slope.
    pub fn n_params(&self, params: &DgpParams) -> usize {
        self.n_groups(params) + 1
    }

    /// Target vector in `delta = (delta_{c,1}, ..., delta_{c,G}, delta_g)`.
    pub fn target_vector(&self, params: &DgpParams) -> Option<DVector<f64>> {
        let n_g = self.n_groups(params);
        match self.target {
            Target::MeanWeightCost => {
                let mut l = DVector::zeros(n_g + 1);
                for i in 0..n_g {
                    l[i] = 1.0 / n_g as f64;
                }
                l[n_g] = params.mean_weight();
                Some(l)
            }
            Target::DeltaG => {
                let mut l = DVector::zeros(n_g + 1);
                l[n_g] = 1.0;
                Some(l)
            }
            Target::Beta => None,
        }
    }

    /// True value of the target under the calibrated parameters.
    pub fn true_target(&self, params: &DgpParams) -> f64 {
        match self.target {
            Target::MeanWeightCost => params.theta_c + params.theta_g * params.mean_weight(),
            Target::DeltaG => params.theta_g,
            Target::Beta => params.beta_dgp,
        }
    }
}

/// Family tag for a moment row, fixing how the sufficient statistics enter
/// the moment and its Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    /// Incumbent kept: `-(pi - beta (dc + dg g)) w`.
    Stay,
    /// New entrant: `-(pi - dc - dg g) w`.
    Enter,
    /// Incumbent dropped: `(pi - beta (dc + dg g)) w`.
    Drop,
    /// Never offered: `(pi - dc - dg g) w`.
    Out,
    /// Entrant vs lighter never-marketed alternatives:
    /// `-(dpi - dg dg_weights)` averaged.
    SwapLighter,
    /// Entrant vs heavier never-marketed alternatives, same form.
    SwapHeavier,
}

#[derive(Debug, Clone, Copy)]
struct RowKind {
    family: Family,
    group: usize,
}

/// Per-market sufficient statistics: one `(pi_part, count_part, weight_part)`
/// triple per moment row, enough to assemble `(Y_i, X_i)` at any candidate
/// `beta`. All normalizations are folded in at construction.
#[derive(Debug, Clone)]
pub struct MarketStats {
    rows: Vec<[f64; 3]>,
}

/// Moment layout: row kinds plus assembly into observation matrices.
#[derive(Debug, Clone)]
pub struct MomentLayout {
    kinds: Vec<RowKind>,
    n_groups: usize,
    n_instruments: usize,
}

impl MomentLayout {
    pub fn new(spec: &SpecConfig, params: &DgpParams) -> Self {
        let n_groups = spec.n_groups(params);
        let n_instruments = spec.n_instruments();
        let mut kinds = Vec::new();
        for group in 0..n_groups {
            for family in [Family::Stay, Family::Enter, Family::Drop, Family::Out] {
                for _inst in 0..n_instruments {
                    kinds.push(RowKind { family, group });
                }
            }
        }
        kinds.push(RowKind {
            family: Family::SwapLighter,
            group: 0,
        });
        kinds.push(RowKind {
            family: Family::SwapHeavier,
            group: 0,
        });
        Self {
            kinds,
            n_groups,
            n_instruments,
        }
    }

    pub fn k(&self) -> usize {
        self.kinds.len()
    }

    pub fn p(&self) -> usize {
        self.n_groups + 1
    }

    /// Sufficient statistics for one market.
    pub fn market_stats(&self, draw: &MarketDraw, spec: &SpecConfig, params: &DgpParams) -> MarketStats {
        let f_n = params.n_firms();
        let g_n = params.n_classes();
        let norm_group = |group: usize| {
            let members = (0..f_n).filter(|&f| spec.group_of(f, params) == group).count();
            1.0 / (members as f64 * g_n as f64)
        };
        let norm_all = 1.0 / (f_n as f64 * g_n as f64);
        let mut rows = vec![[0.0; 3]; self.kinds.len()];

        let inst_weight = |inst: usize, j: usize| -> f64 {
            match inst {
                0 => 1.0,
                1 => draw.eta[j].max(0.0),
                _ => -draw.eta[j].min(0.0),
            }
        };

        for f in 0..f_n {
            let group = spec.group_of(f, params);
            let base = group * 4 * self.n_instruments;
            for j in 0..g_n {
                let prev = draw.offered_prev[f][j];
                let cur = draw.offered_cur[f][j];
                let fam_offset = match (cur, prev) {
                    (true, true) => 0,   // Stay
                    (true, false) => 1,  // Enter
                    (false, true) => 2,  // Drop
                    (false, false) => 3, // Out
                };
                let pi = draw.pi_obs[(f, j)];
                let g_j = params.gwr[j];
                let nrm = norm_group(group);
                for inst in 0..self.n_instruments {
                    let w = inst_weight(inst, j) * nrm;
                    let row = base + fam_offset * self.n_instruments + inst;
                    rows[row][0] += pi * w;
                    rows[row][1] += w;
                    rows[row][2] += g_j * w;
                }
            }

            // Weight-swap families: entrants against never-marketed lighter
            // and heavier classes, averaged within each comparison set.
            // Classes are weight-ordered, so prefix sums over the
            // never-marketed indicator give the averages in one pass.
            let never: Vec<bool> = (0..g_n)
                .map(|j| !draw.offered_cur[f][j] && !draw.offered_prev[f][j])
                .collect();
            let mut pref_pi = vec![0.0; g_n + 1];
            let mut pref_g = vec![0.0; g_n + 1];
            let mut pref_c = vec![0usize; g_n + 1];
            for j in 0..g_n {
                let add = if never[j] { 1 } else { 0 };
                pref_pi[j + 1] = pref_pi[j] + if never[j] { draw.pi_obs[(f, j)] } else { 0.0 };
                pref_g[j + 1] = pref_g[j] + if never[j] { params.gwr[j] } else { 0.0 };
                pref_c[j + 1] = pref_c[j] + add;
            }
            let total_pi = pref_pi[g_n];
            let total_g = pref_g[g_n];
            let total_c = pref_c[g_n];
            let lighter_row = self.kinds.len() - 2;
            let heavier_row = self.kinds.len() - 1;
            for j in 0..g_n {
                if !(draw.offered_cur[f][j] && !draw.offered_prev[f][j]) {
                    continue; // entrants only
                }
                let pi = draw.pi_obs[(f, j)];
                let g_j = params.gwr[j];
                let c_lo = pref_c[j];
                if c_lo > 0 {
                    let avg_pi = pref_pi[j] / c_lo as f64;
                    let avg_g = pref_g[j] / c_lo as f64;
                    rows[lighter_row][0] += (pi - avg_pi) * norm_all;
                    rows[lighter_row][2] += (g_j - avg_g) * norm_all;
                }
                let c_hi = total_c - pref_c[j + 1];
                if c_hi > 0 {
                    let avg_pi = (total_pi - pref_pi[j + 1]) / c_hi as f64;
                    let avg_g = (total_g - pref_g[j + 1]) / c_hi as f64;
                    rows[heavier_row][0] += (pi - avg_pi) * norm_all;
                    rows[heavier_row][2] += (g_j - avg_g) * norm_all;
                }
            }
        }
        MarketStats { rows }
    }

    /// Assembles the moment vector and Jacobian coefficient matrix of one
    /// market at candidate `beta0`. The moment is `Y_i - X_i delta` with
    /// `delta = (delta_{c,1}, ..., delta_{c,G}, delta_g)`.
    pub fn assemble(&self, stats: &MarketStats, beta0: f64) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k();
        let p = self.p();
        let g_col = p - 1;
        let mut y = DVector::zeros(k);
        let mut x = DMatrix::zeros(k, p);
        for (r, kind) in self.kinds.iter().enumerate() {
            let [pi, cnt, wgt] = stats.rows[r];
            match kind.family {
                Family::Stay => {
                    y[r] = -pi;
                    x[(r, kind.group)] = -beta0 * cnt;
                    x[(r, g_col)] = -beta0 * wgt;
                }
                Family::Enter => {
                    y[r] = -pi;
                    x[(r, kind.group)] = -cnt;
                    x[(r, g_col)] = -wgt;
                }
                Family::Drop => {
                    y[r] = pi;
                    x[(r, kind.group)] = beta0 * cnt;
                    x[(r, g_col)] = beta0 * wgt;
                }
                Family::Out => {
                    y[r] = pi;
                    x[(r, kind.group)] = cnt;
                    x[(r, g_col)] = wgt;
                }
                Family::SwapLighter | Family::SwapHeavier => {
                    y[r] = -pi;
                    x[(r, g_col)] = -wgt;
                }
            }
        }
        (y, x)
    }
}

/// Builds the observation set for a list of markets at candidate `beta0`.
/// When `eval_delta` is given, the moments are evaluated at that nuisance
/// value (`y` becomes `Y_i - X_i delta`), which is how the sign diagnostics
/// are computed; the coefficient matrices are unchanged.
pub fn build_moments(
    draws: &[MarketDraw],
    spec: &SpecConfig,
    params: &DgpParams,
    beta0: f64,
    eval_delta: Option<&DVector<f64>>,
) -> Result<ObservationSet> {
    if draws.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let layout = MomentLayout::new(spec, params);
    let stats: Vec<MarketStats> = draws
        .par_iter()
        .map(|d| layout.market_stats(d, spec, params))
        .collect();
    observation_set_from_stats(&layout, &stats, beta0, eval_delta)
}

fn observation_set_from_stats(
    layout: &MomentLayout,
    stats: &[MarketStats],
    beta0: f64,
    eval_delta: Option<&DVector<f64>>,
) -> Result<ObservationSet> {
    let n = stats.len();
    let k = layout.k();
    let p = layout.p();
    let mut y = DMatrix::zeros(n, k);
    let mut xs = Vec::with_capacity(n);
    let mut z = DMatrix::zeros(n, k * p);
    for (i, st) in stats.iter().enumerate() {
        let (yi, xi) = layout.assemble(st, beta0);
        let yi = match eval_delta {
            Some(d) => &yi - &xi * d,
            None => yi,
        };
        for j in 0..k {
            y[(i, j)] = yi[j];
            for c in 0..p {
                z[(i, j * p + c)] = xi[(j, c)];
            }
        }
        xs.push(xi);
    }
    ObservationSet::new(y, xs, z)
}

/// Configuration for a Monte Carlo experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub spec: SpecConfig,
    #[serde(default)]
    pub params: Option<DgpParams>,
    pub alpha: f64,
    pub kappa: Option<f64>,
    pub n_markets: usize,
    pub reps: usize,
    pub seed: u64,
    pub sims_lfp: usize,
    pub sims_lf: usize,
    /// Grid as (lo, hi, points); defaults to the estimated identified set
    /// padded on both sides.
    pub grid: Option<(f64, f64, usize)>,
    pub chain_length: usize,
    pub burnout: usize,
    /// Markets used for the identified-set approximation.
    pub id_set_n: usize,
    /// Use base-10 logs in the identified-set slack `log(n)/sqrt(n)`.
    pub log_base_ten: bool,
    pub floor_c: f64,
}

impl MonteCarloConfig {
    pub fn new(spec: SpecConfig) -> Self {
        Self {
            spec,
            params: None,
            alpha: 0.05,
            kappa: None,
            n_markets: 500,
            reps: 100,
            seed: 20_240_501,
            sims_lfp: 10_000,
            sims_lf: 1_000,
            grid: None,
            chain_length: 51_000,
            burnout: 1_000,
            id_set_n: 1_000_000,
            log_base_ten: true,
            floor_c: 100.0,
        }
    }

    fn params(&self) -> DgpParams {
        self.params.clone().unwrap_or_default()
    }

    fn correction(&self) -> f64 {
        let n = self.id_set_n as f64;
        let log_n = if self.log_base_ten { n.log10() } else { n.ln() };
        log_n / n.sqrt()
    }
}

/// Rejection frequency at one grid point for one method.
#[derive(Debug, Clone, Serialize)]
pub struct RejectionRow {
    pub beta: f64,
    pub method: &'static str,
    pub reject_rate: f64,
}

/// Confidence interval of one rep for one method.
#[derive(Debug, Clone, Serialize)]
pub struct ExcessRow {
    pub rep: usize,
    pub method: &'static str,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub excess_length: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeRow {
    pub method: &'static str,
    pub max_size: f64,
}

/// Outputs of a Monte Carlo experiment.
#[derive(Debug, Clone)]
pub struct ResultTables {
    pub rejection_curves: Vec<RejectionRow>,
    pub excess_length: Vec<ExcessRow>,
    pub size: Vec<SizeRow>,
    pub identified_set: (f64, f64),
    pub true_target: f64,
    pub coverage: Vec<(Method, f64)>,
    pub median_excess: Vec<(Method, f64)>,
}

impl ResultTables {
    pub fn median_excess_for(&self, method: Method) -> Option<f64> {
        self.median_excess
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, v)| *v)
    }

    pub fn max_size_for(&self, method: Method) -> Option<f64> {
        self.size
            .iter()
            .find(|r| r.method == method.name())
            .map(|r| r.max_size)
    }
}

/// SplitMix64 stream for deriving independent sub-seeds from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean sufficient statistics over a fresh long chain, streamed so that the
/// identified-set sample never needs to be stored.
fn mean_stats(
    layout: &MomentLayout,
    spec: &SpecConfig,
    params: &DgpParams,
    n_markets: usize,
    seed: u64,
) -> Result<MarketStats> {
    let mut acc = vec![[0.0f64; 3]; layout.k()];
    let mut count = 0usize;
    simulate_chain_visit(params, n_markets + 1_000, 1_000, seed, |d| {
        let st = layout.market_stats(d, spec, params);
        for (a, r) in acc.iter_mut().zip(st.rows.iter()) {
            a[0] += r[0];
            a[1] += r[1];
            a[2] += r[2];
        }
        count += 1;
    })?;
    for a in acc.iter_mut() {
        a[0] /= count as f64;
        a[1] /= count as f64;
        a[2] /= count as f64;
    }
    Ok(MarketStats { rows: acc })
}

/// Whether a parameter point satisfies the relaxed sample moment
/// inequalities: feasibility of `Ybar - Xbar d <= slack` (optionally with a
/// linear restriction folded in beforehand) is checked by profiling out `d`
/// with unit scaling and testing the optimum against zero.
fn point_feasible(y_shifted: &DVector<f64>, x: &DMatrix<f64>) -> Result<bool> {
    let k = y_shifted.len();
    let model = NormalModel::new(y_shifted.clone(), x.clone(), DMatrix::identity(k, k))?;
    Ok(match solve_primal_dual(&model)? {
        PrimalDual::Optimal(s) => s.eta <= 1e-9,
        PrimalDual::EtaUnbounded => true,
    })
}

/// Approximates the identified set for the configured target as the hull of
/// grid points satisfying the sample unconditional moment inequalities with a
/// `log(n)/sqrt(n)` slack, from one large simulated sample.
pub fn estimate_identified_set(
    cfg: &MonteCarloConfig,
    grid: &[f64],
    seed: u64,
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let params = cfg.params();
    let layout = MomentLayout::new(&cfg.spec, &params);
    let stats = mean_stats(&layout, &cfg.spec, &params, cfg.id_set_n, seed)?;
    let corr = cfg.correction();

    let feasible: Vec<bool> = match cfg.spec.target {
        Target::Beta => grid
            .par_iter()
            .map(|&b| {
                let (ybar, xbar) = layout.assemble(&stats, b);
                let shifted = ybar.map(|v| v - corr);
                point_feasible(&shifted, &xbar)
            })
            .collect::<Result<Vec<bool>>>()?,
        _ => {
            let l = cfg
                .spec
                .target_vector(&params)
                .expect("linear target has a vector");
            let (ybar, xbar) = layout.assemble(&stats, params.beta_dgp);
            let (first, rest) = crate::moments::target_basis(&l)?;
            let shift = &xbar * &first;
            let x_t = &xbar * &rest;
            grid.par_iter()
                .map(|&t| {
                    let y_t = (&ybar - &shift * t).map(|v| v - corr);
                    point_feasible(&y_t, &x_t)
                })
                .collect::<Result<Vec<bool>>>()?
        }
    };

    let accepted: Vec<f64> = grid
        .iter()
        .zip(feasible.iter())
        .filter(|(_, &f)| f)
        .map(|(&g, _)| g)
        .collect();
    if accepted.is_empty() {
        return Err(Error::InvalidConfig(
            "identified-set estimate is empty; grid too coarse or miscalibrated".into(),
        ));
    }
    Ok((
        accepted.iter().cloned().fold(f64::INFINITY, f64::min),
        accepted.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ))
}

fn default_grid(id_set: (f64, f64), points: usize, pad: f64) -> Vec<f64> {
    let (lo, hi) = id_set;
    let lo = lo - pad;
    let hi = hi + pad;
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

struct RepOutcome {
    /// reject[g][m] for grid point g and method m.
    reject: Vec<[bool; 4]>,
    ci: [(f64, f64); 4],
}

/// Runs the full Monte Carlo experiment for a linear target: per-rep
/// confidence intervals for all four methods, rejection frequencies across
/// the grid, size over the estimated identified set, and excess lengths.
pub fn run_monte_carlo(cfg: &MonteCarloConfig) -> Result<ResultTables> {
    let params = cfg.params();
    let spec = cfg.spec;
    if matches!(spec.target, Target::Beta) {
        return run_monte_carlo_beta(cfg);
    }
    let layout = MomentLayout::new(&spec, &params);
    let k = layout.k();

    // Identified set on a provisional wide grid, then the test grid.
    let truth = spec.true_target(&params);
    let provisional: Vec<f64> = {
        let span = truth.abs().max(10.0) * 6.0;
        let n = 2401;
        (0..n)
            .map(|i| truth - span + 2.0 * span * i as f64 / (n - 1) as f64)
            .collect()
    };
    let id_set = estimate_identified_set(cfg, &provisional, derive_seed(cfg.seed, 1))?;
    let grid: Vec<f64> = match cfg.grid {
        Some((lo, hi, n)) => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64)
            .collect(),
        None => default_grid(id_set, 1001, 15.0),
    };
    let id_len = id_set.1 - id_set.0;

    // Market pool for subsampling.
    let pool: Vec<MarketStats> = {
        let mut v = Vec::with_capacity(cfg.chain_length - cfg.burnout);
        simulate_chain_visit(
            &params,
            cfg.chain_length,
            cfg.burnout,
            derive_seed(cfg.seed, 2),
            |d| v.push(layout.market_stats(d, &spec, &params)),
        )?;
        v
    };

    let l = spec.target_vector(&params).expect("linear target");
    let (first, rest) = crate::moments::target_basis(&l)?;
    let draws_lfp = SimDraws::generate(k, cfg.sims_lfp, derive_seed(cfg.seed, 3));
    let draws_lf = SimDraws::generate(k, cfg.sims_lf, derive_seed(cfg.seed, 4));
    let kappa = cfg.kappa.unwrap_or(cfg.alpha / 10.0);
    let cond_level = (cfg.alpha - kappa) / (1.0 - kappa);

    let rep_outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            run_linear_rep(
                rep, cfg, &params, &layout, &pool, &grid, &l, &first, &rest, &draws_lfp,
                &draws_lf, kappa, cond_level, id_len,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    assemble_tables(cfg, &grid, id_set, truth, rep_outcomes)
}

#[allow(clippy::too_many_arguments)]
fn run_linear_rep(
    rep: usize,
    cfg: &MonteCarloConfig,
    params: &DgpParams,
    layout: &MomentLayout,
    pool: &[MarketStats],
    grid: &[f64],
    l: &DVector<f64>,
    first: &DVector<f64>,
    rest: &DMatrix<f64>,
    draws_lfp: &SimDraws,
    draws_lf: &SimDraws,
    kappa: f64,
    cond_level: f64,
    id_len: f64,
) -> Result<RepOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + rep as u64));
    let idx = sample_without_replacement(&mut rng, pool.len(), cfg.n_markets);
    let stats: Vec<MarketStats> = idx.iter().map(|&i| pool[i].clone()).collect();
    let obs = observation_set_from_stats(layout, &stats, params.beta_dgp, None)?;
    let sigma = estimate_sigma(&obs, &MatchingConfig::default())?;
    let model = build_normal_model(&obs, sigma.clone())?;
    let sigma_half = psd_sqrt(&sigma)?;

    // LF/LFP critical values on the untransformed problem, then interval
    // endpoints by direct linear programming.
    let c_lfp = lfp_critical_value_with(&sigma, &sigma_half, cfg.alpha, draws_lfp)?;
    let dual_full = crate::lp::DualProgram::new(&model);
    let c_lf = lf_critical_value_with(&dual_full, &sigma_half, cfg.alpha, draws_lf)?;

    let ci_of = |c: f64| -> Result<(f64, f64)> {
        let lo = crate::inference::linear_ci_bound(&model, l, c, Direction::Lower)?;
        let hi = crate::inference::linear_ci_bound(&model, l, c, Direction::Upper)?;
        Ok((lo, hi))
    };
    let ci_lfp = ci_of(c_lfp)?;
    let ci_lf = ci_of(c_lf)?;

    // Transformed problem: Y~_n(t) = y_n - shift * t with fixed X~ and the
    // same conditional variance.
    let y_n = model.y_n.clone();
    let shift = &model.x_n * first;
    let x_t = &model.x_n * rest;
    let model_t0 = NormalModel::new(y_n.clone(), x_t.clone(), sigma.clone())?;
    let dual_t = crate::lp::DualProgram::new(&model_t0);
    let c_kappa_lf = lf_critical_value_with(&dual_t, &sigma_half, kappa, draws_lf)?;

    let mut reject = Vec::with_capacity(grid.len());
    let mut cond_acc: Vec<f64> = Vec::new();
    let mut hyb_acc: Vec<f64> = Vec::new();
    for &t in grid {
        let y_t = &y_n - &shift * t;
        let model_g = NormalModel::new(y_t, x_t.clone(), sigma.clone())?;
        let (cond_rej, hyb_rej) =
            conditional_and_hybrid(&model_g, cfg.alpha, cond_level, c_kappa_lf, cfg.floor_c)?;
        if !cond_rej {
            cond_acc.push(t);
        }
        if !hyb_rej {
            hyb_acc.push(t);
        }
        let lfp_rej = t < ci_lfp.0 || t > ci_lfp.1;
        let lf_rej = t < ci_lf.0 || t > ci_lf.1;
        reject.push([lfp_rej, lf_rej, cond_rej, hyb_rej]);
    }
    let hull = |acc: &[f64]| -> (f64, f64) {
        if acc.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (acc[0], acc[acc.len() - 1])
        }
    };
    let _ = id_len;
    Ok(RepOutcome {
        reject,
        ci: [ci_lfp, ci_lf, hull(&cond_acc), hull(&hyb_acc)],
    })
}

/// Conditional and hybrid decisions sharing one LP solve.
fn conditional_and_hybrid(
    model: &NormalModel,
    alpha: f64,
    cond_level: f64,
    c_kappa_lf: f64,
    floor_c: f64,
) -> Result<(bool, bool)> {
    let sol = match solve_primal_dual(model)? {
        PrimalDual::Optimal(s) => s,
        PrimalDual::EtaUnbounded => return Ok((false, false)),
    };
    let eta = sol.eta;
    let gvar = crate::critical_values::gamma_variance(model, &sol.gamma);
    if gvar <= 1e-10 * model.sigma.diagonal().amax() {
        let r = eta > 0.0;
        return Ok((r, r));
    }
    let sd = gvar.sqrt();
    let floor_ok = eta >= -floor_c * sd;
    let bounds = bounds_for(model, &sol)?;
    let c_cond =
        crate::critical_values::conditional_critical_value(&sol.gamma, &bounds, &model.sigma, alpha)?;
    let cond_rej = eta > c_cond && floor_ok;

    let hyb_rej = if eta > c_kappa_lf {
        floor_ok
    } else {
        let hb = hybrid_upper_bound(&bounds, c_kappa_lf);
        let c_h = crate::critical_values::conditional_critical_value(
            &sol.gamma,
            &hb,
            &model.sigma,
            cond_level,
        )?;
        eta > c_h && floor_ok
    };
    Ok((cond_rej, hyb_rej))
}

fn bounds_for(
    model: &NormalModel,
    sol: &LpSolution,
) -> Result<crate::critical_values::TruncationBounds> {
    if sol.vertex_ok {
        truncation_bounds_closed_form(model, sol)
    } else {
        truncation_bounds_bisection(model, sol, None, DEFAULT_TOL_V, DEFAULT_TOL_LP)
    }
}

fn sample_without_replacement(rng: &mut ChaCha12Rng, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n);
    // Floyd's algorithm keeps memory at O(m).
    let mut chosen = std::collections::BTreeSet::new();
    for j in (n - m)..n {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen.into_iter().collect()
}

fn assemble_tables(
    cfg: &MonteCarloConfig,
    grid: &[f64],
    id_set: (f64, f64),
    truth: f64,
    reps: Vec<RepOutcome>,
) -> Result<ResultTables> {
    let methods = Method::ALL;
    let n_reps = reps.len();
    let mut rejection_curves = Vec::with_capacity(grid.len() * 4);
    let mut size = vec![0.0f64; 4];
    for (g, &beta) in grid.iter().enumerate() {
        for (m, method) in methods.iter().enumerate() {
            let rate = reps.iter().filter(|r| r.reject[g][m]).count() as f64 / n_reps as f64;
            rejection_curves.push(RejectionRow {
                beta,
                method: method.name(),
                reject_rate: rate,
            });
            if beta >= id_set.0 && beta <= id_set.1 {
                size[m] = size[m].max(rate);
            }
        }
    }
    let id_len = id_set.1 - id_set.0;
    let mut excess_length = Vec::with_capacity(n_reps * 4);
    let mut excess_by_method: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut coverage = vec![0usize; 4];
    for (rep, r) in reps.iter().enumerate() {
        for (m, method) in methods.iter().enumerate() {
            let (lo, hi) = r.ci[m];
            let excess = if lo.is_nan() { -id_len } else { (hi - lo) - id_len };
            excess_by_method[m].push(excess);
            if !lo.is_nan() && lo <= truth && truth <= hi {
                coverage[m] += 1;
            }
            excess_length.push(ExcessRow {
                rep,
                method: method.name(),
                ci_lo: lo,
                ci_hi: hi,
                excess_length: excess,
            });
        }
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let median_excess: Vec<(Method, f64)> = methods
        .iter()
        .enumerate()
        .map(|(m, &method)| (method, median(&mut excess_by_method[m])))
        .collect();
    Ok(ResultTables {
        rejection_curves,
        size: methods
            .iter()
            .enumerate()
            .map(|(m, method)| SizeRow {
                method: method.name(),
                max_size: size[m],
            })
            .collect(),
        excess_length,
        identified_set: id_set,
        true_target: truth,
        coverage: methods
            .iter()
            .enumerate()
            .map(|(m, &method)| (method, coverage[m] as f64 / n_reps as f64))
            .collect(),
        median_excess,
    })
}

/// Monte Carlo over the nonlinear incumbency-discount target: full grid
/// inversion with the whole nuisance vector profiled out and the variance
/// re-estimated at each grid point.
fn run_monte_carlo_beta(cfg: &MonteCarloConfig) -> Result<ResultTables> {
    let params = cfg.params();
    let spec = cfg.spec;
    let layout = MomentLayout::new(&spec, &params);
    let k = layout.k();
    let truth = params.beta_dgp;

    let provisional: Vec<f64> = (0..241).map(|i| 0.05 + 0.95 * i as f64 / 240.0).collect();
    let id_set = estimate_identified_set(cfg, &provisional, derive_seed(cfg.seed, 1))?;
    let grid: Vec<f64> = match cfg.grid {
        Some((lo, hi, n)) => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64)
            .collect(),
        None => default_grid(id_set, 100, 0.15),
    };

    let pool: Vec<MarketStats> = {
        let mut v = Vec::with_capacity(cfg.chain_length - cfg.burnout);
        simulate_chain_visit(
            &params,
            cfg.chain_length,
            cfg.burnout,
            derive_seed(cfg.seed, 2),
            |d| v.push(layout.market_stats(d, &spec, &params)),
        )?;
        v
    };
    let draws_lfp = SimDraws::generate(k, cfg.sims_lfp, derive_seed(cfg.seed, 3));
    let draws_lf = SimDraws::generate(k, cfg.sims_lf, derive_seed(cfg.seed, 4));
    let kappa = cfg.kappa.unwrap_or(cfg.alpha / 10.0);
    let cond_level = (cfg.alpha - kappa) / (1.0 - kappa);

    let rep_outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + rep as u64));
            let idx = sample_without_replacement(&mut rng, pool.len(), cfg.n_markets);
            let stats: Vec<MarketStats> = idx.iter().map(|&i| pool[i].clone()).collect();

            let mut reject = Vec::with_capacity(grid.len());
            let mut acc: [Vec<f64>; 4] = Default::default();
            for &b in &grid {
                let obs = observation_set_from_stats(&layout, &stats, b, None)?;
                let sigma = estimate_sigma(&obs, &MatchingConfig::default())?;
                let model = build_normal_model(&obs, sigma.clone())?;
                let sigma_half = psd_sqrt(&sigma)?;
                let dual = crate::lp::DualProgram::new(&model);
                let c_lfp = lfp_critical_value_with(&sigma, &sigma_half, cfg.alpha, &draws_lfp)?;
                let c_lf = lf_critical_value_with(&dual, &sigma_half, cfg.alpha, &draws_lf)?;
                let c_kappa = lf_critical_value_with(&dual, &sigma_half, kappa, &draws_lf)?;
                let eta = match solve_primal_dual(&model)? {
                    PrimalDual::Optimal(s) => s.eta,
                    PrimalDual::EtaUnbounded => f64::NEG_INFINITY,
                };
                let (cond_rej, hyb_rej) =
                    conditional_and_hybrid(&model, cfg.alpha, cond_level, c_kappa, cfg.floor_c)?;
                let row = [eta > c_lfp, eta > c_lf, cond_rej, hyb_rej];
                for (m, &rej) in row.iter().enumerate() {
                    if !rej {
                        acc[m].push(b);
                    }
                }
                reject.push(row);
            }
            let hull = |a: &Vec<f64>| {
                if a.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    (a[0], a[a.len() - 1])
                }
            };
            Ok(RepOutcome {
                reject,
                ci: [hull(&acc[0]), hull(&acc[1]), hull(&acc[2]), hull(&acc[3])],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    assemble_tables(cfg, &grid, id_set, truth, rep_outcomes)
}

/// Writes the three result tables as CSV files under `dir`.
pub fn write_tables(tables: &ResultTables, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("rejection_curves.csv"))?;
    w.write_record(["beta", "method", "reject_rate"])?;
    for r in &tables.rejection_curves {
        w.write_record([
            format!("{}", r.beta),
            r.method.to_string(),
            format!("{}", r.reject_rate),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("excess_length.csv"))?;
    w.write_record(["rep", "method", "ci_lo", "ci_hi", "excess_length"])?;
    for r in &tables.excess_length {
        w.write_record([
            r.rep.to_string(),
            r.method.to_string(),
            format!("{}", r.ci_lo),
            format!("{}", r.ci_hi),
            format!("{}", r.excess_length),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("size.csv"))?;
    w.write_record(["method", "max_size"])?;
    for r in &tables.size {
        w.write_record([r.method.to_string(), format!("{}", r.max_size)])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one test on a freshly built moment problem; convenience used by the
/// CLI and tests.
pub fn test_spec_once(
    draws_list: &[MarketDraw],
    spec: &SpecConfig,
    params: &DgpParams,
    beta0: f64,
    test: &TestSpec,
) -> Result<crate::inference::TestDecision> {
    let obs = build_moments(draws_list, spec, params, beta0, None)?;
    let sigma = estimate_sigma(&obs, &MatchingConfig::default())?;
    let model = build_normal_model(&obs, sigma)?;
    let sim = test.draws(model.k());
    crate::inference::run_test(&model, test, &sim)
}
