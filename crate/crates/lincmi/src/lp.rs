//! Dense simplex solver for the profiled max-statistic program and its dual.
//!
//! The primal program is
//!
//! ```text
//!   min_{eta, d} eta   s.t.  (Y_{n,j} - X_{n,j} d) / sqrt(Sigma_jj) <= eta  for all j,
//! ```
//!
//! and the dual, solved here in standard form, is
//!
//! ```text
//!   max_g g'Y_n   s.t.  g >= 0,  W_n'g = e_1,
//! ```
//!
//! with `W_n` the k x (p+1) matrix whose row j is `(sqrt(Sigma_jj), X_{n,j})`.
//! Solving the dual with a primal simplex yields a vertex `g` of the dual
//! solution set together with the primal optimum `(eta, d)` as the equality
//! multipliers, which is exactly what the conditioning path needs.
//!
//! Problem sizes are small (k up to ~110, p up to ~11), so a dense tableau
//! with Bland's rule is adequate and simple to make robust.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::NormalModel;

/// A constraint slack at the optimum counts as binding below this tolerance,
/// scaled by `1 + |eta|`.
pub const BINDING_TOL: f64 = 1e-7;

/// Relative tolerance for the full-rank check on the binding rows of `W_n`.
pub const VERTEX_RANK_TOL: f64 = 1e-9;

/// Relative tolerance below which a dual multiplier counts as zero.
pub const GAMMA_POS_TOL: f64 = 1e-9;

const FEAS_TOL: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-11;

/// Solution of the primal/dual pair at a finite optimum.
#[derive(Debug, Clone)]
pub struct LpSolution {
    /// Optimal value of the profiled max statistic.
    pub eta: f64,
    /// A primal minimizer for the nuisance parameter (length p).
    pub delta: DVector<f64>,
    /// Dual multipliers at a vertex of the dual solution set (length k).
    pub gamma: DVector<f64>,
    /// Indices of constraints binding at `(eta, delta)`.
    pub binding: Vec<usize>,
    /// Indices with strictly positive multipliers.
    pub gamma_positive: Vec<usize>,
    /// True when `gamma` has exactly p+1 strictly positive entries and the
    /// corresponding rows of `W_n` are full rank, so the closed-form
    /// truncation bounds apply.
    pub vertex_ok: bool,
}

/// Outcome of the primal/dual solve. The dual is infeasible exactly when the
/// primal value is unbounded below, in which case the null holds trivially.
#[derive(Debug, Clone)]
pub enum PrimalDual {
    Optimal(LpSolution),
    /// `eta = -infinity`: the column span of `X_n` contains a strictly
    /// negative direction.
    EtaUnbounded,
}

impl PrimalDual {
    pub fn optimal(&self) -> Option<&LpSolution> {
        match self {
            PrimalDual::Optimal(s) => Some(s),
            PrimalDual::EtaUnbounded => None,
        }
    }
}

/// Builds `W_n` from a model: row j is `(sqrt(Sigma_jj), X_{n,j})`.
pub fn constraint_matrix(model: &NormalModel) -> DMatrix<f64> {
    let k = model.k();
    let p = model.p();
    let sds = model.moment_sds();
    let mut w = DMatrix::zeros(k, p + 1);
    for j in 0..k {
        w[(j, 0)] = sds[j];
        for c in 0..p {
            w[(j, c + 1)] = model.x_n[(j, c)];
        }
    }
    w
}

/// Reusable standard-form description of the dual feasible set
/// `{g >= 0 : W'g = e_1}` for a fixed model, so repeated solves with varying
/// objectives (simulated draws, bisection probes) share the setup.
#[derive(Debug, Clone)]
pub struct DualProgram {
    /// (p+1) x k equality matrix `W'`.
    a: DMatrix<f64>,
    b: DVector<f64>,
    k: usize,
    p: usize,
    w: DMatrix<f64>,
}

impl DualProgram {
    pub fn new(model: &NormalModel) -> Self {
        let w = constraint_matrix(model);
        let a = w.transpose();
        let mut b = DVector::zeros(model.p() + 1);
        b[0] = 1.0;
        Self {
            a,
            b,
            k: model.k(),
            p: model.p(),
            w,
        }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Maximizes `objective' g` over the dual feasible set. Returns `None`
    /// when the feasible set is empty (primal unbounded below). The feasible
    /// set is a polytope (its first equality forces a bounded simplex-like
    /// section), so a feasible problem always has a finite optimum.
    pub fn maximize(&self, objective: &DVector<f64>) -> Result<Option<StandardSolution>> {
        match solve_standard_max(&self.a, &self.b, objective)? {
            StandardOutcome::Optimal(sol) => Ok(Some(sol)),
            StandardOutcome::Infeasible => Ok(None),
            StandardOutcome::Unbounded => Err(Error::LpNumericalFailure),
        }
    }

    /// Full primal/dual solve for the observed moment vector.
    pub fn solve(&self, y_n: &DVector<f64>) -> Result<PrimalDual> {
        let Some(sol) = self.maximize(y_n)? else {
            return Ok(PrimalDual::EtaUnbounded);
        };
        let eta = sol.objective;
        let gamma = sol.x.clone();
        let delta = DVector::from_fn(self.p, |i, _| sol.multipliers[i + 1]);

        let sds = DVector::from_fn(self.k, |j, _| self.w[(j, 0)]);
        let bind_tol = BINDING_TOL * (1.0 + eta.abs());
        let mut binding = Vec::new();
        for j in 0..self.k {
            let mut xd = 0.0;
            for c in 0..self.p {
                xd += self.w[(j, c + 1)] * delta[c];
            }
            let slack = eta - (y_n[j] - xd) / sds[j];
            if slack.abs() <= bind_tol || slack < 0.0 {
                binding.push(j);
            }
        }

        let pos_tol = GAMMA_POS_TOL * (1.0 + gamma.amax());
        let gamma_positive: Vec<usize> = (0..self.k).filter(|&j| gamma[j] > pos_tol).collect();
        let vertex_ok = gamma_positive.len() == self.p + 1
            && rows_full_rank(&self.w, &gamma_positive, VERTEX_RANK_TOL);

        Ok(PrimalDual::Optimal(LpSolution {
            eta,
            delta,
            gamma,
            binding,
            gamma_positive,
            vertex_ok,
        }))
    }
}

/// Solves the primal/dual pair for a model. See [`DualProgram::solve`].
pub fn solve_primal_dual(model: &NormalModel) -> Result<PrimalDual> {
    DualProgram::new(model).solve(&model.y_n)
}

fn rows_full_rank(w: &DMatrix<f64>, rows: &[usize], rel_tol: f64) -> bool {
    let m = rows.len();
    let sub = DMatrix::from_fn(m, w.ncols(), |r, c| w[(rows[r], c)]);
    if m > w.ncols() {
        return false;
    }
    let lu = sub.full_piv_lu();
    let u = lu.u();
    let d0 = u[(0, 0)].abs();
    if d0 == 0.0 {
        return false;
    }
    (0..m).all(|i| u[(i, i)].abs() > rel_tol * d0)
}

/// Enumerates every basic feasible solution of `{g >= 0 : W'g = e_1}`.
/// Intended as a small-scale test oracle; guarded to k <= 20.
pub fn enumerate_dual_vertices(model: &NormalModel) -> Result<Vec<DVector<f64>>> {
    let k = model.k();
    if k > 20 {
        return Err(Error::EnumerationGuard { limit: 20, got: k });
    }
    let w = constraint_matrix(model);
    let a = w.transpose();
    let m = model.p() + 1;
    let mut b = DVector::zeros(m);
    b[0] = 1.0;

    // Reduce [A | b] to independent rows; inconsistency means no vertices.
    let (rows, consistent) = independent_rows(&a, &b);
    if !consistent {
        return Ok(Vec::new());
    }
    let r = rows.len();
    let a_red = DMatrix::from_fn(r, k, |i, j| a[(rows[i], j)]);
    let b_red = DVector::from_fn(r, |i, _| b[rows[i]]);

    let mut vertices: Vec<DVector<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..r).collect();
    loop {
        let basis = DMatrix::from_fn(r, r, |i, j| a_red[(i, subset[j])]);
        let lu = basis.full_piv_lu();
        if let Some(xb) = lu.solve(&b_red) {
            if lu
                .u()
                .diagonal()
                .iter()
                .all(|d| d.abs() > 1e-10 * (1.0 + basis.amax()))
                && xb.iter().all(|&v| v >= -1e-9)
            {
                let mut g = DVector::zeros(k);
                for (pos, &col) in subset.iter().enumerate() {
                    g[col] = xb[pos].max(0.0);
                }
                let dup = vertices.iter().any(|v| (v - &g).amax() <= 1e-8);
                if !dup {
                    vertices.push(g);
                }
            }
        }
        if !next_subset(&mut subset, k) {
            break;
        }
    }
    Ok(vertices)
}

/// Maximal linearly independent subset of the rows of `a`, plus a consistency
/// flag: a row dependent in `a` whose `[a | b]` extension is independent makes
/// the system `ax = b` unsolvable.
fn independent_rows(a: &DMatrix<f64>, b: &DVector<f64>) -> (Vec<usize>, bool) {
    let m = a.nrows();
    let n = a.ncols();
    let mut indep: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut basis_ext: Vec<DVector<f64>> = Vec::new();
    for i in 0..m {
        let mut v = a.row(i).transpose();
        let mut v_ext = DVector::zeros(n + 1);
        v_ext.rows_mut(0, n).copy_from(&v);
        v_ext[n] = b[i];
        let orig = v.norm();
        let orig_ext = v_ext.norm();
        for u in &basis {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        for u in &basis_ext {
            let proj = u.dot(&v_ext);
            v_ext -= u * proj;
        }
        let dep = v.norm() <= 1e-12 * (1.0 + orig);
        let dep_ext = v_ext.norm() <= 1e-12 * (1.0 + orig_ext);
        if dep && !dep_ext {
            return (Vec::new(), false);
        }
        if !dep {
            let nrm = v.norm();
            basis.push(v / nrm);
            indep.push(i);
        }
        if !dep_ext {
            let nrm = v_ext.norm();
            basis_ext.push(v_ext / nrm);
        }
    }
    (indep, true)
}

fn next_subset(subset: &mut [usize], n: usize) -> bool {
    let r = subset.len();
    if r == 0 {
        return false;
    }
    let mut i = r;
    while i > 0 {
        i -= 1;
        if subset[i] < n - (r - i) {
            subset[i] += 1;
            for j in (i + 1)..r {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Solution of a standard-form problem `max c'x s.t. Ax = b, x >= 0`.
#[derive(Debug, Clone)]
pub struct StandardSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Equality multipliers `y` with `A'y >= c`, zeros on redundant rows.
    pub multipliers: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum StandardOutcome {
    Optimal(StandardSolution),
    Infeasible,
    Unbounded,
}

/// Two-phase dense simplex with Bland's rule.
pub fn solve_standard_max(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<StandardOutcome> {
    let m = a.nrows();
    let n = a.ncols();
    debug_assert_eq!(b.len(), m);
    debug_assert_eq!(c.len(), n);

    // Row equilibration: scale each row of [A | b] to unit max-abs. The
    // variables are unchanged; multipliers are rescaled at the end.
    let mut row_scale = vec![1.0_f64; m];
    let mut a_s = a.clone();
    let mut b_s = b.clone();
    for i in 0..m {
        let mut mx = b_s[i].abs();
        for j in 0..n {
            mx = mx.max(a_s[(i, j)].abs());
        }
        if mx > 0.0 {
            row_scale[i] = mx;
            for j in 0..n {
                a_s[(i, j)] /= mx;
            }
            b_s[i] /= mx;
        }
    }
    // Nonnegative right-hand side for the artificial start.
    for i in 0..m {
        if b_s[i] < 0.0 {
            b_s[i] = -b_s[i];
            row_scale[i] = -row_scale[i];
            for j in 0..n {
                a_s[(i, j)] = -a_s[(i, j)];
            }
        }
    }

    let total = n + m; // structural + artificial
    let mut t = DMatrix::zeros(m + 1, total + 1);
    t.view_mut((0, 0), (m, n)).copy_from(&a_s);
    for i in 0..m {
        t[(i, n + i)] = 1.0;
        t[(i, total)] = b_s[i];
    }
    let mut basis: Vec<usize> = (n..total).collect();

    // Phase 1: maximize -(sum of artificials). Objective row holds reduced
    // costs; start from cost 0 on structural, -1 on artificials, then clear
    // the basic (artificial) columns by adding each constraint row.
    for j in 0..total {
        t[(m, j)] = if j >= n { -1.0 } else { 0.0 };
    }
    t[(m, total)] = 0.0;
    for i in 0..m {
        for j in 0..=total {
            let v = t[(i, j)];
            t[(m, j)] += v;
        }
    }
    let iter_cap = 200 * (total + 10);
    run_simplex_phase1(&mut t, &mut basis, iter_cap)?;
    // Reduced-cost bookkeeping leaves the negated objective in the corner.
    let phase1 = -t[(m, total)];
    if phase1 < -FEAS_TOL * (1.0 + b_s.amax()) {
        return Ok(StandardOutcome::Infeasible);
    }

    // Drive artificials out of the basis; redundant rows get deleted.
    let mut deleted = vec![false; m];
    for i in 0..m {
        if basis[i] < n {
            continue;
        }
        let mut pivot_col = None;
        for j in 0..n {
            if t[(i, j)].abs() > 1e-9 {
                pivot_col = Some(j);
                break;
            }
        }
        match pivot_col {
            Some(j) => {
                pivot(&mut t, i, j);
                basis[i] = j;
            }
            None => {
                deleted[i] = true;
            }
        }
    }

    // Phase 2: true objective on structural columns, artificials frozen.
    let c_scale = 1.0 + c.amax();
    for j in 0..total {
        t[(m, j)] = if j < n { c[j] } else { 0.0 };
    }
    t[(m, total)] = 0.0;
    for i in 0..m {
        if deleted[i] {
            continue;
        }
        let cb = if basis[i] < n { c[basis[i]] } else { 0.0 };
        if cb != 0.0 {
            for j in 0..=total {
                let v = t[(i, j)];
                t[(m, j)] -= cb * v;
            }
        }
    }
    // Mark deleted rows inert by zeroing them.
    for i in 0..m {
        if deleted[i] {
            for j in 0..=total {
                t[(i, j)] = 0.0;
            }
        }
    }
    let opt = run_simplex_phase2(&mut t, &mut basis, n, &deleted, iter_cap, c_scale)?;
    if !opt {
        return Ok(StandardOutcome::Unbounded);
    }

    let mut x = DVector::zeros(n);
    for i in 0..m {
        if !deleted[i] && basis[i] < n {
            x[basis[i]] = t[(i, total)].max(0.0);
        }
    }
    let objective = c.dot(&x);

    // Multipliers: for artificial column n+i (the i-th unit column at start),
    // the phase-2 reduced cost is -y_i in the scaled problem.
    let mut multipliers = DVector::zeros(m);
    for i in 0..m {
        if !deleted[i] {
            multipliers[i] = -t[(m, n + i)] / row_scale[i];
        }
    }

    Ok(StandardOutcome::Optimal(StandardSolution {
        x,
        objective,
        multipliers,
    }))
}

/// Bland-rule iterations for phase 1, where every column is eligible and the
/// objective (minus the artificial sum) is bounded above by zero, so an
/// unbounded signal can only mean numerical breakdown.
fn run_simplex_phase1(t: &mut DMatrix<f64>, basis: &mut [usize], iter_cap: usize) -> Result<()> {
    let m = t.nrows() - 1;
    let total = t.ncols() - 1;
    let rc_tol = 1e-9;
    for _ in 0..iter_cap {
        let mut entering = None;
        for j in 0..total {
            if t[(m, j)] > rc_tol {
                entering = Some(j);
                break;
            }
        }
        let Some(e) = entering else {
            return Ok(());
        };
        let Some(r) = ratio_test(t, basis, e, m, total) else {
            return Err(Error::LpNumericalFailure);
        };
        pivot(t, r, e);
        basis[r] = e;
    }
    Err(Error::LpNumericalFailure)
}

fn run_simplex_phase2(
    t: &mut DMatrix<f64>,
    basis: &mut [usize],
    eligible_end: usize,
    deleted: &[bool],
    iter_cap: usize,
    c_scale: f64,
) -> Result<bool> {
    let m = t.nrows() - 1;
    let total = t.ncols() - 1;
    let rc_tol = 1e-9 * c_scale;
    for _ in 0..iter_cap {
        let mut entering = None;
        for j in 0..eligible_end {
            if t[(m, j)] > rc_tol {
                entering = Some(j);
                break;
            }
        }
        let Some(e) = entering else {
            return Ok(true);
        };
        let mut r = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if deleted[i] {
                continue;
            }
            let coef = t[(i, e)];
            if coef > PIVOT_TOL {
                let ratio = t[(i, total)] / coef;
                if ratio < best - 1e-12 * (1.0 + best.abs()) {
                    best = ratio;
                    r = Some(i);
                } else if ratio <= best + 1e-12 * (1.0 + best.abs()) {
                    // Bland tie-break: smallest basic variable index leaves.
                    if let Some(cur) = r {
                        if basis[i] < basis[cur] {
                            r = Some(i);
                        }
                    }
                }
            }
        }
        let Some(r) = r else {
            return Ok(false); // unbounded
        };
        pivot(t, r, e);
        basis[r] = e;
    }
    Err(Error::LpNumericalFailure)
}

fn ratio_test(
    t: &DMatrix<f64>,
    basis: &[usize],
    e: usize,
    m: usize,
    total: usize,
) -> Option<usize> {
    let mut r = None;
    let mut best = f64::INFINITY;
    for i in 0..m {
        let coef = t[(i, e)];
        if coef > PIVOT_TOL {
            let ratio = t[(i, total)] / coef;
            if ratio < best - 1e-12 * (1.0 + best.abs()) {
                best = ratio;
                r = Some(i);
            } else if ratio <= best + 1e-12 * (1.0 + best.abs()) {
                if let Some(cur) = r {
                    if basis[i] < basis[cur] {
                        r = Some(i);
                    }
                } else {
                    r = Some(i);
                }
            }
        }
    }
    r
}

fn pivot(t: &mut DMatrix<f64>, r: usize, e: usize) {
    let rows = t.nrows();
    let cols = t.ncols();
    let pv = t[(r, e)];
    for j in 0..cols {
        t[(r, j)] /= pv;
    }
    t[(r, e)] = 1.0;
    for i in 0..rows {
        if i == r {
            continue;
        }
        let f = t[(i, e)];
        if f != 0.0 {
            for j in 0..cols {
                t[(i, j)] -= f * t[(r, j)];
            }
            t[(i, e)] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn model(y: Vec<f64>, x: Option<DMatrix<f64>>, sigma: DMatrix<f64>) -> NormalModel {
        let k = y.len();
        let x = x.unwrap_or_else(|| DMatrix::zeros(k, 0));
        NormalModel::new(DVector::from_vec(y), x, sigma).unwrap()
    }

    #[test]
    fn no_nuisance_is_max_statistic() {
        let m = model(vec![1.0, 2.0], None, DMatrix::identity(2, 2));
        let sol = solve_primal_dual(&m).unwrap();
        let s = sol.optimal().unwrap();
        assert_relative_eq!(s.eta, 2.0, epsilon = 1e-9);
        assert_eq!(s.binding, vec![1]);
        assert_relative_eq!(s.gamma[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(s.gamma[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn two_constraint_balance() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let m = model(vec![1.0, 1.0], Some(x), DMatrix::identity(2, 2));
        let sol = solve_primal_dual(&m).unwrap();
        let s = sol.optimal().unwrap();
        assert_relative_eq!(s.eta, 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.delta[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(s.gamma[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(s.gamma[1], 0.5, epsilon = 1e-9);
        assert_eq!(s.binding, vec![0, 1]);
        assert!(s.vertex_ok);
    }

    #[test]
    fn strictly_negative_direction_is_unbounded() {
        let x = DMatrix::from_column_slice(2, 1, &[-1.0, -1.0]);
        let m = model(vec![0.3, -0.7], Some(x), DMatrix::identity(2, 2));
        let sol = solve_primal_dual(&m).unwrap();
        assert!(matches!(sol, PrimalDual::EtaUnbounded));
    }

    #[test]
    fn simplex_vertices_without_nuisance() {
        let m = model(vec![0.0, 0.0, 0.0], None, DMatrix::identity(3, 3));
        let mut v = enumerate_dual_vertices(&m).unwrap();
        v.sort_by(|a, b| a.imax().cmp(&b.imax()));
        assert_eq!(v.len(), 3);
        for (i, g) in v.iter().enumerate() {
            let mut e = DVector::zeros(3);
            e[i] = 1.0;
            assert_relative_eq!(g, &e, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_vertex_on_balanced_instance() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let m = model(vec![1.0, 1.0], Some(x), DMatrix::identity(2, 2));
        let v = enumerate_dual_vertices(&m).unwrap();
        assert_eq!(v.len(), 1);
        assert_relative_eq!(v[0][0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(v[0][1], 0.5, epsilon = 1e-9);
    }

    fn random_model(rng: &mut ChaCha12Rng, k: usize, p: usize) -> NormalModel {
        let y = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(k, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut sigma = &a * a.transpose();
        for i in 0..k {
            sigma[(i, i)] += 0.5;
        }
        NormalModel::new(y, x, sigma).unwrap()
    }

    #[test]
    fn oracle_equivalence_and_strong_duality() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut solved = 0;
        for _ in 0..300 {
            let k = rng.random_range(1..=8);
            let p = rng.random_range(0..=2.min(k - 1));
            let m = random_model(&mut rng, k, p);
            let vertices = enumerate_dual_vertices(&m).unwrap();
            match solve_primal_dual(&m).unwrap() {
                PrimalDual::Optimal(s) => {
                    solved += 1;
                    let best = vertices
                        .iter()
                        .map(|g| g.dot(&m.y_n))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(
                        (s.eta - best).abs() <= 1e-8 * (1.0 + s.eta.abs()),
                        "eta {} vs oracle {}",
                        s.eta,
                        best
                    );
                    // Strong duality and dual feasibility.
                    assert!((s.gamma.dot(&m.y_n) - s.eta).abs() <= 1e-8 * (1.0 + s.eta.abs()));
                    let w = constraint_matrix(&m);
                    let resid = w.transpose() * &s.gamma
                        - DVector::from_fn(p + 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
                    assert!(resid.amax() < 1e-7);
                    assert!(s.gamma.min() > -1e-9);
                    // Complementary slackness: positive multipliers on binding rows.
                    for &j in &s.gamma_positive {
                        assert!(s.binding.contains(&j), "gamma_j > 0 off the binding set");
                    }
                }
                PrimalDual::EtaUnbounded => {
                    assert!(vertices.is_empty());
                }
            }
        }
        assert!(solved > 200);
    }

    #[test]
    fn shift_invariance_of_eta_and_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.random_range(2..=6);
            let p = rng.random_range(1..=2);
            let m = random_model(&mut rng, k, p);
            let PrimalDual::Optimal(s1) = solve_primal_dual(&m).unwrap() else {
                continue;
            };
            let shift = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y2 = &m.y_n + &m.x_n * &shift;
            let m2 = NormalModel::new(y2, m.x_n.clone(), m.sigma.clone()).unwrap();
            let PrimalDual::Optimal(s2) = solve_primal_dual(&m2).unwrap() else {
                panic!("shifted problem must stay bounded");
            };
            assert_relative_eq!(s1.eta, s2.eta, epsilon = 1e-7, max_relative = 1e-7);
            assert_relative_eq!(s1.gamma, s2.gamma, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_duplicate_rows_still_solve() {
        // Identical moment rows: dual vertex has a zero-level basic entry.
        let m = model(vec![1.0, 1.0], None, DMatrix::identity(2, 2));
        let sol = solve_primal_dual(&m).unwrap();
        let s = sol.optimal().unwrap();
        assert_relative_eq!(s.eta, 1.0, epsilon = 1e-9);
        assert_eq!(s.binding, vec![0, 1]);
    }
}
