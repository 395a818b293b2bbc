//! Hypothesis tests and confidence sets for parameters identified by moment
//! inequalities that are linear in a nuisance parameter, conditional on
//! instruments.
//!
//! The testing problem is: given per-observation moments `Y_i - X_i d` with
//! `E[Y_i - X_i d | Z_i] <= 0` at the true parameters, decide whether a null
//! parameter value is compatible with the data. All procedures work through
//! the profiled max statistic, the optimum of a small linear program, and its
//! dual multipliers:
//!
//! * **LFP** compares the statistic to the least-favorable projection
//!   quantile, which ignores profiling and is simplest but conservative.
//! * **LF** simulates the profiled statistic itself under the least
//!   favorable mean, removing that conservativeness.
//! * **Conditional** conditions on the identity of the binding moments and on
//!   a sufficient statistic for the rest, yielding a truncated-normal
//!   critical value that is insensitive to slack moments.
//! * **Hybrid** runs a small-level LF first stage and a conditional second
//!   stage, trading a little of the conditional test's insensitivity for
//!   much better power when the binding moments are not well separated.
//!
//! The [`wollmann`] module contains a calibrated product-entry simulator and
//! the Monte Carlo harness used to validate size and power at desk scale.

pub mod covariance;
pub mod critical_values;
pub mod error;
pub mod inference;
pub mod io;
pub mod lp;
pub mod moments;
pub mod normal;
pub mod wollmann;

pub use covariance::{estimate_sigma, prune_dependent_columns, MatchingConfig};
pub use critical_values::{
    conditional_critical_value, hybrid_upper_bound, lf_critical_value, lfp_critical_value,
    truncation_bounds_bisection, truncation_bounds_closed_form, BoundsMethod, SimDraws,
    TruncationBounds,
};
pub use error::{Error, Result};
pub use inference::{
    invert_grid, linear_ci_bound, project_nonlinear_nuisance, run_test, ConfidenceSet, Direction,
    Method, TestDecision, TestSpec,
};
pub use lp::{enumerate_dual_vertices, solve_primal_dual, LpSolution, PrimalDual};
pub use moments::{
    build_normal_model, transform_linear_target, NormalModel, ObservationSet,
};
