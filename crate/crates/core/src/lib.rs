//! Monte Carlo solver for the 3D incompressible Navier-Stokes Cauchy problem.
//!
//! The velocity field is represented through backward stochastic flows: the
//! solution at (t, x) is an expectation over diffusion paths started at x and
//! run back to time 0, transporting the initial data and accumulating pressure
//! gradients along the way. Pressure comes from a Feynman-Kac representation of
//! the Newton potential of gamma = Tr[(grad u)^2], velocity gradients from a
//! Bismut-Elworthy-Li weight, and the nonlinearity is resolved by Picard
//! iteration. A Constantin-Iyer style backend (Leray projection of transported
//! initial data) is provided as an independent cross-check.
//!
//! Modules:
//! - [`math`]: small fixed-size vector/matrix types.
//! - [`rng`]: deterministic per-path RNG stream derivation.
//! - [`fields`]: scalar/vector fields (analytic families and time-indexed
//!   grids), spectral operators, norms, serialization.
//! - [`poisson`]: Newton-potential pressure solves (walk-based MC and
//!   deterministic quadrature) and the Calderon-Zygmund identity check.
//! - [`flows`]: Euler-Maruyama forward/backward flow ensembles, time-reversal
//!   pairing, Jacobian propagation, Ito integrals of the Jacobian.
//! - [`parabolic`]: Feynman-Kac solver for drift-diffusion problems with
//!   sources, plus weak pairings.
//! - [`apriori`]: Riccati-type a-priori bound ODEs and the existence horizon.
//! - [`picard`]: the Navier-Stokes Picard driver over both backends.

pub mod error;
pub mod fields;
pub mod apriori;
pub mod flows;
pub mod parabolic;
pub mod picard;
pub mod math;
pub mod poisson;
pub mod rng;

pub use error::{Error, Result};
pub use fields::{
    gamma, AnalyticScalar, AnalyticVector, Domain, FieldNorms, GridSeries, ScalarField,
    ScalarGrid, TensorGrid, Vec3Grid, VectorField,
};
pub use flows::{
    coarsen_increments, gaussian_increments, invert_by_time_reversal, simulate_backward_flow,
    simulate_backward_flow_with_noise, simulate_forward_flow, simulate_forward_flow_with_noise,
    simulate_jacobian, stochastic_integral_eta, FlowConfig, FlowDirection, FlowEnsemble,
    JacobianPath, NoiseSign,
};
pub use poisson::{
    grad_pressure_mc, grad_pressure_mc_batch, newton_potential_quadrature, pressure_mc,
    pressure_mc_batch, pressure_mc_linear, McScalar, McVector, PoissonConfig,
};
pub use apriori::{existence_horizon, solve_bound_odes, AprioriParams, BoundSolution};
pub use parabolic::{
    solve_parabolic, weak_pairing, ParabolicData, ParabolicProblem, ParabolicValues, WeakPairing,
};
pub use picard::{
    ci_velocity, compute_grad_velocity_bel, picard_init, picard_run, picard_step,
    verify_weak_solution, Backend, IterationDeltas, NSProblem, PicardConfig, PicardRun,
    PicardState, PressureSolver, WeakReport,
};
pub use math::{Mat3, Vec3};
