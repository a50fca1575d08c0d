//! Broadcast control synthesis for finite samples of parameterised linear and
//! bilinear systems.
//!
//! Every sample's admissible controls form an affine set in L²([0,T], ℝᵐ); a
//! common control is a point of their intersection, found by averaging exact
//! projections. The same machinery yields minimum-energy controls, controls
//! under energy or amplitude limits, a closed-form limit in a Legendre basis,
//! and a numerical reachability verdict.

pub mod bilinear;
pub mod ensemble_model;
pub mod error;
pub mod function_space;
pub mod projections;
pub mod solvers;

pub use bilinear::{
    linearize_about, solve_bilinear, BilinearEnsembleModel, BilinearOptions, BilinearReport,
    RelinearizeAbout,
};
pub use ensemble_model::{
    sample_parameters, simulate_bilinear, simulate_linear, steering_operator, steering_operators,
    target_vector, BoundaryPair, DriftTable, FamilyTag, LinearEnsembleModel, SteeringOperator,
    Trajectory,
};
pub use error::{EnsembleError, Result};
pub use function_space::{
    from_coordinates, inner_product, legendre_basis, make_time_grid, norm_l2, to_coordinates,
    BasisSet, ControlSignal, Coordinates, TimeGrid,
};
pub use projections::{
    gramian, project_affine, project_ball, project_box, AffineSteeringSet, AmplitudeBox,
    ConstraintSet, EnergyBall, Gramian,
};
pub use solvers::{
    affine_sets, assess_reachability, build_spectral, solve_constrained, solve_dykstra,
    solve_feasible, solve_min_energy, solve_spectral, spectral_evidence, weighted_projection_step,
    Classification, DykstraState, IterationTrace, ReachabilityMethod, ReachabilityReport,
    SolveReport, SolverOptions, SpectralOperator, TraceRow, Verdict, DEFAULT_REACH_TOL,
};
