//! Finite-difference solvers for the one-dimensional value equations and a
//! Feynman-Kac Monte Carlo oracle for the linear ones.

mod feynman_kac;
mod grid;
mod solver;
mod spec;

pub use feynman_kac::{feynman_kac_mc, ProbeEstimate};
pub use grid::GridFunction;
pub use solver::{
    convergence_table, max_abs_difference_interior, solve, solve_linear, solve_semilinear_power, ConvergenceRow,
    SEMILINEAR_FLOOR,
};
pub use spec::{Coordinate, LocalCoefficients, LocalFn, PdeKind, PdeSpec, TerminalFn, DOMAIN_STDS, MIN_RESOLUTION};
