//! Interior-point solver for problems that maximize a linear plus weighted
//! logarithmic objective over linear equalities, variable bounds and
//! rotated second-order cones.

mod dense;
mod error;
mod presolve;
mod problem;
mod solver;

pub use error::ConicError;
pub use problem::{ConicProblem, Equality, FeasibilityReport, LogTerm, RotatedCone};
pub use solver::{solve, solve_from, ConicSolver, InteriorPoint, Residuals, Solution, SolverConfig, Status};
