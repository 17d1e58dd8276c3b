//! Bilevel optimization toolkit built around a surrogate value function (SVF)
//! reformulation.
//!
//! A bilevel program
//!
//! ```text
//! min F(x,y)   s.t.  G(x,y) <= 0,   y in argmin { f(x,y) : g(x,y) <= 0 }
//! ```
//!
//! is rewritten as a single-level program over (x, y, u, s) in which a
//! reference point u carries the lower-level stationarity system and the
//! hierarchy is enforced by the dominance constraint f(x,y) <= f(x,u).
//! The complementarity structure is handled by a smoothing-barrier augmented
//! Lagrangian continuation; W/C/M/S stationarity of candidate points is
//! certified by linear programming over the multiplier system.
//!
//! Module map:
//! - [`expr`]: symbolic expression trees, evaluation, differentiation
//! - [`parse`]: the `.blp` model format
//! - [`problem`]: validated bilevel problems and metadata
//! - [`reformulate`]: SVF / KKT single-level instances and residual audits
//! - [`smoothing`]: the shift algebra (z, kappa) and smoothed subproblems
//! - [`nlp`]: dense BFGS + augmented Lagrangian subproblem solver
//! - [`driver`]: outer continuation loops (svf-sbal, kp-sbal, kp-rlx)
//! - [`simplex`]: dense phase-one/phase-two simplex used by certification
//! - [`stationarity`]: index sets, W/C/M/S certificates, lower KKT checks
//! - [`oracle`]: brute-force value function, global solve, derivative audits
//! - [`bench`]: metrics, performance profiles, suite runner, CSV/SVG output

pub mod bench;
pub mod driver;
pub mod expr;
pub mod nlp;
pub mod oracle;
pub mod parse;
pub mod problem;
pub mod reformulate;
pub mod rng;
pub mod simplex;
pub mod smoothing;
pub mod stationarity;

pub use expr::{Block, EvalError, Expr, Point};
pub use problem::BilevelProblem;
pub use reformulate::{build_kp, build_svf, MpecInstance, ResidualBreakdown};
