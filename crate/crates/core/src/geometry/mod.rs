//! Set representations, support functions, convex hulls and a small LP solver.

mod hull;
mod lp;
mod sets;

pub use hull::{Hull2D, Point2};
pub use lp::{is_feasible, lp_solve, LpSolution, Sense, FEAS_TOL};
pub use sets::{aabb, support_value, union_aabb, Hyperrect, InputSet, Norm, Polytope, WeightedBall};
