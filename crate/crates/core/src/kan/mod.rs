//! KAN layer families: B-spline edges and grouped-rational edges.

mod bspline;
mod count;
mod horner;
mod rational;
mod spline;

pub use bspline::{KanCache, KanLayer};
pub use count::{formula_count, param_count, LayerKind, ParamCountReport};
pub use horner::horner_eval;
pub use rational::{RationalCache, RationalEval, RationalGroupLayer};
pub use spline::SplineGrid;
