//! Oblique-manifold geometry and a Riemannian L-BFGS minimizer.

mod lbfgs;
mod oblique;
mod space;

pub use lbfgs::{
    minimize, minimize_on, LbfgsConfig, Minimum, StepRecord, Termination, CURVATURE_GUARD,
};
pub use oblique::{
    project_tangent, retract, transport, ObliqueMatrix, TangentVector, COLUMN_NORM_TOL,
};
pub use space::{Euclidean, Manifold, Oblique, ProductOblique};
