//! Search spaces understood by the L-BFGS driver.
//!
//! Tangent vectors and raw gradients are passed around as flat slices in the
//! ambient coordinates of the space; all spaces here use the embedded
//! Euclidean metric, so the Riemannian inner product is a plain dot product.

use nalgebra::DMatrix;

use super::oblique::{max_column_deviation, project_in_place, ObliqueMatrix};
use crate::error::{Error, Result};

pub trait Manifold {
    type Point: Clone;

    /// Length of the flat ambient representation.
    fn ambient_dim(&self, x: &Self::Point) -> usize;

    /// Projects an ambient vector onto the tangent space at `x`, in place.
    fn project(&self, x: &Self::Point, v: &mut [f64]);

    /// Retracts the tangent step `step·d` from `x` back onto the space.
    fn retract(&self, x: &Self::Point, d: &[f64], step: f64) -> Result<Self::Point>;

    /// Velocity of the curve `t ↦ retract(x, d, t)` at `t = step`, written to `out`.
    fn retract_velocity(&self, x: &Self::Point, d: &[f64], step: f64, out: &mut [f64]);

    /// How far `x` is from satisfying the space's constraints (0 for flat spaces).
    fn constraint_violation(&self, _x: &Self::Point) -> f64 {
        0.0
    }
}

/// Unconstrained R^n.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl Manifold for Euclidean {
    type Point = Vec<f64>;

    fn ambient_dim(&self, x: &Vec<f64>) -> usize {
        x.len()
    }

    fn project(&self, _x: &Vec<f64>, _v: &mut [f64]) {}

    fn retract(&self, x: &Vec<f64>, d: &[f64], step: f64) -> Result<Vec<f64>> {
        Ok(x.iter().zip(d).map(|(a, b)| a + step * b).collect())
    }

    fn retract_velocity(&self, _x: &Vec<f64>, d: &[f64], _step: f64, out: &mut [f64]) {
        out.copy_from_slice(d);
    }
}

/// A single oblique manifold OB(m, l).
#[derive(Debug, Clone, Copy, Default)]
pub struct Oblique;

/// A product of oblique manifolds, one factor per matrix.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProductOblique;

fn oblique_project(x: &ObliqueMatrix, v: &mut [f64]) {
    let mut tmp = DMatrix::from_column_slice(x.nrows(), x.ncols(), v);
    project_in_place(x.as_matrix(), &mut tmp);
    v.copy_from_slice(tmp.as_slice());
}

fn oblique_retract(x: &ObliqueMatrix, d: &[f64], step: f64) -> Result<ObliqueMatrix> {
    if step == 0.0 {
        return Ok(x.clone());
    }
    let mut y = x.as_matrix().clone();
    for (a, b) in y.as_mut_slice().iter_mut().zip(d) {
        *a += step * b;
    }
    ObliqueMatrix::from_normalized_columns(y)
}

// Column j of R(x, t d) is y/‖y‖ with y = x_j + t d_j; its t-derivative is
// (d_j − ŷ⟨ŷ, d_j⟩)/‖y‖.
fn oblique_velocity(x: &ObliqueMatrix, d: &[f64], step: f64, out: &mut [f64]) {
    let m = x.nrows();
    let xs = x.as_matrix().as_slice();
    for j in 0..x.ncols() {
        let range = j * m..(j + 1) * m;
        let y: Vec<f64> = xs[range.clone()]
            .iter()
            .zip(&d[range.clone()])
            .map(|(a, b)| a + step * b)
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out_col = &mut out[range.clone()];
        if !(norm > 0.0) {
            out_col.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let radial: f64 = y
            .iter()
            .zip(&d[range.clone()])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / norm;
        for ((o, yi), di) in out_col.iter_mut().zip(&y).zip(&d[range]) {
            *o = (di - yi / norm * radial) / norm;
        }
    }
}

impl Manifold for Oblique {
    type Point = ObliqueMatrix;

    fn ambient_dim(&self, x: &ObliqueMatrix) -> usize {
        x.nrows() * x.ncols()
    }

    fn project(&self, x: &ObliqueMatrix, v: &mut [f64]) {
        oblique_project(x, v)
    }

    fn retract(&self, x: &ObliqueMatrix, d: &[f64], step: f64) -> Result<ObliqueMatrix> {
        oblique_retract(x, d, step)
    }

    fn retract_velocity(&self, x: &ObliqueMatrix, d: &[f64], step: f64, out: &mut [f64]) {
        oblique_velocity(x, d, step, out)
    }

    fn constraint_violation(&self, x: &ObliqueMatrix) -> f64 {
        x.column_norm_deviation()
    }
}

fn factor_ranges(
    xs: &[ObliqueMatrix],
) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
    let mut offset = 0;
    xs.iter().enumerate().map(move |(k, x)| {
        let len = x.nrows() * x.ncols();
        let r = offset..offset + len;
        offset += len;
        (k, r)
    })
}

impl Manifold for ProductOblique {
    type Point = Vec<ObliqueMatrix>;

    fn ambient_dim(&self, xs: &Vec<ObliqueMatrix>) -> usize {
        xs.iter().map(|x| x.nrows() * x.ncols()).sum()
    }

    fn project(&self, xs: &Vec<ObliqueMatrix>, v: &mut [f64]) {
        for (k, r) in factor_ranges(xs) {
            oblique_project(&xs[k], &mut v[r]);
        }
    }

    fn retract(&self, xs: &Vec<ObliqueMatrix>, d: &[f64], step: f64) -> Result<Vec<ObliqueMatrix>> {
        factor_ranges(xs)
            .map(|(k, r)| {
                oblique_retract(&xs[k], &d[r], step).map_err(|e| match e {
                    Error::DegenerateStep { column } => Error::DegenerateStep {
                        column: column + xs[..k].iter().map(|x| x.ncols()).sum::<usize>(),
                    },
                    other => other,
                })
            })
            .collect()
    }

    fn retract_velocity(&self, xs: &Vec<ObliqueMatrix>, d: &[f64], step: f64, out: &mut [f64]) {
        for (k, r) in factor_ranges(xs) {
            oblique_velocity(&xs[k], &d[r.clone()], step, &mut out[r]);
        }
    }

    fn constraint_violation(&self, xs: &Vec<ObliqueMatrix>) -> f64 {
        xs.iter()
            .map(|x| max_column_deviation(x.as_matrix()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn velocity_matches_finite_difference_of_retraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = ObliqueMatrix::random(4, 3, &mut rng).unwrap();
        let mut d: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        Oblique.project(&x, &mut d);
        let t = 0.37;
        let h = 1e-6;
        let plus = Oblique.retract(&x, &d, t + h).unwrap();
        let minus = Oblique.retract(&x, &d, t - h).unwrap();
        let fd = (plus.as_matrix() - minus.as_matrix()) / (2.0 * h);
        let mut vel = vec![0.0; 12];
        Oblique.retract_velocity(&x, &d, t, &mut vel);
        for (a, b) in fd.as_slice().iter().zip(&vel) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn product_projection_acts_per_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = vec![
            ObliqueMatrix::random(3, 3, &mut rng).unwrap(),
            ObliqueMatrix::random(3, 3, &mut rng).unwrap(),
        ];
        let mut v: Vec<f64> = xs
            .iter()
            .flat_map(|x| x.as_matrix().as_slice().to_vec())
            .collect();
        ProductOblique.project(&xs, &mut v);
        assert!(v.iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn product_retraction_reports_global_column() {
        let xs = vec![ObliqueMatrix::identity(2), ObliqueMatrix::identity(2)];
        let mut d = vec![0.0; 8];
        d[6] = 0.0;
        d[7] = -1.0; // second factor, column 1: (0,1) + (0,-1) = 0
        let err = ProductOblique.retract(&xs, &d, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateStep { column: 3 }));
    }
}
