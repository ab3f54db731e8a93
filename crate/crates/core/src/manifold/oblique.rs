//! Geometry of the oblique manifold OB(m, l): real m×l matrices whose
//! columns all have unit Euclidean norm.
//!
//! The Riemannian metric is the one inherited from the ambient space,
//! `g_X(U, V) = Σ_j ⟨u_j, v_j⟩`. Tangent vectors at `X` are the matrices whose
//! columns are orthogonal to the matching columns of `X`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest tolerated deviation of a column norm from 1.
pub const COLUMN_NORM_TOL: f64 = 1e-12;

/// An m×l matrix with unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ObliqueMatrix {
    data: DMatrix<f64>,
}

/// A tangent vector at some point of the oblique manifold.
///
/// The point it is tangent at is not stored; operations taking both a point
/// and a tangent vector check that the shapes agree.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    data: DMatrix<f64>,
}

impl ObliqueMatrix {
    /// Wraps `data`, failing unless every column already has unit norm.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        check_nonempty(&data)?;
        let dev = max_column_deviation(&data);
        if !(dev <= COLUMN_NORM_TOL) {
            return Err(Error::invalid(format!(
                "column norms deviate from 1 by {dev:e}"
            )));
        }
        Ok(ObliqueMatrix { data })
    }

    /// Normalizes every column of `data` onto the unit sphere.
    pub fn from_normalized_columns(mut data: DMatrix<f64>) -> Result<Self> {
        check_nonempty(&data)?;
        for (j, mut col) in data.column_iter_mut().enumerate() {
            let norm = col.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateStep { column: j });
            }
            col /= norm;
        }
        Ok(ObliqueMatrix { data })
    }

    /// A matrix with i.i.d. Gaussian entries, columns normalized.
    pub fn random<R: Rng + ?Sized>(m: usize, l: usize, rng: &mut R) -> Result<Self> {
        let data = DMatrix::from_fn(m, l, |_, _| StandardNormal.sample(rng));
        Self::from_normalized_columns(data)
    }

    pub fn identity(n: usize) -> Self {
        ObliqueMatrix {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// max_j |‖col_j‖ − 1|
    pub fn column_norm_deviation(&self) -> f64 {
        max_column_deviation(&self.data)
    }
}

impl TangentVector {
    pub fn zeros(m: usize, l: usize) -> Self {
        TangentVector {
            data: DMatrix::zeros(m, l),
        }
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Largest |⟨x_j, v_j⟩| over columns.
    pub fn max_radial_component(&self, base: &ObliqueMatrix) -> f64 {
        base.data
            .column_iter()
            .zip(self.data.column_iter())
            .map(|(x, v)| x.dot(&v).abs())
            .fold(0.0, f64::max)
    }

    /// Riemannian inner product with another tangent vector at the same point.
    pub fn inner(&self, other: &TangentVector) -> f64 {
        self.data.dot(&other.data)
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }
}

fn check_nonempty(data: &DMatrix<f64>) -> Result<()> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(Error::invalid(
            "oblique matrix needs at least one row and column",
        ));
    }
    Ok(())
}

fn check_same_shape(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    if x.shape() != v.shape() {
        return Err(Error::shape(
            format!("{}x{}", x.nrows(), x.ncols()),
            format!("{}x{}", v.nrows(), v.ncols()),
        ));
    }
    Ok(())
}

pub(crate) fn max_column_deviation(data: &DMatrix<f64>) -> f64 {
    data.column_iter()
        .map(|c| (c.norm() - 1.0).abs())
        .fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Removes the radial part of every column: `v_j − ⟨x_j, v_j⟩ x_j`.
pub fn project_tangent(x: &ObliqueMatrix, v: &DMatrix<f64>) -> Result<TangentVector> {
    check_same_shape(&x.data, v)?;
    let mut out = v.clone();
    project_in_place(&x.data, &mut out);
    Ok(TangentVector { data: out })
}

pub(crate) fn project_in_place(x: &DMatrix<f64>, v: &mut DMatrix<f64>) {
    for (xc, mut vc) in x.column_iter().zip(v.column_iter_mut()) {
        let radial = xc.dot(&vc);
        vc.axpy(-radial, &xc, 1.0);
    }
}

/// Columnwise-normalizing retraction `(x_j + step·v_j) / ‖x_j + step·v_j‖`.
pub fn retract(x: &ObliqueMatrix, v: &TangentVector, step: f64) -> Result<ObliqueMatrix> {
    check_same_shape(&x.data, &v.data)?;
    if step == 0.0 {
        return Ok(x.clone());
    }
    let mut y = x.data.clone();
    y += &v.data * step;
    ObliqueMatrix::from_normalized_columns(y)
}

/// Vector transport by projection onto the tangent space at `x_new`.
pub fn transport(
    x_old: &ObliqueMatrix,
    x_new: &ObliqueMatrix,
    v: &TangentVector,
) -> Result<TangentVector> {
    check_same_shape(&x_old.data, &x_new.data)?;
    check_same_shape(&x_old.data, &v.data)?;
    project_tangent(x_new, &v.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[a, b])
    }

    #[test]
    fn projection_removes_radial_component() {
        let x = ObliqueMatrix::new(col(1.0, 0.0)).unwrap();
        let t = project_tangent(&x, &col(0.5, 2.0)).unwrap();
        assert_eq!(t.as_matrix(), &col(0.0, 2.0));
    }

    #[test]
    fn radial_vector_projects_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ObliqueMatrix::random(4, 3, &mut rng).unwrap();
        let t = project_tangent(&x, x.as_matrix()).unwrap();
        assert!(t.norm() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ObliqueMatrix::random(5, 5, &mut rng).unwrap();
        let v = DMatrix::from_fn(5, 5, |_, _| StandardNormal.sample(&mut rng));
        let once = project_tangent(&x, &v).unwrap();
        let twice = project_tangent(&x, once.as_matrix()).unwrap();
        assert!((once.as_matrix() - twice.as_matrix()).amax() < 1e-14);
        assert!(once.max_radial_component(&x) < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = ObliqueMatrix::identity(3);
        assert!(matches!(
            project_tangent(&x, &DMatrix::zeros(3, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn retract_with_zero_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ObliqueMatrix::random(3, 4, &mut rng).unwrap();
        let v = project_tangent(&x, &DMatrix::from_element(3, 4, 0.7)).unwrap();
        assert_eq!(retract(&x, &v, 0.0).unwrap(), x);
    }

    #[test]
    fn retract_normalizes_sum() {
        let x = ObliqueMatrix::new(col(1.0, 0.0)).unwrap();
        let v = project_tangent(&x, &col(0.0, 1.0)).unwrap();
        let y = retract(&x, &v, 1.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y.as_matrix() - col(h, h)).amax() < 1e-15);
    }

    #[test]
    fn retract_reports_collapsed_column() {
        let x = ObliqueMatrix::new(col(1.0, 0.0)).unwrap();
        // Not tangent, but exercises the degenerate path directly.
        let v = TangentVector {
            data: col(-1.0, 0.0),
        };
        assert!(matches!(
            retract(&x, &v, 1.0),
            Err(Error::DegenerateStep { column: 0 })
        ));
    }

    #[test]
    fn transport_to_same_point_keeps_tangent_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ObliqueMatrix::random(4, 2, &mut rng).unwrap();
        let v = project_tangent(&x, &DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64)).unwrap();
        let w = transport(&x, &x, &v).unwrap();
        assert!((w.as_matrix() - v.as_matrix()).amax() < 1e-14);
        let z = transport(&x, &x, &TangentVector::zeros(4, 2)).unwrap();
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn new_rejects_unnormalized_columns() {
        assert!(ObliqueMatrix::new(col(1.0, 1.0)).is_err());
        assert!(ObliqueMatrix::new(DMatrix::zeros(0, 3)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(m: usize, l: usize) -> impl Strategy<Value = DMatrix<f64>> {
            proptest::collection::vec(-3.0f64..3.0, m * l)
                .prop_map(move |v| DMatrix::from_vec(m, l, v))
        }

        proptest! {
            #[test]
            fn retraction_stays_on_manifold(
                base in matrix(5, 3),
                dir in matrix(5, 3),
                step in -10.0f64..10.0,
            ) {
                prop_assume!(base.column_iter().all(|c| c.norm() > 1e-3));
                let x = ObliqueMatrix::from_normalized_columns(base).unwrap();
                let v = project_tangent(&x, &dir).unwrap();
                let y = retract(&x, &v, step).unwrap();
                prop_assert!(y.column_norm_deviation() < COLUMN_NORM_TOL);
            }

            #[test]
            fn transported_vectors_are_tangent(
                a in matrix(4, 4),
                b in matrix(4, 4),
                dir in matrix(4, 4),
            ) {
                prop_assume!(a.column_iter().all(|c| c.norm() > 1e-3));
                prop_assume!(b.column_iter().all(|c| c.norm() > 1e-3));
                let x0 = ObliqueMatrix::from_normalized_columns(a).unwrap();
                let x1 = ObliqueMatrix::from_normalized_columns(b).unwrap();
                let v = project_tangent(&x0, &dir).unwrap();
                let w = transport(&x0, &x1, &v).unwrap();
                prop_assert!(w.max_radial_component(&x1) < 1e-10);
            }
        }
    }
}
