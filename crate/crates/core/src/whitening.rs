//! PCA whitening onto the leading principal subspace.
//!
//! `whiten(x) = diag(1/√(λ + eps)) · Bᵀ (x − mean)` where `B` holds the top
//! `d` eigenvectors of the sample covariance (normalized by T) and `λ` their
//! eigenvalues.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::Image;

/// Default regularizer, relative to the largest eigenvalue.
pub const DEFAULT_RELATIVE_EPS: f64 = 1e-5;

/// Eigenvalues below `RANK_TOL · λ_max` count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularization {
    Absolute(f64),
    RelativeToMax(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::RelativeToMax(DEFAULT_RELATIVE_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: DVector<f64>,
    /// D×d, orthonormal columns.
    basis: DMatrix<f64>,
    /// Descending, all positive.
    eigenvalues: DVector<f64>,
    eps: f64,
    /// Sum of all covariance eigenvalues (the total variance).
    total_variance: f64,
}

impl WhiteningTransform {
    /// Assembles a transform from its parts, checking every invariant.
    pub fn from_parts(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        eps: f64,
        total_variance: f64,
    ) -> Result<Self> {
        let (dim, d) = basis.shape();
        if mean.len() != dim || eigenvalues.len() != d {
            return Err(Error::shape(
                format!("mean of length {dim} and {d} eigenvalues"),
                format!("{} and {}", mean.len(), eigenvalues.len()),
            ));
        }
        if d == 0 || d > dim {
            return Err(Error::invalid(format!(
                "retained dimension {d} must lie in 1..={dim}"
            )));
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid("eps must be a nonnegative finite number"));
        }
        if eigenvalues.iter().any(|l| !(*l > 0.0))
            || eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::invalid(
                "eigenvalues must be positive and sorted descending",
            ));
        }
        let gram = basis.transpose() * &basis;
        let off = (gram - DMatrix::identity(d, d)).amax();
        if off > 1e-10 {
            return Err(Error::invalid(format!(
                "basis is not orthonormal (error {off:e})"
            )));
        }
        Ok(WhiteningTransform {
            mean,
            basis,
            eigenvalues,
            eps,
            total_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Fraction of the total variance kept by the retained subspace.
    pub fn variance_captured(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigenvalues.sum() / self.total_variance
        } else {
            1.0
        }
    }

    fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.eigenvalues.iter().map(move |l| (l + self.eps).sqrt())
    }

    pub fn whiten(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.len()));
        }
        let centered = DVector::from_column_slice(x) - &self.mean;
        let mut y = self.basis.tr_mul(&centered);
        for (v, s) in y.iter_mut().zip(self.scales()) {
            *v /= s;
        }
        Ok(y)
    }

    /// Whitens every column of `x` (D×T) into a d×T matrix.
    pub fn whiten_all(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.nrows()));
        }
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        let mut y = self.basis.tr_mul(&centered);
        for (mut row, s) in y.row_iter_mut().zip(self.scales()) {
            row /= s;
        }
        Ok(y)
    }

    /// The linear part of the inverse map: `B · diag(√(λ + eps)) · y`.
    pub fn dewhiten_direction(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), y.len()));
        }
        let scaled =
            DVector::from_iterator(y.len(), y.iter().zip(self.scales()).map(|(v, s)| v * s));
        Ok(&self.basis * scaled)
    }

    pub fn dewhiten(&self, y: &[f64]) -> Result<DVector<f64>> {
        Ok(self.dewhiten_direction(y)? + &self.mean)
    }
}

fn centered(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let t = x.ncols() as f64;
    let mean = x.column_sum() / t;
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (mean, c)
}

/// Eigenpairs of the covariance `Xc Xcᵀ / T`, sorted descending, computed
/// either directly (D×D) or through the T×T Gram matrix.
fn covariance_eigen(xc: &DMatrix<f64>, via_gram: bool) -> (Vec<f64>, DMatrix<f64>) {
    let (dim, t) = xc.shape();
    let tf = t as f64;
    let (values, vectors) = if via_gram {
        let gram = xc.tr_mul(xc) / tf;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let keep: Vec<usize> = order.into_iter().take(dim.min(t)).collect();
        let mut vecs = DMatrix::zeros(dim, keep.len());
        let mut vals = Vec::with_capacity(keep.len());
        for (j, &i) in keep.iter().enumerate() {
            let l = eig.eigenvalues[i].max(0.0);
            vals.push(l);
            if l > 0.0 {
                let v = xc * eig.eigenvectors.column(i) / (tf * l).sqrt();
                vecs.set_column(j, &v);
            }
        }
        (vals, vecs)
    } else {
        let cov = xc * xc.transpose() / tf;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vecs = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
        (vals, vecs)
    };
    (values, canonical_signs(vectors))
}

/// Flips each column so its largest-magnitude entry is positive.
fn canonical_signs(mut v: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in v.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    v
}

/// Fits a whitening transform to the columns of `x` (D×T).
///
/// Fails when `T <= d`. When the covariance has rank below `d`, the retained
/// dimension is reduced to the rank and a warning is logged.
pub fn fit_whitening(
    x: &DMatrix<f64>,
    d: usize,
    reg: Regularization,
) -> Result<WhiteningTransform> {
    let (dim, t) = x.shape();
    if d == 0 || d > dim {
        return Err(Error::invalid(format!(
            "target dimension {d} must lie in 1..={dim}"
        )));
    }
    if t <= d {
        return Err(Error::invalid(format!(
            "need more than {d} samples to whiten, got {t}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("whitening input"));
    }
    let (mean, xc) = centered(x);
    let (values, vectors) = covariance_eigen(&xc, dim > t);
    let total_variance: f64 = values.iter().sum();
    let largest = values.first().copied().unwrap_or(0.0);
    if !(largest > 0.0) {
        return Err(Error::invalid("data have zero variance"));
    }
    let rank = values
        .iter()
        .take_while(|l| **l > RANK_TOL * largest)
        .count();
    let keep = if rank < d {
        warn!("covariance rank {rank} is below the requested dimension {d}; keeping {rank}");
        rank
    } else {
        d
    };
    let eps = match reg {
        Regularization::Absolute(e) => e,
        Regularization::RelativeToMax(r) => r * largest,
    };
    WhiteningTransform::from_parts(
        mean,
        vectors.columns(0, keep).into_owned(),
        DVector::from_iterator(keep, values.into_iter().take(keep)),
        eps,
        total_variance,
    )
}

/// Renders a whitened-space direction as a patch image: dewhitened (without
/// the mean), reshaped to `patch_size`×`patch_size`×3 and affinely rescaled
/// so its extremes map to 0 and 1.
pub fn feature_image(
    tf: &WhiteningTransform,
    direction: &[f64],
    patch_size: usize,
) -> Result<Image> {
    let v = tf.dewhiten_direction(direction)?;
    let lo = v.min();
    let hi = v.max();
    let span = hi - lo;
    let scaled: Vec<f64> = if span > 0.0 {
        v.iter()
            .map(|x| ((x - lo) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.5; v.len()]
    };
    Image::from_patch_vector(&scaled, patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn covariance(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (m, c) = centered(y);
        let t = y.ncols() as f64;
        (m, &c * c.transpose() / t)
    }

    #[test]
    fn whitened_training_data_has_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = gaussian(&mut rng, 6, 6);
        let x = &mix * gaussian(&mut rng, 6, 3000) + DMatrix::from_element(6, 3000, 2.0);
        let tf = fit_whitening(&x, 4, Regularization::Absolute(0.0)).unwrap();
        let y = tf.whiten_all(&x).unwrap();
        let (mean, cov) = covariance(&y);
        assert!(mean.amax() < 1e-10);
        assert!((cov - DMatrix::identity(4, 4)).amax() < 1e-8);
        let b = tf.basis();
        assert!((b.transpose() * b - DMatrix::identity(4, 4)).amax() < 1e-10);
        assert!(tf.eigenvalues().as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn already_white_data_maps_to_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = gaussian(&mut rng, 3, 2000);
        // Make the sample exactly white first.
        let pre = fit_whitening(&x0, 3, Regularization::Absolute(0.0)).unwrap();
        let x = pre.whiten_all(&x0).unwrap();
        let tf = fit_whitening(&x, 3, Regularization::Absolute(0.0)).unwrap();
        assert!(tf.eigenvalues().iter().all(|l| (l - 1.0).abs() < 1e-8));
        let y = tf.whiten_all(&x).unwrap();
        let (_, cov) = covariance(&y);
        assert!((cov - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn rank_one_data_on_a_line() {
        let x = DMatrix::from_fn(2, 50, |r, c| {
            (c as f64 - 20.0) * if r == 0 { 1.0 } else { 2.0 }
        });
        let tf = fit_whitening(&x, 1, Regularization::Absolute(0.0)).unwrap();
        assert!((tf.variance_captured() - 1.0).abs() < 1e-12);
        // Asking for more than the rank keeps the rank.
        let tf2 = fit_whitening(&x, 2, Regularization::Absolute(0.0)).unwrap();
        assert_eq!(tf2.output_dim(), 1);
    }

    #[test]
    fn hand_built_two_by_two() {
        // Points (±2, 0) and (0, ±1) around mean (1, 1): covariance diag(2, 0.5).
        let x = DMatrix::from_column_slice(2, 4, &[3.0, 1.0, -1.0, 1.0, 1.0, 2.0, 1.0, 0.0]);
        let eps = 0.1;
        let tf = fit_whitening(&x, 2, Regularization::Absolute(eps)).unwrap();
        assert!((tf.mean() - DVector::from_column_slice(&[1.0, 1.0])).amax() < 1e-15);
        assert!((tf.eigenvalues()[0] - 2.0).abs() < 1e-12);
        assert!((tf.eigenvalues()[1] - 0.5).abs() < 1e-12);
        let y = tf.whiten(&[2.0, 3.0]).unwrap();
        // Basis is ±e1, ±e2 with the canonical sign making each pivot positive.
        let expected = [1.0 / (2.0f64 + eps).sqrt(), 2.0 / (0.5f64 + eps).sqrt()];
        assert!((y[0] - expected[0]).abs() < 1e-12 && (y[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn mean_whitens_to_zero_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(&mut rng, 5, 400);
        let tf = fit_whitening(&x, 3, Regularization::Absolute(0.0)).unwrap();
        assert!(tf.whiten(tf.mean().as_slice()).unwrap().amax() < 1e-12);
        let y = [0.3, -1.1, 2.0];
        let back = tf.whiten(tf.dewhiten(&y).unwrap().as_slice()).unwrap();
        assert!((back - DVector::from_column_slice(&y)).amax() < 1e-10);
        // A point inside the retained subspace survives the full round trip.
        let p = tf.dewhiten(&y).unwrap();
        let p2 = tf
            .dewhiten(tf.whiten(p.as_slice()).unwrap().as_slice())
            .unwrap();
        assert!((p - p2).amax() < 1e-10);
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&mut rng, 40, 25);
        let (_, xc) = centered(&x);
        let (va, ba) = covariance_eigen(&xc, false);
        let (vb, bb) = covariance_eigen(&xc, true);
        for j in 0..10 {
            assert!((va[j] - vb[j]).abs() < 1e-8);
            assert!((ba.column(j) - bb.column(j)).amax() < 1e-8);
        }
        // fit_whitening takes the Gram route here since D > T.
        let tf = fit_whitening(&x, 10, Regularization::Absolute(0.0)).unwrap();
        let y = tf.whiten_all(&x).unwrap();
        let (_, cov) = covariance(&y);
        assert!((cov - DMatrix::identity(10, 10)).amax() < 1e-8);
    }

    #[test]
    fn variance_capture_is_monotone_in_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, 6, 300);
        let caps: Vec<f64> = (1..=6)
            .map(|d| {
                fit_whitening(&x, d, Regularization::default())
                    .unwrap()
                    .variance_captured()
            })
            .collect();
        assert!(caps.windows(2).all(|w| w[1] >= w[0]));
        assert!((caps[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let x = DMatrix::from_element(3, 3, 1.0);
        assert!(fit_whitening(&x, 3, Regularization::default()).is_err());
        assert!(fit_whitening(&x, 0, Regularization::default()).is_err());
        let x = DMatrix::from_element(3, 10, 1.0);
        assert!(fit_whitening(&x, 2, Regularization::default()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tf = fit_whitening(&gaussian(&mut rng, 3, 20), 2, Regularization::default()).unwrap();
        assert!(tf.whiten(&[1.0]).is_err());
        assert!(tf.dewhiten(&[1.0]).is_err());
    }

    #[test]
    fn feature_image_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(&mut rng, 12, 200);
        let tf = fit_whitening(&x, 4, Regularization::default()).unwrap();
        let img = feature_image(&tf, &[0.0, 1.0, -0.5, 0.2], 2).unwrap();
        let px = img.pixels();
        let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
