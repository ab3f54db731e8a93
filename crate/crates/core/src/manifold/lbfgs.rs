//! Riemannian limited-memory BFGS with a strong-Wolfe line search.
//!
//! The driver is generic over [`Manifold`]: search directions come from the
//! usual two-loop recursion over stored `(s, y)` pairs, the step is taken with
//! the space's retraction, and stored pairs are carried to each new iterate by
//! projecting them onto its tangent space.
//!
//! The line search works on `φ(t) = f(R_x(t·d))` with the exact derivative
//! `φ'(t) = ⟨∇f(R_x(t·d)), d/dt R_x(t·d)⟩`, so the Wolfe conditions it enforces
//! are those of a one-dimensional problem along the retraction curve.

use std::collections::VecDeque;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::oblique::ObliqueMatrix;
use super::space::{Manifold, Oblique};
use crate::error::{Error, Result};

/// Pairs with `⟨s, y⟩ ≤ CURVATURE_GUARD·‖s‖‖y‖` are discarded.
pub const CURVATURE_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of stored `(s, y)` pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the Riemannian gradient norm drops to this value.
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_linesearch: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iters: 100,
            grad_tol: 1e-6,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_linesearch: 30,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_iters == 0 || self.max_linesearch == 0 {
            return Err(Error::invalid(
                "memory, max_iters and max_linesearch must be positive",
            ));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::invalid("grad_tol must be positive"));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::invalid("Wolfe constants need 0 < c1 < c2 < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The line search ran out of evaluations; the best iterate is returned.
    LineSearchFailed,
}

/// One accepted step, kept so callers can audit the Wolfe conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: f64,
    pub value_before: f64,
    pub value_after: f64,
    /// φ'(0)
    pub slope_before: f64,
    /// φ'(step)
    pub slope_after: f64,
}

impl StepRecord {
    pub fn satisfies_strong_wolfe(&self, c1: f64, c2: f64) -> bool {
        self.value_after <= self.value_before + c1 * self.step * self.slope_before
            && self.slope_after.abs() <= -c2 * self.slope_before
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<P> {
    pub point: P,
    pub value: f64,
    /// Objective value at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        History {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > CURVATURE_GUARD * norm(&s) * norm(&y)) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    fn transport<M: Manifold>(&mut self, space: &M, x: &M::Point) {
        for (s, y, rho) in self.pairs.iter_mut() {
            space.project(x, s);
            space.project(x, y);
            *rho = 1.0 / dot(s, y);
        }
        // Projection can destroy positive curvature; drop such pairs.
        self.pairs.retain(|(s, y, rho)| {
            rho.is_finite() && dot(s, y) > CURVATURE_GUARD * norm(s) * norm(y)
        });
    }

    /// Returns `−H·g` from the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

struct Trial<P> {
    step: f64,
    point: P,
    value: f64,
    raw_grad: Vec<f64>,
    slope: f64,
}

/// Evaluates the objective at a retracted trial point. Points where the
/// retraction degenerates or the objective is singular or non-finite are
/// reported as `None` so the line search can back off.
fn probe<M, F>(
    space: &M,
    objective: &mut F,
    x: &M::Point,
    d: &[f64],
    step: f64,
) -> Result<Option<Trial<M::Point>>>
where
    M: Manifold,
    F: FnMut(&M::Point) -> Result<(f64, Vec<f64>)>,
{
    let point = match space.retract(x, d, step) {
        Ok(p) => p,
        Err(Error::DegenerateStep { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (value, raw_grad) = match objective(&point) {
        Ok(vg) => vg,
        Err(Error::Singular(_)) | Err(Error::NonFinite(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !value.is_finite() || raw_grad.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    let mut vel = vec![0.0; d.len()];
    space.retract_velocity(x, d, step, &mut vel);
    let slope = dot(&raw_grad, &vel);
    Ok(Some(Trial {
        step,
        point,
        value,
        raw_grad,
        slope,
    }))
}

/// Safeguarded minimizer of the interpolating quadratic (or cubic when both
/// slopes are known) on `[lo, hi]`.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, Option<f64>)) -> f64 {
    let (a, fa, da) = lo;
    let (b, fb, db) = hi;
    let width = b - a;
    let guard_lo = a + 0.1 * width;
    let guard_hi = b - 0.1 * width;
    let clamp = |t: f64| {
        let (l, h) = if guard_lo < guard_hi {
            (guard_lo, guard_hi)
        } else {
            (guard_hi, guard_lo)
        };
        if t.is_finite() {
            t.clamp(l, h)
        } else {
            0.5 * (a + b)
        }
    };
    if !fb.is_finite() {
        return 0.5 * (a + b);
    }
    if let Some(db) = db {
        let d1 = da + db - 3.0 * (fa - fb) / (a - b);
        let disc = d1 * d1 - da * db;
        if disc >= 0.0 {
            let d2 = (b - a).signum() * disc.sqrt();
            let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
            return clamp(t);
        }
    }
    let denom = 2.0 * (fb - fa - da * width);
    if denom > 0.0 {
        clamp(a - da * width * width / denom)
    } else {
        0.5 * (a + b)
    }
}

struct LineSearch<'a> {
    cfg: &'a LbfgsConfig,
    f0: f64,
    d0: f64,
    evals: usize,
}

impl LineSearch<'_> {
    fn armijo(&self, t: f64, f: f64) -> bool {
        f <= self.f0 + self.cfg.wolfe_c1 * t * self.d0
    }

    fn curvature(&self, slope: f64) -> bool {
        slope.abs() <= -self.cfg.wolfe_c2 * self.d0
    }

    fn run<M, F>(
        &mut self,
        space: &M,
        objective: &mut F,
        x: &M::Point,
        d: &[f64],
        t0: f64,
    ) -> Result<Option<Trial<M::Point>>>
    where
        M: Manifold,
        F: FnMut(&M::Point) -> Result<(f64, Vec<f64>)>,
    {
        // (step, value, slope) of the previous trial; starts at t = 0.
        let mut prev = (0.0, self.f0, self.d0);
        let mut t = t0;
        let mut first = true;
        while self.evals < self.cfg.max_linesearch {
            self.evals += 1;
            let trial = probe(space, objective, x, d, t)?;
            let Some(trial) = trial else {
                return self.zoom(space, objective, x, d, prev, (t, f64::INFINITY, None));
            };
            if !self.armijo(t, trial.value) || (!first && trial.value >= prev.1) {
                let hi = (t, trial.value, Some(trial.slope));
                return self.zoom(space, objective, x, d, prev, hi);
            }
            if self.curvature(trial.slope) {
                return Ok(Some(trial));
            }
            if trial.slope >= 0.0 {
                let lo = (trial.step, trial.value, trial.slope);
                let hi = (prev.0, prev.1, Some(prev.2));
                return self.zoom(space, objective, x, d, lo, hi);
            }
            prev = (t, trial.value, trial.slope);
            t *= 2.0;
            first = false;
        }
        Ok(None)
    }

    fn zoom<M, F>(
        &mut self,
        space: &M,
        objective: &mut F,
        x: &M::Point,
        d: &[f64],
        mut lo: (f64, f64, f64),
        mut hi: (f64, f64, Option<f64>),
    ) -> Result<Option<Trial<M::Point>>>
    where
        M: Manifold,
        F: FnMut(&M::Point) -> Result<(f64, Vec<f64>)>,
    {
        while self.evals < self.cfg.max_linesearch {
            if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
                break;
            }
            let t = interpolate(lo, hi);
            self.evals += 1;
            match probe(space, objective, x, d, t)? {
                None => hi = (t, f64::INFINITY, None),
                Some(trial) => {
                    if !self.armijo(t, trial.value) || trial.value >= lo.1 {
                        hi = (t, trial.value, Some(trial.slope));
                    } else {
                        if self.curvature(trial.slope) {
                            return Ok(Some(trial));
                        }
                        if trial.slope * (hi.0 - lo.0) >= 0.0 {
                            hi = (lo.0, lo.1, Some(lo.2));
                        }
                        lo = (t, trial.value, trial.slope);
                    }
                }
            }
        }
        Ok(None)
    }
}

/// Minimizes `objective` over `space` starting from `x0`.
///
/// `objective` returns the value and the raw (ambient, Euclidean) gradient;
/// the driver projects it. `observe` is called with every accepted iterate,
/// including `x0`.
pub fn minimize_on<M, F, O>(
    space: &M,
    mut objective: F,
    x0: M::Point,
    cfg: &LbfgsConfig,
    mut observe: O,
) -> Result<Minimum<M::Point>>
where
    M: Manifold,
    F: FnMut(&M::Point) -> Result<(f64, Vec<f64>)>,
    O: FnMut(&M::Point, f64),
{
    cfg.validate()?;
    let mut x = x0;
    let (mut value, mut grad) = objective(&x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective value"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective gradient"));
    }
    if grad.len() != space.ambient_dim(&x) {
        return Err(Error::shape(space.ambient_dim(&x), grad.len()));
    }
    space.project(&x, &mut grad);
    observe(&x, value);

    let mut history = History::new(cfg.memory);
    let mut trace = vec![value];
    let mut steps = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let gnorm = norm(&grad);
        if gnorm <= cfg.grad_tol {
            termination = Termination::Converged;
            break;
        }

        let mut d = history.direction(&grad);
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            history.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }

        let mut search = LineSearch {
            cfg,
            f0: value,
            d0: slope,
            evals: 0,
        };
        let t0 = if history.pairs.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let mut found = search.run(space, &mut objective, &x, &d, t0)?;
        if found.is_none() && !history.pairs.is_empty() {
            debug!("line search failed along quasi-Newton direction; retrying steepest descent");
            history.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
            search = LineSearch {
                cfg,
                f0: value,
                d0: slope,
                evals: 0,
            };
            found = search.run(space, &mut objective, &x, &d, (1.0 / gnorm).min(1.0))?;
        }
        let Some(trial) = found else {
            warn!(
                "line search failed after {} evaluations (|grad| = {gnorm:e})",
                cfg.max_linesearch
            );
            termination = Termination::LineSearchFailed;
            break;
        };

        let mut new_grad = trial.raw_grad;
        space.project(&trial.point, &mut new_grad);

        let mut s: Vec<f64> = d.iter().map(|v| trial.step * v).collect();
        space.project(&trial.point, &mut s);
        let mut old_grad = grad;
        space.project(&trial.point, &mut old_grad);
        let y: Vec<f64> = new_grad.iter().zip(&old_grad).map(|(a, b)| a - b).collect();

        history.transport(space, &trial.point);
        history.push(s, y);

        steps.push(StepRecord {
            step: trial.step,
            value_before: value,
            value_after: trial.value,
            slope_before: slope,
            slope_after: trial.slope,
        });
        x = trial.point;
        value = trial.value;
        grad = new_grad;
        trace.push(value);
        observe(&x, value);
        iterations += 1;
    }
    if termination == Termination::MaxIterations && norm(&grad) <= cfg.grad_tol {
        termination = Termination::Converged;
    }

    Ok(Minimum {
        point: x,
        value,
        grad_norm: norm(&grad),
        trace,
        steps,
        iterations,
        termination,
    })
}

/// Minimizes over a single oblique manifold. The objective returns the value
/// and the raw Euclidean gradient as a matrix of the same shape as the point.
pub fn minimize<F>(
    mut objective: F,
    x0: ObliqueMatrix,
    cfg: &LbfgsConfig,
) -> Result<Minimum<ObliqueMatrix>>
where
    F: FnMut(&ObliqueMatrix) -> Result<(f64, nalgebra::DMatrix<f64>)>,
{
    minimize_on(
        &Oblique,
        |x: &ObliqueMatrix| objective(x).map(|(v, g)| (v, g.as_slice().to_vec())),
        x0,
        cfg,
        |_, _| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::space::Euclidean;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn distance_objective(
        c: DMatrix<f64>,
    ) -> impl FnMut(&ObliqueMatrix) -> Result<(f64, DMatrix<f64>)> {
        move |x| {
            let diff = x.as_matrix() - &c;
            Ok((diff.norm_squared(), 2.0 * diff))
        }
    }

    #[test]
    fn converges_to_target_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = ObliqueMatrix::random(5, 3, &mut rng).unwrap();
        let x0 = ObliqueMatrix::random(5, 3, &mut rng).unwrap();
        let cfg = LbfgsConfig {
            max_iters: 50,
            grad_tol: 1e-9,
            ..Default::default()
        };
        let res = minimize(distance_objective(c.as_matrix().clone()), x0, &cfg).unwrap();
        assert!(res.value < 1e-10, "value {}", res.value);
        assert!(res.iterations <= 50);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        for s in &res.steps {
            assert!(
                s.satisfies_strong_wolfe(cfg.wolfe_c1, cfg.wolfe_c2),
                "{s:?}"
            );
        }
    }

    #[test]
    fn huge_tolerance_returns_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = ObliqueMatrix::random(3, 3, &mut rng).unwrap();
        let x0 = ObliqueMatrix::random(3, 3, &mut rng).unwrap();
        let cfg = LbfgsConfig {
            grad_tol: 1e12,
            ..Default::default()
        };
        let res = minimize(distance_objective(c.into_matrix()), x0.clone(), &cfg).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.point, x0);
        assert_eq!(res.termination, Termination::Converged);
    }

    #[test]
    fn every_iterate_stays_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = ObliqueMatrix::random(6, 4, &mut rng).unwrap();
        let x0 = ObliqueMatrix::random(6, 4, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        let mut seen = 0;
        let mut obj = distance_objective(c.into_matrix());
        minimize_on(
            &Oblique,
            |x: &ObliqueMatrix| obj(x).map(|(v, g)| (v, g.as_slice().to_vec())),
            x0,
            &LbfgsConfig::default(),
            |x, _| {
                seen += 1;
                worst = worst.max(x.column_norm_deviation());
            },
        )
        .unwrap();
        assert!(seen > 1);
        assert!(worst < 1e-12);
    }

    #[test]
    fn rosenbrock_in_euclidean_space() {
        let f = |p: &Vec<f64>| -> Result<(f64, Vec<f64>)> {
            let (x, y) = (p[0], p[1]);
            let v = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
            let gy = 200.0 * (y - x * x);
            Ok((v, vec![gx, gy]))
        };
        let cfg = LbfgsConfig {
            max_iters: 200,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let res = minimize_on(&Euclidean, f, vec![-1.2, 1.0], &cfg, |_, _| {}).unwrap();
        assert!((res.point[0] - 1.0).abs() < 1e-6 && (res.point[1] - 1.0).abs() < 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let res = minimize_on(
            &Euclidean,
            |_: &Vec<f64>| Ok((f64::NAN, vec![0.0])),
            vec![0.0],
            &LbfgsConfig::default(),
            |_, _| {},
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = LbfgsConfig {
            wolfe_c1: 0.95,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(LbfgsConfig {
            memory: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn curvature_guard_rejects_bad_pairs() {
        let mut h = History::new(3);
        assert!(!h.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(!h.push(vec![1.0, 0.0], vec![0.0, 1.0]));
        assert!(h.push(vec![1.0, 0.0], vec![2.0, 0.0]));
        let d = h.direction(&[4.0, 0.0]);
        assert!((d[0] + 2.0).abs() < 1e-15);
    }
}
