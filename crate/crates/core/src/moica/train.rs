//! Maximum-likelihood training by block-alternating L-BFGS.
//!
//! Each round runs Riemannian L-BFGS over all mixing matrices jointly (a
//! product of oblique manifolds) with the MoG and prior parameters held
//! fixed, then Euclidean L-BFGS over those parameters with the mixing
//! matrices held fixed. Minibatch epochs come first; full-batch refinement
//! rounds follow. Every block starts with an empty L-BFGS history.

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{IcaComponent, MoicaModel};
use super::mog::MogSource;
use super::objective::ModelParams;
use crate::error::{Error, Result};
use crate::manifold::{
    minimize_on, Euclidean, LbfgsConfig, Manifold, Minimum, ObliqueMatrix, ProductOblique,
    Termination, COLUMN_NORM_TOL,
};
use crate::patches::minibatches;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_components: usize,
    pub gaussians_per_source: usize,
    /// Settings for every L-BFGS block; `max_iters` is the per-block budget.
    pub lbfgs: LbfgsConfig,
    /// 0 disables the minibatch phase.
    pub minibatch_size: usize,
    pub epochs: usize,
    pub refine_rounds: usize,
    /// Refinement stops once a round lowers the mean NLL by less than this.
    pub refine_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_components: 2,
            gaussians_per_source: 3,
            lbfgs: LbfgsConfig {
                max_iters: 5,
                grad_tol: 1e-7,
                ..LbfgsConfig::default()
            },
            minibatch_size: 5000,
            epochs: 2,
            refine_rounds: 30,
            refine_tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::invalid("number of components must be at least 1"));
        }
        if self.gaussians_per_source == 0 {
            return Err(Error::invalid("each source needs at least one Gaussian"));
        }
        if !(self.refine_tol >= 0.0) {
            return Err(Error::invalid("refine_tol must be nonnegative"));
        }
        self.lbfgs.validate()
    }
}

/// Diagnostics collected during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean negative log-likelihood of each minibatch after its blocks ran.
    pub minibatch_values: Vec<f64>,
    /// Mean negative log-likelihood of the full dataset at every accepted
    /// iterate of the refinement phase, in order.
    pub refine_values: Vec<f64>,
    /// Norm of the full mean-NLL gradient after each refinement round.
    pub grad_norms: Vec<f64>,
    /// Largest column-norm deviation over every mixing iterate visited.
    pub max_column_deviation: f64,
    /// Iterates whose deviation reached [`COLUMN_NORM_TOL`].
    pub column_violations: usize,
    pub iterates_checked: usize,
    /// Accepted steps violating the strong Wolfe conditions.
    pub wolfe_violations: usize,
    pub line_search_failures: usize,
    /// L-BFGS blocks (minibatch or full batch) whose accepted-iterate trace
    /// ever increased.
    pub nonmonotone_blocks: usize,
    pub blocks_run: usize,
    pub insufficient_data: bool,
}

impl TrainTrace {
    pub fn final_value(&self) -> Option<f64> {
        self.refine_values.last().copied()
    }

    /// Whether the refinement trace never increases.
    pub fn refine_is_monotone(&self) -> bool {
        self.refine_values.windows(2).all(|w| w[1] <= w[0])
    }

    /// Refinement trace and every individual block trace are non-increasing.
    pub fn is_monotone(&self) -> bool {
        self.refine_is_monotone() && self.nonmonotone_blocks == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MoicaModel,
    pub trace: TrainTrace,
}

/// Initial model: Gaussian random mixing matrices with normalized columns
/// (a distinct stream per component), quantile-initialized MoG sources and
/// uniform priors.
pub fn init_model(dim: usize, cfg: &TrainConfig) -> Result<MoicaModel> {
    cfg.validate()?;
    let k = cfg.n_components;
    let source = MogSource::quantile_init(cfg.gaussians_per_source)?;
    let components = (0..k)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(j as u64 + 1);
            // A Gaussian draw is almost surely invertible; retry anyway.
            let mut last = None;
            for _ in 0..8 {
                let a = ObliqueMatrix::random(dim, dim, &mut rng)?;
                match IcaComponent::new(a, vec![source.clone(); dim]) {
                    Ok(c) => return Ok(c),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.unwrap())
        })
        .collect::<Result<_>>()?;
    MoicaModel::new(components, vec![1.0 / k as f64; k])
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    trace: TrainTrace,
}

impl Trainer<'_> {
    fn mixing_block(
        &mut self,
        params: &mut ModelParams,
        data: &DMatrix<f64>,
    ) -> Result<Minimum<Vec<ObliqueMatrix>>> {
        let n = data.ncols() as f64;
        let x0: Vec<ObliqueMatrix> = params
            .mixing
            .iter()
            .map(|a| ObliqueMatrix::new(a.clone()))
            .collect::<Result<_>>()?;
        let mut scratch = params.clone();
        let mut worst = 0.0f64;
        let mut violations = 0;
        let mut checked = 0;
        let res = minimize_on(
            &ProductOblique,
            |xs: &Vec<ObliqueMatrix>| {
                for (dst, x) in scratch.mixing.iter_mut().zip(xs) {
                    dst.copy_from(x.as_matrix());
                }
                let (v, g) = scratch.objective_and_gradient(data)?;
                Ok((
                    v / n,
                    g.mixing_vector().into_iter().map(|x| x / n).collect(),
                ))
            },
            x0,
            &self.cfg.lbfgs,
            |xs, _| {
                let dev = ProductOblique.constraint_violation(xs);
                checked += 1;
                worst = worst.max(dev);
                if !(dev < COLUMN_NORM_TOL) {
                    violations += 1;
                }
            },
        )?;
        self.trace.max_column_deviation = self.trace.max_column_deviation.max(worst);
        self.trace.column_violations += violations;
        self.trace.iterates_checked += checked;
        for (dst, x) in params.mixing.iter_mut().zip(&res.point) {
            dst.copy_from(x.as_matrix());
        }
        self.audit(&res.termination, &res.steps, &res.trace);
        Ok(res)
    }

    fn euclidean_block(
        &mut self,
        params: &mut ModelParams,
        data: &DMatrix<f64>,
    ) -> Result<Minimum<Vec<f64>>> {
        let n = data.ncols() as f64;
        let mut scratch = params.clone();
        let res = minimize_on(
            &Euclidean,
            |v: &Vec<f64>| {
                scratch.set_euclidean(v)?;
                let (val, g) = scratch.objective_and_gradient(data)?;
                Ok((
                    val / n,
                    g.euclidean_vector().into_iter().map(|x| x / n).collect(),
                ))
            },
            params.euclidean_vector(),
            &self.cfg.lbfgs,
            |_, _| {},
        )?;
        params.set_euclidean(&res.point)?;
        self.audit(&res.termination, &res.steps, &res.trace);
        Ok(res)
    }

    fn audit(
        &mut self,
        termination: &Termination,
        steps: &[crate::manifold::StepRecord],
        values: &[f64],
    ) {
        self.trace.blocks_run += 1;
        if values.windows(2).any(|w| w[1] > w[0]) {
            self.trace.nonmonotone_blocks += 1;
        }
        if *termination == Termination::LineSearchFailed {
            self.trace.line_search_failures += 1;
        }
        let (c1, c2) = (self.cfg.lbfgs.wolfe_c1, self.cfg.lbfgs.wolfe_c2);
        self.trace.wolfe_violations += steps
            .iter()
            .filter(|s| !s.satisfies_strong_wolfe(c1, c2))
            .count();
    }
}

/// Trains a model on the columns of `data` (M×T, ideally whitened).
pub fn train(data: &DMatrix<f64>, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let (dim, t) = data.shape();
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data"));
    }
    let mut trainer = Trainer {
        cfg,
        trace: TrainTrace::default(),
    };
    if t < 10 * cfg.n_components * dim {
        warn!(
            "only {t} samples for K = {}, M = {dim}; at least {} recommended",
            cfg.n_components,
            10 * cfg.n_components * dim
        );
        trainer.trace.insufficient_data = true;
    }

    let mut params = ModelParams::from_model(&init_model(dim, cfg)?);

    if cfg.minibatch_size > 0 && cfg.minibatch_size < t {
        for epoch in 0..cfg.epochs {
            for block in minibatches(t, cfg.minibatch_size, cfg.seed, epoch as u64)? {
                let batch = data.select_columns(&block);
                trainer.mixing_block(&mut params, &batch)?;
                let res = trainer.euclidean_block(&mut params, &batch)?;
                trainer.trace.minibatch_values.push(res.value);
            }
            debug!(
                "epoch {epoch}: last minibatch NLL/T = {:?}",
                trainer.trace.minibatch_values.last()
            );
        }
    }

    for round in 0..cfg.refine_rounds {
        let before = trainer.trace.refine_values.last().copied();
        let a = trainer.mixing_block(&mut params, data)?;
        push_trace(&mut trainer.trace.refine_values, &a.trace);
        let b = trainer.euclidean_block(&mut params, data)?;
        push_trace(&mut trainer.trace.refine_values, &b.trace);
        let (_, g) = params.objective_and_gradient(data)?;
        let mut full: Vec<f64> = g.mixing_vector();
        let pts: Vec<ObliqueMatrix> = params
            .mixing
            .iter()
            .map(|m| ObliqueMatrix::new(m.clone()))
            .collect::<Result<_>>()?;
        ProductOblique.project(&pts, &mut full);
        full.extend(g.euclidean_vector());
        let gnorm = full.iter().map(|v| v * v).sum::<f64>().sqrt() / t as f64;
        trainer.trace.grad_norms.push(gnorm);
        debug!(
            "round {round}: NLL/T = {:.6}, |grad| = {gnorm:.3e}",
            b.value
        );
        let gain = before.unwrap_or(a.trace[0]) - b.value;
        if (a.iterations == 0 && b.iterations == 0) || gain < cfg.refine_tol {
            debug!("refinement stopped after round {round} (gain {gain:.3e})");
            break;
        }
    }
    if let Some(v) = trainer.trace.final_value() {
        info!("training finished: mean NLL = {v:.6}");
    }
    Ok(TrainedModel {
        model: params.to_model()?,
        trace: trainer.trace,
    })
}

fn push_trace(dst: &mut Vec<f64>, values: &[f64]) {
    // Each block starts where the previous one stopped; skip the repeat.
    let skip = usize::from(dst.last().is_some_and(|last| values.first() == Some(last)));
    dst.extend_from_slice(&values[skip..]);
}
