//! Unconstrained parameterization of a [`MoicaModel`] and the exact gradient
//! of its negative log-likelihood.
//!
//! Mixing matrices are used as they are (the trainer keeps them on the
//! oblique manifold). MoG weights and component priors are softmax logits,
//! and each standard deviation is `σ = σ_floor + exp(ρ)`.

use nalgebra::DMatrix;

use super::eval::{ModelEval, RawGradient};
use super::model::{IcaComponent, MoicaModel};
use super::mog::{MogSource, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::manifold::ObliqueMatrix;

const LOG_TINY: f64 = -690.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    /// ρ in `σ = σ_floor + exp(ρ)`.
    pub log_scales: Vec<f64>,
}

impl SourceParams {
    pub fn from_source(src: &MogSource) -> Self {
        SourceParams {
            logits: src.weights().iter().map(|w| w.ln().max(LOG_TINY)).collect(),
            means: src.means().to_vec(),
            log_scales: src
                .stdevs()
                .iter()
                .map(|s| (s - SIGMA_FLOOR).ln().max(LOG_TINY))
                .collect(),
        }
    }

    pub fn to_source(&self) -> Result<MogSource> {
        MogSource::new(
            softmax(&self.logits),
            self.means.clone(),
            self.log_scales
                .iter()
                .map(|r| SIGMA_FLOOR + r.exp())
                .collect(),
        )
    }

    fn len(&self) -> usize {
        self.logits.len()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    super::eval::softmax_in_place(&mut v);
    v
}

/// All model parameters in unconstrained form.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mixing: Vec<DMatrix<f64>>,
    pub sources: Vec<Vec<SourceParams>>,
    pub prior_logits: Vec<f64>,
}

/// Gradient of the negative log-likelihood, laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub mixing: Vec<DMatrix<f64>>,
    pub sources: Vec<Vec<SourceParams>>,
    pub prior_logits: Vec<f64>,
}

impl ModelParams {
    pub fn from_model(model: &MoicaModel) -> Self {
        ModelParams {
            mixing: model
                .components()
                .iter()
                .map(|c| c.mixing().as_matrix().clone())
                .collect(),
            sources: model
                .components()
                .iter()
                .map(|c| c.sources().iter().map(SourceParams::from_source).collect())
                .collect(),
            prior_logits: model
                .priors()
                .iter()
                .map(|p| p.ln().max(LOG_TINY))
                .collect(),
        }
    }

    /// Rebuilds a model; mixing matrices must already have unit columns.
    pub fn to_model(&self) -> Result<MoicaModel> {
        let components = self
            .mixing
            .iter()
            .zip(&self.sources)
            .map(|(a, srcs)| {
                let sources = srcs
                    .iter()
                    .map(SourceParams::to_source)
                    .collect::<Result<_>>()?;
                IcaComponent::new(ObliqueMatrix::new(a.clone())?, sources)
            })
            .collect::<Result<_>>()?;
        MoicaModel::new(components, softmax(&self.prior_logits))
    }

    fn evaluator(&self) -> Result<ModelEval> {
        let sources: Vec<Vec<MogSource>> = self
            .sources
            .iter()
            .map(|srcs| srcs.iter().map(SourceParams::to_source).collect())
            .collect::<Result<_>>()?;
        ModelEval::new(self.mixing.iter(), &sources, &softmax(&self.prior_logits))
    }

    pub fn negative_loglik(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(-self.evaluator()?.loglik(x)?)
    }

    pub fn objective_and_gradient(&self, x: &DMatrix<f64>) -> Result<(f64, ModelGradient)> {
        let eval = self.evaluator()?;
        let (value, raw) = eval.nll_and_gradient(x)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("negative log-likelihood"));
        }
        Ok((value, self.shape_gradient(&eval, raw)))
    }

    fn shape_gradient(&self, eval: &ModelEval, raw: RawGradient) -> ModelGradient {
        let split =
            |flat: &[f64], offsets: &[usize], i: usize| flat[offsets[i]..offsets[i + 1]].to_vec();
        let sources = eval
            .comps
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let off = c.offsets();
                (0..off.len() - 1)
                    .map(|i| SourceParams {
                        logits: split(&raw.logits[k], off, i),
                        means: split(&raw.means[k], off, i),
                        log_scales: split(&raw.log_scales[k], off, i),
                    })
                    .collect()
            })
            .collect();
        ModelGradient {
            mixing: raw.mixing,
            sources,
            prior_logits: raw.prior_logits,
        }
    }

    /// Number of Euclidean (non-mixing) parameters.
    pub fn euclidean_len(&self) -> usize {
        self.sources
            .iter()
            .flatten()
            .map(|s| 3 * s.len())
            .sum::<usize>()
            + self.prior_logits.len()
    }

    /// Flattens MoG and prior parameters: per component, per source, the
    /// logits, means and log-scales, followed by the prior logits.
    pub fn euclidean_vector(&self) -> Vec<f64> {
        flatten(&self.sources, &self.prior_logits)
    }

    pub fn set_euclidean(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.euclidean_len() {
            return Err(Error::shape(self.euclidean_len(), v.len()));
        }
        let mut it = v.iter().copied();
        for src in self.sources.iter_mut().flatten() {
            for field in [&mut src.logits, &mut src.means, &mut src.log_scales] {
                for x in field.iter_mut() {
                    *x = it.next().unwrap();
                }
            }
        }
        for x in self.prior_logits.iter_mut() {
            *x = it.next().unwrap();
        }
        Ok(())
    }
}

impl ModelGradient {
    /// Flattened in the same order as [`ModelParams::euclidean_vector`].
    pub fn euclidean_vector(&self) -> Vec<f64> {
        flatten(&self.sources, &self.prior_logits)
    }

    /// Concatenated column-major mixing gradients.
    pub fn mixing_vector(&self) -> Vec<f64> {
        self.mixing
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        let e = self.euclidean_vector();
        let a = self.mixing_vector();
        (e.iter().chain(&a).map(|v| v * v).sum::<f64>()).sqrt()
    }
}

fn flatten(sources: &[Vec<SourceParams>], priors: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for src in sources.iter().flatten() {
        out.extend_from_slice(&src.logits);
        out.extend_from_slice(&src.means);
        out.extend_from_slice(&src.log_scales);
    }
    out.extend_from_slice(priors);
    out
}

/// Negative log-likelihood of `x` under `model` and its gradient with
/// respect to every parameter group.
pub fn objective_and_gradient(
    model: &MoicaModel,
    x: &DMatrix<f64>,
) -> Result<(f64, ModelGradient)> {
    ModelParams::from_model(model).objective_and_gradient(x)
}
