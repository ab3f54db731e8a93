use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::eval::{ComponentEval, ModelEval};
use super::mog::{mog_logpdf, MogSource};
use crate::error::{Error, Result};
use crate::manifold::ObliqueMatrix;

/// One square, noiseless ICA model: `x = A s` with independent MoG sources.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaComponent {
    mixing: ObliqueMatrix,
    sources: Vec<MogSource>,
}

impl IcaComponent {
    pub fn new(mixing: ObliqueMatrix, sources: Vec<MogSource>) -> Result<Self> {
        if mixing.nrows() != mixing.ncols() {
            return Err(Error::shape(
                format!("square mixing matrix ({0}x{0})", mixing.nrows()),
                format!("{}x{}", mixing.nrows(), mixing.ncols()),
            ));
        }
        if sources.len() != mixing.ncols() {
            return Err(Error::shape(
                format!("{} sources", mixing.ncols()),
                sources.len(),
            ));
        }
        // Rejects singular mixing matrices up front.
        ComponentEval::new(mixing.as_matrix(), &sources)?;
        Ok(IcaComponent { mixing, sources })
    }

    pub fn mixing(&self) -> &ObliqueMatrix {
        &self.mixing
    }

    pub fn sources(&self) -> &[MogSource] {
        &self.sources
    }

    /// Data dimension M (= number of sources L).
    pub fn dim(&self) -> usize {
        self.mixing.nrows()
    }

    /// `A⁻¹`.
    pub fn unmixing_matrix(&self) -> Result<DMatrix<f64>> {
        Ok(ComponentEval::new(self.mixing.as_matrix(), &self.sources)?.unmixing)
    }

    /// Source coordinates `A⁻¹ x`.
    pub fn unmix(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(self.dim(), x.len()));
        }
        let eval = ComponentEval::new(self.mixing.as_matrix(), &self.sources)?;
        Ok(&eval.unmixing * DVector::from_column_slice(x))
    }

    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        component_loglik(self, x)
    }
}

/// A K-component mixture of ICA models with learned component priors.
#[derive(Debug, Clone, PartialEq)]
pub struct MoicaModel {
    components: Vec<IcaComponent>,
    priors: Vec<f64>,
}

impl MoicaModel {
    pub fn new(components: Vec<IcaComponent>, priors: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("a model needs at least one component"));
        }
        if priors.len() != components.len() {
            return Err(Error::shape(
                format!("{} priors", components.len()),
                priors.len(),
            ));
        }
        if priors.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("component priors must be nonnegative"));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "component priors sum to {total}, not 1"
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("all components must share M and L"));
        }
        Ok(MoicaModel { components, priors })
    }

    pub fn components(&self) -> &[IcaComponent] {
        &self.components
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// The same model with its priors replaced by the uniform distribution.
    pub fn with_uniform_priors(&self) -> Self {
        let k = self.components.len();
        MoicaModel {
            components: self.components.clone(),
            priors: vec![1.0 / k as f64; k],
        }
    }

    pub(crate) fn evaluator(&self) -> Result<ModelEval> {
        let sources: Vec<Vec<MogSource>> =
            self.components.iter().map(|c| c.sources.clone()).collect();
        ModelEval::new(
            self.components.iter().map(|c| c.mixing.as_matrix()),
            &sources,
            &self.priors,
        )
    }
}

/// Posteriors over the latent indices.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// T×K posterior over components.
    pub component_post: DMatrix<f64>,
    /// `gaussian_post[k][i]` is the T×m_i posterior over the Gaussians of
    /// source i in component k, evaluated at `s = A_k⁻¹ x`.
    pub gaussian_post: Vec<Vec<DMatrix<f64>>>,
}

impl Responsibilities {
    /// Index of the most probable component for each datum (ties to the lower index).
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.component_post.nrows())
            .map(|t| argmax(self.component_post.row(t).iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// `Σ_i log p_i(s_i)` over the sources of `comp`.
pub fn source_vector_logpdf(comp: &IcaComponent, s: &[f64]) -> Result<f64> {
    if s.len() != comp.sources.len() {
        return Err(Error::shape(comp.sources.len(), s.len()));
    }
    Ok(comp
        .sources
        .iter()
        .zip(s)
        .map(|(src, v)| mog_logpdf(src, *v))
        .sum())
}

/// `−ln|det A| + log p(A⁻¹ x)`.
pub fn component_loglik(comp: &IcaComponent, x: &[f64]) -> Result<f64> {
    component_loglik_raw(comp.mixing.as_matrix(), &comp.sources, x)
}

/// [`component_loglik`] for an arbitrary square mixing matrix, not
/// necessarily with unit columns.
pub fn component_loglik_raw(
    mixing: &DMatrix<f64>,
    sources: &[MogSource],
    x: &[f64],
) -> Result<f64> {
    let eval = ComponentEval::new(mixing, sources)?;
    if x.len() != mixing.nrows() {
        return Err(Error::shape(mixing.nrows(), x.len()));
    }
    let s = &eval.unmixing * DVector::from_column_slice(x);
    let logp: f64 = sources
        .iter()
        .zip(s.iter())
        .map(|(src, v)| mog_logpdf(src, *v))
        .sum();
    Ok(logp - eval.log_abs_det)
}

/// `Σ_t log Σ_k φ_k p(x_t | k)` for a dataset stored column-wise (M×T).
pub fn model_loglik(model: &MoicaModel, x: &DMatrix<f64>) -> Result<f64> {
    model.evaluator()?.loglik(x)
}

/// T×K matrix of `log p(x_t | k)`.
pub fn component_logliks(model: &MoicaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.evaluator()?.component_logliks(x)
}

pub fn e_step(model: &MoicaModel, x: &DMatrix<f64>) -> Result<Responsibilities> {
    let eval = model.evaluator()?;
    let (component_post, flat) = eval.posteriors(x)?;
    let gaussian_post = eval
        .comps
        .iter()
        .zip(flat)
        .map(|(c, g)| {
            c.offsets()
                .windows(2)
                .map(|w| g.columns(w[0], w[1] - w[0]).into_owned())
                .collect()
        })
        .collect();
    Ok(Responsibilities {
        component_post,
        gaussian_post,
    })
}

/// Component posterior `p(k | x_t)` only.
pub fn component_posteriors(model: &MoicaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(model.evaluator()?.posteriors(x)?.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub dim: usize,
    pub n_components: usize,
    pub gaussians_per_source: Vec<Vec<usize>>,
    pub priors: Vec<f64>,
}

impl MoicaModel {
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            dim: self.dim(),
            n_components: self.n_components(),
            gaussians_per_source: self
                .components
                .iter()
                .map(|c| c.sources.iter().map(MogSource::len).collect())
                .collect(),
            priors: self.priors.clone(),
        }
    }
}
