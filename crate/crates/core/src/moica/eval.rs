//! Shared evaluation engine for likelihoods, posteriors and gradients.
//!
//! Data are processed in fixed-size column chunks in parallel; partial results
//! are combined in chunk order so every reduction is deterministic.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use super::mog::{log_sum_exp, MogSource, LN_SQRT_2PI, SIGMA_FLOOR};
use crate::error::{Error, Result};

/// Mixing matrices with an LU pivot of magnitude below this value are
/// treated as singular. With unit columns every pivot is at most 1, so for
/// M = 1 this is a floor on `|det|`.
pub const DET_FLOOR: f64 = 1e-12;

const CHUNK: usize = 256;

pub(crate) struct SourceEval {
    means: Vec<f64>,
    inv_stdevs: Vec<f64>,
    /// ln π_q − ln √(2π) − ln σ_q
    log_norm: Vec<f64>,
    weights: Vec<f64>,
    /// dσ/dρ divided by σ, for σ = σ_floor + e^ρ.
    scale_factor: Vec<f64>,
}

impl SourceEval {
    fn new(src: &MogSource) -> Self {
        SourceEval {
            means: src.means().to_vec(),
            inv_stdevs: src.stdevs().iter().map(|s| 1.0 / s).collect(),
            log_norm: src
                .weights()
                .iter()
                .zip(src.stdevs())
                .map(|(w, s)| w.ln() - LN_SQRT_2PI - s.ln())
                .collect(),
            weights: src.weights().to_vec(),
            scale_factor: src.stdevs().iter().map(|s| (s - SIGMA_FLOOR) / s).collect(),
        }
    }

    fn len(&self) -> usize {
        self.means.len()
    }
}

pub(crate) struct ComponentEval {
    pub(crate) unmixing: DMatrix<f64>,
    pub(crate) log_abs_det: f64,
    sources: Vec<SourceEval>,
    /// Start of each source's block in the flattened (source, gaussian) layout.
    offsets: Vec<usize>,
}

/// LU-based inverse and log|det|, rejecting numerically singular matrices.
pub(crate) fn invert(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !a.is_square() {
        return Err(Error::shape(
            format!("square mixing matrix ({0}x{0})", a.nrows()),
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixing matrix"));
    }
    let lu = a.clone().lu();
    let pivots = lu.u().diagonal();
    let log_abs_det: f64 = pivots.iter().map(|d| d.abs().ln()).sum();
    if !(pivots.amin() >= DET_FLOOR) {
        return Err(Error::Singular(pivots.amin()));
    }
    let inv = lu.try_inverse().ok_or(Error::Singular(0.0))?;
    Ok((inv, log_abs_det))
}

impl ComponentEval {
    pub(crate) fn new(mixing: &DMatrix<f64>, sources: &[MogSource]) -> Result<Self> {
        if sources.len() != mixing.ncols() {
            return Err(Error::shape(
                format!("{} sources", mixing.ncols()),
                sources.len(),
            ));
        }
        let (unmixing, log_abs_det) = invert(mixing)?;
        let mut offsets = Vec::with_capacity(sources.len() + 1);
        let mut acc = 0;
        for s in sources {
            offsets.push(acc);
            acc += s.len();
        }
        offsets.push(acc);
        Ok(ComponentEval {
            unmixing,
            log_abs_det,
            sources: sources.iter().map(SourceEval::new).collect(),
            offsets,
        })
    }

    pub(crate) fn n_gauss(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Log-density of source vector `s` (one column of `S`); fills the
    /// Gaussian responsibilities into `gamma` (flattened layout).
    fn source_loglik(&self, s: &[f64], gamma: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (i, src) in self.sources.iter().enumerate() {
            let g = &mut gamma[self.offsets[i]..self.offsets[i + 1]];
            let mut max = f64::NEG_INFINITY;
            for q in 0..src.len() {
                let z = (s[i] - src.means[q]) * src.inv_stdevs[q];
                g[q] = src.log_norm[q] - 0.5 * z * z;
                max = max.max(g[q]);
            }
            let mut sum = 0.0;
            for v in g.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in g.iter_mut() {
                *v /= sum;
            }
            total += max + sum.ln();
        }
        total
    }
}

pub(crate) struct ModelEval {
    pub(crate) comps: Vec<ComponentEval>,
    log_priors: Vec<f64>,
    priors: Vec<f64>,
    dim: usize,
}

impl ModelEval {
    pub(crate) fn new<'a>(
        mixings: impl IntoIterator<Item = &'a DMatrix<f64>>,
        sources: &[Vec<MogSource>],
        priors: &[f64],
    ) -> Result<Self> {
        let comps: Vec<ComponentEval> = mixings
            .into_iter()
            .zip(sources)
            .map(|(a, s)| ComponentEval::new(a, s))
            .collect::<Result<_>>()?;
        if comps.is_empty() || comps.len() != priors.len() || comps.len() != sources.len() {
            return Err(Error::shape(
                format!("{} priors", comps.len()),
                priors.len(),
            ));
        }
        let dim = comps[0].unmixing.nrows();
        if comps.iter().any(|c| c.unmixing.nrows() != dim) {
            return Err(Error::invalid(
                "all components must share the data dimension",
            ));
        }
        Ok(ModelEval {
            comps,
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            priors: priors.to_vec(),
            dim,
        })
    }

    fn check_data(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.nrows() != self.dim {
            return Err(Error::shape(
                format!("data vectors of length {}", self.dim),
                x.nrows(),
            ));
        }
        Ok(())
    }

    fn unmix(&self, chunk: &DMatrixView<f64>) -> Vec<DMatrix<f64>> {
        self.comps.iter().map(|c| &c.unmixing * chunk).collect()
    }

    /// Per-component log-likelihoods for every datum (T×K).
    pub(crate) fn component_logliks(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_data(x)?;
        let k = self.comps.len();
        let parts: Vec<(usize, DMatrix<f64>)> = chunk_ranges(x.ncols())
            .into_par_iter()
            .map(|(start, len)| {
                let view = x.columns(start, len);
                let srcs = self.unmix(&view);
                let mut out = DMatrix::zeros(len, k);
                let mut gamma: Vec<Vec<f64>> =
                    self.comps.iter().map(|c| vec![0.0; c.n_gauss()]).collect();
                for t in 0..len {
                    for (j, c) in self.comps.iter().enumerate() {
                        let s = srcs[j].column(t);
                        out[(t, j)] = c.source_loglik(s.as_slice(), &mut gamma[j]) - c.log_abs_det;
                    }
                }
                (start, out)
            })
            .collect();
        let mut all = DMatrix::zeros(x.ncols(), k);
        for (start, part) in parts {
            all.rows_mut(start, part.nrows()).copy_from(&part);
        }
        Ok(all)
    }

    pub(crate) fn loglik(&self, x: &DMatrix<f64>) -> Result<f64> {
        let comp = self.component_logliks(x)?;
        let mut terms = vec![0.0; self.comps.len()];
        let mut total = 0.0;
        for t in 0..comp.nrows() {
            for (j, v) in terms.iter_mut().enumerate() {
                *v = self.log_priors[j] + comp[(t, j)];
            }
            total += log_sum_exp(&terms);
        }
        Ok(total)
    }

    /// Posterior over components (T×K) and, per component, the Gaussian
    /// responsibilities in the flattened layout (T × n_gauss).
    pub(crate) fn posteriors(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_data(x)?;
        let k = self.comps.len();
        let parts: Vec<(usize, DMatrix<f64>, Vec<DMatrix<f64>>)> = chunk_ranges(x.ncols())
            .into_par_iter()
            .map(|(start, len)| {
                let view = x.columns(start, len);
                let srcs = self.unmix(&view);
                let mut resp = DMatrix::zeros(len, k);
                let mut gammas: Vec<DMatrix<f64>> = self
                    .comps
                    .iter()
                    .map(|c| DMatrix::zeros(len, c.n_gauss()))
                    .collect();
                let mut gamma: Vec<Vec<f64>> =
                    self.comps.iter().map(|c| vec![0.0; c.n_gauss()]).collect();
                let mut terms = vec![0.0; k];
                for t in 0..len {
                    for (j, c) in self.comps.iter().enumerate() {
                        let s = srcs[j].column(t);
                        terms[j] = self.log_priors[j]
                            + c.source_loglik(s.as_slice(), &mut gamma[j])
                            - c.log_abs_det;
                        for (q, g) in gamma[j].iter().enumerate() {
                            gammas[j][(t, q)] = *g;
                        }
                    }
                    softmax_in_place(&mut terms);
                    for j in 0..k {
                        resp[(t, j)] = terms[j];
                    }
                }
                (start, resp, gammas)
            })
            .collect();
        let mut resp = DMatrix::zeros(x.ncols(), k);
        let mut gammas: Vec<DMatrix<f64>> = self
            .comps
            .iter()
            .map(|c| DMatrix::zeros(x.ncols(), c.n_gauss()))
            .collect();
        for (start, r, g) in parts {
            resp.rows_mut(start, r.nrows()).copy_from(&r);
            for (dst, src) in gammas.iter_mut().zip(&g) {
                dst.rows_mut(start, src.nrows()).copy_from(src);
            }
        }
        Ok((resp, gammas))
    }

    /// Negative log-likelihood and its gradient.
    pub(crate) fn nll_and_gradient(&self, x: &DMatrix<f64>) -> Result<(f64, RawGradient)> {
        self.check_data(x)?;
        let parts: Vec<(f64, RawGradient)> = chunk_ranges(x.ncols())
            .into_par_iter()
            .map(|(start, len)| self.chunk_gradient(&x.columns(start, len)))
            .collect();
        let mut iter = parts.into_iter();
        let (mut nll, mut grad) = iter.next().expect("non-empty dataset");
        for (v, g) in iter {
            nll += v;
            grad.add_assign(&g);
        }
        // Finish the mixing gradients: Wᵀ (R I + Σ r ψ sᵀ).
        for (j, c) in self.comps.iter().enumerate() {
            let core = &mut grad.mixing[j];
            for d in 0..self.dim {
                core[(d, d)] += grad.resp_mass[j];
            }
            grad.mixing[j] = c.unmixing.transpose() * &*core;
        }
        Ok((nll, grad))
    }

    fn chunk_gradient(&self, view: &DMatrixView<f64>) -> (f64, RawGradient) {
        let k = self.comps.len();
        let len = view.ncols();
        let srcs = self.unmix(view);
        let mut grad = RawGradient::zeros(self);
        // Responsibility-weighted score vectors, one column per datum.
        let mut weighted_scores: Vec<DMatrix<f64>> =
            (0..k).map(|_| DMatrix::zeros(self.dim, len)).collect();
        let mut gamma: Vec<Vec<f64>> = self.comps.iter().map(|c| vec![0.0; c.n_gauss()]).collect();
        let mut terms = vec![0.0; k];
        let mut nll = 0.0;
        for t in 0..len {
            for (j, c) in self.comps.iter().enumerate() {
                let s = srcs[j].column(t);
                terms[j] = self.log_priors[j] + c.source_loglik(s.as_slice(), &mut gamma[j])
                    - c.log_abs_det;
            }
            nll -= log_sum_exp(&terms);
            softmax_in_place(&mut terms);
            for j in 0..k {
                let r = terms[j];
                grad.prior_logits[j] -= r - self.priors[j];
                grad.resp_mass[j] += r;
                let c = &self.comps[j];
                let s = srcs[j].column(t);
                for (i, src) in c.sources.iter().enumerate() {
                    let off = c.offsets[i];
                    let g = &gamma[j][off..off + src.len()];
                    let mut psi = 0.0;
                    for q in 0..src.len() {
                        let z = (s[i] - src.means[q]) * src.inv_stdevs[q];
                        let wg = r * g[q];
                        psi -= g[q] * z * src.inv_stdevs[q];
                        grad.logits[j][off + q] -= r * g[q] - r * src.weights[q];
                        grad.means[j][off + q] -= wg * z * src.inv_stdevs[q];
                        grad.log_scales[j][off + q] -= wg * (z * z - 1.0) * src.scale_factor[q];
                    }
                    weighted_scores[j][(i, t)] = r * psi;
                }
            }
        }
        for j in 0..k {
            grad.mixing[j] = &weighted_scores[j] * srcs[j].transpose();
        }
        (nll, grad)
    }
}

/// Gradient of the negative log-likelihood in the evaluation layout.
#[derive(Debug, Clone)]
pub(crate) struct RawGradient {
    pub(crate) mixing: Vec<DMatrix<f64>>,
    /// Per component, flattened over (source, gaussian).
    pub(crate) logits: Vec<Vec<f64>>,
    pub(crate) means: Vec<Vec<f64>>,
    pub(crate) log_scales: Vec<Vec<f64>>,
    pub(crate) prior_logits: Vec<f64>,
    resp_mass: Vec<f64>,
}

impl RawGradient {
    fn zeros(model: &ModelEval) -> Self {
        let flat = |c: &ComponentEval| vec![0.0; c.n_gauss()];
        RawGradient {
            mixing: model
                .comps
                .iter()
                .map(|_| DMatrix::zeros(model.dim, model.dim))
                .collect(),
            logits: model.comps.iter().map(flat).collect(),
            means: model.comps.iter().map(flat).collect(),
            log_scales: model.comps.iter().map(flat).collect(),
            prior_logits: vec![0.0; model.comps.len()],
            resp_mass: vec![0.0; model.comps.len()],
        }
    }

    fn add_assign(&mut self, other: &RawGradient) {
        for (a, b) in self.mixing.iter_mut().zip(&other.mixing) {
            *a += b;
        }
        let add = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (x, y) in a.iter_mut().zip(b) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
        };
        add(&mut self.logits, &other.logits);
        add(&mut self.means, &other.means);
        add(&mut self.log_scales, &other.log_scales);
        for (a, b) in self.prior_logits.iter_mut().zip(&other.prior_logits) {
            *a += b;
        }
        for (a, b) in self.resp_mass.iter_mut().zip(&other.resp_mass) {
            *a += b;
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK)
        .map(|start| (start, CHUNK.min(n - start)))
        .collect()
}
