//! Mixture of square, noiseless ICA models with mixture-of-Gaussian sources.

mod eval;
mod model;
mod mog;
mod objective;
mod train;


pub(crate) use eval::invert;
pub use eval::DET_FLOOR;
pub(crate) use model::argmax;
pub use model::{
    component_loglik, component_loglik_raw, component_logliks, component_posteriors, e_step,
    model_loglik, source_vector_logpdf, IcaComponent, ModelSummary, MoicaModel, Responsibilities,
};
pub use mog::{log_sum_exp, mog_logpdf, MogSource, SIGMA_FLOOR};
pub use objective::{objective_and_gradient, softmax, ModelGradient, ModelParams, SourceParams};
pub use train::{init_model, train, TrainConfig, TrainTrace, TrainedModel};
