//! MIMIC structural equation models fitted by maximum likelihood.

mod fit;
mod model;
pub mod optim;
mod scores;

pub use fit::{
    evaluate, fit_moments, fit_sem, rescale_reference, Convergence, MatrixGradient, Moments, SemFit, SemOptions,
    SemParam, SemSe,
};
pub use model::{build_mimic, parse_model_spec, LatentBlock, Matrices, SemModel, Slot, Structural};
pub use scores::{latent_scores, ScoreMode};
