//! Perpendicular negative-prompt composition and score distillation on
//! analytic Gaussian-mixture prompt worlds.
//!
//! The trained noise predictor of a text-to-image diffusion model is
//! replaced by the exact optimal denoiser of a Gaussian mixture, so every
//! composer and distillation gradient can be checked against closed forms.

pub mod compose;
pub mod distill;
pub mod error;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod vector;

pub use compose::{
    cebm_compose, cfg_compose, naive_negation_compose, perp_neg_compose, perpendicular_component,
    ComposerConfig, ComposerKind,
};
pub use error::{Error, Result};
pub use oracle::{Condition, EpsPrediction, Mode, OracleWorld, PromptEmbedding, WorldSpec};
pub use sampler::{
    classify_mode, generate, generate_serial, success_table, PromptRef, SampleRun, SuccessReport,
};
pub use schedule::{ddim_step, ddpm_step, forward_sample, ScheduleKind, VarianceSchedule};
