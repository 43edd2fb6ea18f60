//! The adaptive-depth recurrent transformer: configuration, parameters,
//! exit-depth machinery, and forward passes.

mod config;
mod distribution;
mod forward;
mod params;

pub use config::{DeciderKind, ModelConfig};
pub use distribution::{
    gumbel_st_sample, gumbel_st_sample_with_noise, sample_uniform_threshold, DepthAssignment,
    ExitDepthDistribution,
};
pub use forward::{
    coda_forward, decoder_block, depth_decider_forward, forward_pass, full_forward_infer,
    full_forward_train, halting_decider_forward, passthrough_update, prelude_forward,
    recurrent_step, DepthRule, DepthSelection, ForwardTrace, GateMode,
};
pub use params::{BlockParams, DeciderParams, ModelParams};

#[cfg(test)]
mod forward_tests;
