use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which module decides per-token exit depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeciderKind {
    /// Depth decider: one categorical depth distribution from the pre-recurrence state.
    Early,
    /// Halting decider: a stop probability after each recurrent iteration.
    Online,
}

impl std::fmt::Display for DeciderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DeciderKind::Early => write!(f, "early"),
            DeciderKind::Online => write!(f, "online"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum number of recurrent iterations D.
    pub depth_max: usize,
    pub n_heads: usize,
    pub n_prelude_layers: usize,
    pub n_coda_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub decider_d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub decider_kind: DeciderKind,
    pub gumbel_tau: f64,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: a scaled-down version of the reference
    /// hyperparameters that trains in minutes on a CPU.
    pub fn desk_default(vocab_size: usize, decider_kind: DeciderKind) -> Self {
        ModelConfig {
            depth_max: 6,
            n_heads: 4,
            n_prelude_layers: 1,
            n_coda_layers: 1,
            d_model: 64,
            d_ff: 256,
            decider_d_ff: 256,
            max_seq_len: 256,
            vocab_size,
            decider_kind,
            gumbel_tau: 1.0,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Modular-arithmetic task default; deeper recurrence budget.
    pub fn desk_mano(vocab_size: usize, decider_kind: DeciderKind) -> Self {
        ModelConfig {
            depth_max: 8,
            max_seq_len: 64,
            ..Self::desk_default(vocab_size, decider_kind)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_max < 1 {
            return Err(Error::contract("depth_max must be >= 1"));
        }
        for (name, v) in [
            ("n_heads", self.n_heads),
            ("n_prelude_layers", self.n_prelude_layers),
            ("n_coda_layers", self.n_coda_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("decider_d_ff", self.decider_d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::contract(
                "head dimension must be even for rotary encoding",
            ));
        }
        if self.gumbel_tau <= 0.0 {
            return Err(Error::contract("gumbel_tau must be positive"));
        }
        Ok(())
    }
}
