//! Training objective: answer-token cross-entropy plus a KL compute
//! regularizer against an exponential depth prior.

mod adamw;

pub use adamw::{AdamW, AdamWConfig, GradMap};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon inside the KL logs: the online recursion can produce exact zeros.
pub const KL_LOG_EPS: f64 = 1e-12;

/// Exponential prior over depths, p(d) ∝ b^(-d) for d = 1..D, b ≥ 1.
#[derive(Debug, Clone)]
pub struct DepthPrior {
    base: f64,
    probs: Vec<f64>,
}

impl DepthPrior {
    pub fn exponential(base: f64, depth_max: usize) -> Result<Self> {
        if base < 1.0 {
            return Err(Error::contract(format!(
                "depth prior base must be >= 1, got {base}"
            )));
        }
        if depth_max < 1 {
            return Err(Error::contract("depth prior needs depth_max >= 1"));
        }
        let raw: Vec<f64> = (1..=depth_max).map(|d| base.powi(-(d as i32))).collect();
        let z: f64 = raw.iter().sum();
        Ok(DepthPrior {
            base,
            probs: raw.into_iter().map(|p| p / z).collect(),
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn depth_max(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// ln Σ_d b^(-d), the normalizer of the unnormalized prior.
    pub fn log_partition(&self) -> f64 {
        (1..=self.depth_max())
            .map(|d| self.base.powi(-(d as i32)))
            .sum::<f64>()
            .ln()
    }

    fn ln_probs_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.probs.iter().map(|&p| T::cast(p.ln())).collect();
        Tensor::new(vec![self.probs.len()], data).expect("shape matches")
    }
}

/// Exact KL divergence between two finite distributions (f64 reporting path).
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| {
            if qi <= 0.0 {
                0.0
            } else {
                qi * (qi.ln() - pi.max(KL_LOG_EPS).ln())
            }
        })
        .sum()
}

/// Mean KL(q_i ‖ p) over all tokens (prompt and answer), on the tape.
/// `q` is T×D; returns a length-1 tensor.
pub fn compute_regularizer<T: Scalar>(q: &Tensor<T>, prior: &DepthPrior) -> Result<Tensor<T>> {
    let (sum, tokens) = regularizer_sum(q, prior)?;
    Ok(sum.mul_scalar(T::cast(1.0 / tokens as f64)))
}

/// Σ_i KL(q_i ‖ p) and the token count; callers divide by their own total.
pub fn regularizer_sum<T: Scalar>(
    q: &Tensor<T>,
    prior: &DepthPrior,
) -> Result<(Tensor<T>, usize)> {
    let d = q.cols();
    if d != prior.depth_max() {
        return Err(Error::contract(format!(
            "q has {} depths but prior has {}",
            d,
            prior.depth_max()
        )));
    }
    let tokens = q.numel() / d;
    if tokens == 0 {
        return Err(Error::contract("regularizer over zero tokens"));
    }
    let eps = T::cast(KL_LOG_EPS);
    let q_ln_q = q.mul(&q.ln_clamped(eps))?.sum_all();
    let q_ln_p = q.scale_cols(&prior.ln_probs_tensor())?.sum_all();
    Ok((q_ln_q.sub(&q_ln_p)?, tokens))
}

/// Mean negative log-likelihood over the masked (answer) positions only.
/// `targets[t]` is the token that position `t` should predict; `mask[t]`
/// marks the scored positions.
pub fn answer_token_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<Tensor<T>> {
    let (sum, count) = cross_entropy_sum(logits, targets, mask)?;
    Ok(sum.mul_scalar(T::cast(1.0 / count as f64)))
}

/// Σ NLL over masked positions and the masked count.
pub fn cross_entropy_sum<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(Tensor<T>, usize)> {
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::contract(format!(
            "logits rows {rows} vs targets {} / mask {}",
            targets.len(),
            mask.len()
        )));
    }
    let positions: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if positions.is_empty() {
        return Err(Error::contract("answer mask marks no positions"));
    }
    let masked_targets: Vec<u32> = positions.iter().map(|&i| targets[i]).collect();
    let picked = logits.gather_rows(&positions)?;
    let nll = picked.cross_entropy_rows(&masked_targets)?;
    Ok((nll.sum_all(), positions.len()))
}

/// Scalar metrics of one loss evaluation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub compute: f64,
    pub gamma: f64,
    pub mean_expected_depth: f64,
    pub mean_entropy: f64,
    pub masked_tokens: usize,
    pub tokens: usize,
}

/// One sequence's contribution to a batch loss.
pub struct SequenceLoss<T: Scalar> {
    /// `ce_sum / ce_denom + gamma * kl_sum / kl_denom`, on the tape.
    pub scaled_total: Tensor<T>,
    pub ce_sum: f64,
    pub kl_sum: f64,
    pub masked_count: usize,
    pub token_count: usize,
    pub expected_depth_sum: f64,
    pub entropy_sum: f64,
}

/// Assemble the training loss for one sequence. The denominators are batch
/// totals so that per-sequence gradients sum to the batch-mean gradient.
pub fn sequence_loss<T: Scalar>(
    trace: &ForwardTrace<T>,
    targets: &[u32],
    mask: &[bool],
    prior: &DepthPrior,
    gamma: f64,
    ce_denom: f64,
    kl_denom: f64,
) -> Result<SequenceLoss<T>> {
    let (ce_sum_t, masked_count) = cross_entropy_sum(&trace.logits, targets, mask)?;
    let (kl_sum_t, token_count) = regularizer_sum(&trace.q, prior)?;
    let ce_term = ce_sum_t.mul_scalar(T::cast(1.0 / ce_denom));
    // γ = 0 must reduce to pure cross-entropy exactly
    let scaled_total = if gamma == 0.0 {
        ce_term
    } else {
        ce_term.add(&kl_sum_t.mul_scalar(T::cast(gamma / kl_denom)))?
    };
    let dists = trace.distributions();
    Ok(SequenceLoss {
        scaled_total,
        ce_sum: ce_sum_t.item().as_f64(),
        kl_sum: kl_sum_t.item().as_f64(),
        masked_count,
        token_count,
        expected_depth_sum: dists.iter().map(|d| d.expected_depth()).sum(),
        entropy_sum: dists.iter().map(|d| d.entropy()).sum(),
    })
}

impl LossReport {
    pub fn from_sequences<T: Scalar>(parts: &[SequenceLoss<T>], gamma: f64) -> LossReport {
        let masked: usize = parts.iter().map(|p| p.masked_count).sum();
        let tokens: usize = parts.iter().map(|p| p.token_count).sum();
        let ce = parts.iter().map(|p| p.ce_sum).sum::<f64>() / masked.max(1) as f64;
        let compute = parts.iter().map(|p| p.kl_sum).sum::<f64>() / tokens.max(1) as f64;
        LossReport {
            total: ce + gamma * compute,
            ce,
            compute,
            gamma,
            mean_expected_depth: parts.iter().map(|p| p.expected_depth_sum).sum::<f64>()
                / tokens.max(1) as f64,
            mean_entropy: parts.iter().map(|p| p.entropy_sum).sum::<f64>()
                / tokens.max(1) as f64,
            masked_tokens: masked,
            tokens,
        }
    }
}

/// Linear warmup from `base_lr / warmup` at step 1 to `base_lr` at the
/// warmup step, constant afterwards. Steps are 1-based.
pub fn lr_schedule(step: usize, warmup: usize, base_lr: f64) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn exponential_prior_cases() {
        let p = DepthPrior::exponential(1.0, 4).unwrap();
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let p = DepthPrior::exponential(2.0, 3).unwrap();
        let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in p.probs().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = DepthPrior::exponential(2.0, 1).unwrap();
        assert_eq!(p.probs(), &[1.0]);
        assert!(DepthPrior::exponential(0.9, 3).is_err());
        // non-increasing and normalized
        let p = DepthPrior::exponential(1.7, 6).unwrap();
        let sum: f64 = p.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.probs().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn regularizer_zero_iff_q_equals_prior() {
        let prior = DepthPrior::exponential(1.5, 4).unwrap();
        let q_rows: Vec<f64> = prior.probs().iter().chain(prior.probs()).cloned().collect();
        let q = Tensor::<f64>::from_f64(vec![2, 4], &q_rows).unwrap();
        let lc = compute_regularizer(&q, &prior).unwrap().item();
        assert!(lc.abs() < 1e-12);

        // point mass at depth 1 against a uniform prior: KL = ln 4
        let uniform = DepthPrior::exponential(1.0, 4).unwrap();
        let delta = Tensor::<f64>::from_f64(vec![1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let lc = compute_regularizer(&delta, &uniform).unwrap().item();
        assert!((lc - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn regularizer_is_nonnegative() {
        let mut rng = derive_rng(5, &["lc"]);
        for _ in 0..200 {
            let d = rng.random_range(2..6);
            let b = 1.0 + rng.random::<f64>() * 2.0;
            let prior = DepthPrior::exponential(b, d).unwrap();
            let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-9).collect();
            let z: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let qt = Tensor::<f64>::from_f64(vec![1, d], &q).unwrap();
            let lc = compute_regularizer(&qt, &prior).unwrap().item();
            assert!(lc >= -1e-12, "KL must be non-negative, got {lc}");
        }
    }

    #[test]
    fn kl_decomposition_identity() {
        // KL(q‖p) = −H(q) + (ln b)·E_q[d] + ln Σ_d b^(−d)
        let mut rng = derive_rng(6, &["eq4"]);
        for _ in 0..1000 {
            let d = rng.random_range(1..8);
            let b = 1.0 + rng.random::<f64>() * 3.0;
            let prior = DepthPrior::exponential(b, d).unwrap();
            let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-12).collect();
            let z: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / z).collect();

            let lhs = kl_divergence(&q, prior.probs());
            let entropy: f64 = -q.iter().map(|&p| p * p.ln()).sum::<f64>();
            let e_depth: f64 = q.iter().enumerate().map(|(i, &p)| (i + 1) as f64 * p).sum();
            let rhs = -entropy + b.ln() * e_depth + prior.log_partition();
            assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn masked_ce_cases() {
        // uniform logits → ln V
        let logits = Tensor::<f64>::zeros(vec![3, 9]);
        let ce = answer_token_cross_entropy(&logits, &[1, 2, 3], &[false, true, true])
            .unwrap()
            .item();
        assert!((ce - 9.0f64.ln()).abs() < 1e-12);

        // strongly correct logits → ≈ 0
        let mut data = vec![0.0; 2 * 5];
        data[3] = 60.0;
        data[5 + 1] = 60.0;
        let sharp = Tensor::<f64>::from_f64(vec![2, 5], &data).unwrap();
        let ce = answer_token_cross_entropy(&sharp, &[3, 1], &[true, true])
            .unwrap()
            .item();
        assert!(ce < 1e-9);

        // empty mask is a contract error
        assert!(answer_token_cross_entropy(&logits, &[1, 2, 3], &[false, false, false]).is_err());
    }

    #[test]
    fn masked_ce_ignores_prompt_logits() {
        let mut rng = derive_rng(7, &["mask"]);
        let base: Vec<f64> = (0..4 * 6).map(|_| rng.random::<f64>()).collect();
        let mut perturbed = base.clone();
        for v in perturbed[0..12].iter_mut() {
            *v += rng.random::<f64>() * 10.0;
        }
        let a = Tensor::<f64>::from_f64(vec![4, 6], &base).unwrap();
        let b = Tensor::<f64>::from_f64(vec![4, 6], &perturbed).unwrap();
        let mask = [false, false, true, true];
        let targets = [0u32, 0, 4, 5];
        let ca = answer_token_cross_entropy(&a, &targets, &mask).unwrap().item();
        let cb = answer_token_cross_entropy(&b, &targets, &mask).unwrap().item();
        assert_eq!(ca, cb);
    }

    #[test]
    fn lr_schedule_warmup_shape() {
        let base = 3e-3;
        assert!((lr_schedule(1, 1000, base) - base / 1000.0).abs() < 1e-15);
        assert!((lr_schedule(500, 1000, base) - base * 0.5).abs() < 1e-15);
        assert_eq!(lr_schedule(1000, 1000, base), base);
        assert_eq!(lr_schedule(10_000, 1000, base), base);
    }
}

#[cfg(test)]
mod surrogate_grad_tests {
    use super::*;
    use crate::model::{
        forward_pass, DeciderKind, DepthSelection, GateMode, ModelConfig, ModelParams,
    };
    use crate::rng::derive_rng;

    fn toy_config(kind: DeciderKind) -> ModelConfig {
        ModelConfig {
            depth_max: 3,
            n_heads: 2,
            n_prelude_layers: 1,
            n_coda_layers: 1,
            d_model: 4,
            d_ff: 8,
            decider_d_ff: 8,
            max_seq_len: 4,
            vocab_size: 5,
            decider_kind: kind,
            gumbel_tau: 1.0,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.3,
            seed: 21,
        }
    }

    /// Total-loss gradient w.r.t. decider parameters, checked against finite
    /// differences through the differentiable surrogate-gate forward on a
    /// 2-token toy model.
    #[test]
    fn decider_gradient_matches_finite_differences_on_surrogate_path() {
        for kind in [DeciderKind::Early, DeciderKind::Online] {
            let params = ModelParams::<f64>::init(toy_config(kind));
            let prior = DepthPrior::exponential(1.5, 3).unwrap();
            let tokens = [1u32, 3];
            let targets = [3u32, 2];
            let mask = [false, true];
            let gamma = 0.2;

            let inputs = vec![
                params.decider.norm.clone(),
                params.decider.w_in.clone(),
                params.decider.w_out.clone(),
                params.decider.b_out.clone(),
                params.core.wq.clone(),
            ];
            let f = |xs: &[crate::tensor::Tensor<f64>]| {
                let mut p = params.clone();
                p.decider.norm = xs[0].clone();
                p.decider.w_in = xs[1].clone();
                p.decider.w_out = xs[2].clone();
                p.decider.b_out = xs[3].clone();
                p.core.wq = xs[4].clone();
                // fixed sampling stream so the function is deterministic
                let mut rng = derive_rng(77, &["surrogate"]);
                let trace = forward_pass(
                    &p,
                    &tokens,
                    DepthSelection::Sample(&mut rng),
                    GateMode::SoftSurrogate,
                )
                .unwrap();
                sequence_loss(&trace, &targets, &mask, &prior, gamma, 1.0, 2.0)
                    .unwrap()
                    .scaled_total
            };
            crate::gradcheck::assert_gradients_close(&inputs, f, 1e-3);
        }
    }
}
