//! Prelude–Recurrent–Coda forward passes with passthrough gating.
//!
//! Training always unrolls the recurrent core for exactly `depth_max`
//! iterations; per-token exit depths only control the gates, so the graph
//! shape is input-independent. Forward gates are hard 0/1 row selections
//! (frozen states are bit-identical), while the backward pass substitutes the
//! differentiable survival mass of each token's exit distribution.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::uniform_open01;
use crate::scalar::Scalar;
use crate::tensor::{causal_attention, concat_cols, embedding_lookup, gated_rows, Tensor};

use super::config::DeciderKind;
use super::distribution::{gumbel_st_sample_with_noise, DepthAssignment, ExitDepthDistribution};
use super::params::{BlockParams, ModelParams};

/// Deterministic inference-time depth selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthRule {
    /// argmax of the predicted depth distribution (early decider).
    Modal,
    /// first depth where the CDF reaches 0.5 (online decider).
    Median,
    /// first depth where the CDF reaches `c` (online decider sweeps).
    Threshold(f64),
}

/// How exit depths are chosen during a forward pass.
pub enum DepthSelection<'a> {
    /// Training-time stochastic selection per decider variant.
    Sample(&'a mut ChaCha8Rng),
    /// Deterministic rule (inference).
    Rule(DepthRule),
    /// Externally fixed depths (test hook and cache-equivalence oracle).
    Forced(&'a [usize]),
}

/// Forward gating arithmetic. `Hard` is the real model; `SoftSurrogate`
/// replaces hard gates with their backward surrogates so the whole pass is
/// differentiable, which the gradient verification suite diffs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Hard,
    SoftSurrogate,
}

/// Everything a forward pass produces.
pub struct ForwardTrace<T: Scalar> {
    /// Prelude output h^(0), T×H.
    pub h0: Tensor<T>,
    /// Gated recurrent states h^(1)..h^(D).
    pub states: Vec<Tensor<T>>,
    /// Exit representations fed to the coda (equals the final gated state).
    pub z: Tensor<T>,
    /// Next-token logits, T×V.
    pub logits: Tensor<T>,
    /// Per-token exit-depth probabilities, T×D (tape-attached in training).
    pub q: Tensor<T>,
    /// Online variant: halting probabilities α^(1)..α^(D-1), each T×1.
    pub alphas: Option<Vec<Tensor<T>>>,
    pub assignment: DepthAssignment,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Reporting view of the per-token distributions.
    pub fn distributions(&self) -> Vec<ExitDepthDistribution> {
        let t_len = self.assignment.len();
        let d = self.assignment.depth_max();
        let mut out = Vec::with_capacity(t_len);
        match &self.alphas {
            Some(alphas) => {
                for i in 0..t_len {
                    let a: Vec<f64> = alphas.iter().map(|col| col.data()[i].as_f64()).collect();
                    out.push(
                        ExitDepthDistribution::from_halting(&a)
                            .expect("sigmoid outputs lie in (0,1)"),
                    );
                }
            }
            None => {
                let qd = self.q.data();
                for i in 0..t_len {
                    let row: Vec<f64> = (0..d).map(|j| qd[i * d + j].as_f64()).collect();
                    out.push(
                        ExitDepthDistribution::from_probs(&row).expect("softmax row normalizes"),
                    );
                }
            }
        }
        out
    }

    /// Mean expected depth over all tokens.
    pub fn mean_expected_depth(&self) -> f64 {
        let dists = self.distributions();
        if dists.is_empty() {
            return 0.0;
        }
        dists.iter().map(|q| q.expected_depth()).sum::<f64>() / dists.len() as f64
    }
}

/// One pre-norm decoder block (attention + gated feed-forward).
pub fn decoder_block<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    n_heads: usize,
    rope: &crate::tensor::RopeTable<T>,
    norm_eps: T,
) -> Result<Tensor<T>> {
    let normed = x.rms_norm(&block.attn_norm, norm_eps)?;
    let q = normed.matmul(&block.wq)?;
    let k = normed.matmul(&block.wk)?;
    let v = normed.matmul(&block.wv)?;
    let attn = causal_attention(&q, &k, &v, n_heads, rope, 0)?;
    let x = x.add(&attn.matmul(&block.wo)?)?;

    let normed = x.rms_norm(&block.ffn_norm, norm_eps)?;
    let gate = normed.matmul(&block.w_gate)?.silu();
    let up = normed.matmul(&block.w_up)?;
    let ffn = gate.mul(&up)?.matmul(&block.w_down)?;
    x.add(&ffn)
}

/// Embedding plus the prelude stack: h^(0) = P(x).
pub fn prelude_forward<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > params.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: params.config.max_seq_len,
        });
    }
    let eps = T::cast(params.config.norm_eps);
    let mut h = embedding_lookup(&params.embedding, tokens)?;
    for block in &params.prelude {
        h = decoder_block(&h, block, params.config.n_heads, &params.rope, eps)?;
    }
    Ok(h)
}

/// One application of the shared-weight recurrent block: h^(d) = R(h^(d-1)).
pub fn recurrent_step<T: Scalar>(params: &ModelParams<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    decoder_block(
        h,
        &params.core,
        params.config.n_heads,
        &params.rope,
        T::cast(params.config.norm_eps),
    )
}

/// Coda stack, final norm, and the unembedding projection to logits.
pub fn coda_forward<T: Scalar>(params: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let eps = T::cast(params.config.norm_eps);
    let mut h = z.clone();
    for block in &params.coda {
        h = decoder_block(&h, block, params.config.n_heads, &params.rope, eps)?;
    }
    h.rms_norm(&params.final_norm, eps)?.matmul(&params.unembed)
}

fn decider_trunk<T: Scalar>(params: &ModelParams<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let eps = T::cast(params.config.norm_eps);
    let normed = h.rms_norm(&params.decider.norm, eps)?;
    normed
        .matmul(&params.decider.w_in)?
        .silu()
        .matmul(&params.decider.w_out)?
        .add_row(&params.decider.b_out)
}

/// Depth decider (early variant): mean-centered depth logits from h^(0).
/// Returns `(q, centered_logits)`, both T×D.
pub fn depth_decider_forward<T: Scalar>(
    params: &ModelParams<T>,
    h0: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if params.config.decider_kind != DeciderKind::Early {
        return Err(Error::contract(
            "depth decider requires decider_kind = early",
        ));
    }
    let logits = decider_trunk(params, h0)?.center_rows();
    Ok((logits.softmax(), logits))
}

/// Halting decider (online variant): α^(d) = sigmoid(logit) per token, T×1.
pub fn halting_decider_forward<T: Scalar>(
    params: &ModelParams<T>,
    h_d: &Tensor<T>,
) -> Result<Tensor<T>> {
    if params.config.decider_kind != DeciderKind::Online {
        return Err(Error::contract(
            "halting decider requires decider_kind = online",
        ));
    }
    Ok(decider_trunk(params, h_d)?.sigmoid())
}

/// Passthrough update: rows still active take the fresh state, frozen rows
/// keep h^(d-1) bit-exactly; `soft` carries the backward surrogate gate.
pub fn passthrough_update<T: Scalar>(
    h_new: &Tensor<T>,
    h_prev: &Tensor<T>,
    assignment: &DepthAssignment,
    d: usize,
    soft: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let active: Vec<bool> = (0..assignment.len())
        .map(|i| assignment.active(i, d))
        .collect();
    gated_rows(h_new, h_prev, &active, soft)
}

/// Training forward pass: per-token depth sampling, hard gates with
/// straight-through backward, full D-step unroll.
pub fn full_forward_train<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace<T>> {
    forward_pass(params, tokens, DepthSelection::Sample(rng), GateMode::Hard)
}

/// Inference forward pass with a deterministic depth rule.
pub fn full_forward_infer<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    rule: DepthRule,
) -> Result<ForwardTrace<T>> {
    forward_pass(params, tokens, DepthSelection::Rule(rule), GateMode::Hard)
}

/// General engine behind both entry points.
pub fn forward_pass<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    selection: DepthSelection<'_>,
    mode: GateMode,
) -> Result<ForwardTrace<T>> {
    match params.config.decider_kind {
        DeciderKind::Early => forward_early(params, tokens, selection, mode),
        DeciderKind::Online => forward_online(params, tokens, selection, mode),
    }
}

fn check_rule(kind: DeciderKind, rule: DepthRule) -> Result<()> {
    match (kind, rule) {
        (DeciderKind::Early, DepthRule::Modal) => Ok(()),
        (DeciderKind::Online, DepthRule::Median) | (DeciderKind::Online, DepthRule::Threshold(_)) => {
            Ok(())
        }
        (kind, rule) => Err(Error::contract(format!(
            "depth rule {rule:?} is not valid for the {kind} decider"
        ))),
    }
}

fn forward_early<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    selection: DepthSelection<'_>,
    mode: GateMode,
) -> Result<ForwardTrace<T>> {
    let depth_max = params.config.depth_max;
    let t_len = tokens.len();
    let h0 = prelude_forward(params, tokens)?;
    let (q, logits_s) = depth_decider_forward(params, &h0)?;

    // Resolve depths and, when sampling, the tempered softmax surrogate.
    let (depths, soft_tail): (Vec<usize>, Option<Tensor<T>>) = match selection {
        DepthSelection::Sample(rng) => {
            let tau = params.config.gumbel_tau;
            let sdata = logits_s.to_f64_vec();
            let mut noise = Vec::with_capacity(t_len * depth_max);
            let mut depths = Vec::with_capacity(t_len);
            for i in 0..t_len {
                let row = &sdata[i * depth_max..(i + 1) * depth_max];
                let g: Vec<f64> = (0..depth_max).map(|_| crate::rng::gumbel01(rng)).collect();
                let (d_star, _) = gumbel_st_sample_with_noise(row, tau, &g);
                depths.push(d_star);
                noise.extend(g);
            }
            let noise_t = Tensor::from_f64(vec![t_len, depth_max], &noise)?;
            let soft = logits_s
                .add(&noise_t)?
                .mul_scalar(T::cast(1.0 / tau))
                .softmax();
            // Backward surrogate for gate d is the tail mass Σ_{d' ≥ d} soft.
            (depths, Some(soft.suffix_sum_cols()))
        }
        DepthSelection::Rule(rule) => {
            check_rule(DeciderKind::Early, rule)?;
            let qd = q.to_f64_vec();
            let depths = (0..t_len)
                .map(|i| {
                    let row = &qd[i * depth_max..(i + 1) * depth_max];
                    let mut best = 0;
                    for (j, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = j;
                        }
                    }
                    best + 1
                })
                .collect();
            (depths, None)
        }
        DepthSelection::Forced(ds) => (ds.to_vec(), None),
    };
    let assignment = DepthAssignment::new(depths, depth_max)?;

    let mut states = Vec::with_capacity(depth_max);
    let mut h = h0.clone();
    for d in 1..=depth_max {
        let tilde = recurrent_step(params, &h)?;
        let h_next = if d == 1 {
            tilde
        } else {
            let soft_col = match &soft_tail {
                Some(tail) => Some(tail.slice_cols(d - 1, d)?.reshape(vec![t_len])?),
                None => None,
            };
            apply_gate(&tilde, &h, &assignment, d, soft_col.as_ref(), mode)?
        };
        states.push(h_next.clone());
        h = h_next;
    }

    let z = h;
    let logits = coda_forward(params, &z)?;
    Ok(ForwardTrace {
        h0,
        states,
        z: z.clone(),
        logits,
        q,
        alphas: None,
        assignment,
    })
}

fn forward_online<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    selection: DepthSelection<'_>,
    mode: GateMode,
) -> Result<ForwardTrace<T>> {
    let depth_max = params.config.depth_max;
    let t_len = tokens.len();
    let h0 = prelude_forward(params, tokens)?;

    // Exit thresholds u_i are fixed upfront; depths resolve as the running
    // CDF crosses them.
    let (us, forced): (Vec<f64>, Option<Vec<usize>>) = match selection {
        DepthSelection::Sample(rng) => ((0..t_len).map(|_| uniform_open01(rng)).collect(), None),
        DepthSelection::Rule(rule) => {
            check_rule(DeciderKind::Online, rule)?;
            let c = match rule {
                DepthRule::Median => 0.5,
                DepthRule::Threshold(c) => c,
                DepthRule::Modal => unreachable!("rejected above"),
            };
            (vec![c; t_len], None)
        }
        DepthSelection::Forced(ds) => (vec![2.0; t_len], Some(ds.to_vec())),
    };

    let mut depths = vec![0usize; t_len];
    let mut halted = vec![false; t_len];
    if let Some(ds) = &forced {
        depths.clone_from(ds);
    }
    let mut cdf_acc = vec![0.0f64; t_len];

    let mut states = Vec::with_capacity(depth_max);
    let mut alphas: Vec<Tensor<T>> = Vec::with_capacity(depth_max.saturating_sub(1));
    let mut q_cols: Vec<Tensor<T>> = Vec::with_capacity(depth_max);
    // survival r^(d-1); None encodes the exact constant 1 before any halting
    let mut survival: Option<Tensor<T>> = None;
    let mut h = h0.clone();

    for d in 1..=depth_max {
        let tilde = recurrent_step(params, &h)?;
        let h_next = if d == 1 {
            tilde
        } else {
            let active_assign = match &forced {
                Some(_) => DepthAssignment::new(depths.clone(), depth_max)?,
                None => {
                    // active at step d unless halted at some d' < d
                    let tmp: Vec<usize> = halted
                        .iter()
                        .zip(&depths)
                        .map(|(&hlt, &dd)| if hlt { dd } else { depth_max })
                        .collect();
                    DepthAssignment::new(tmp, depth_max)?
                }
            };
            apply_gate(&tilde, &h, &active_assign, d, survival.as_ref(), mode)?
        };
        states.push(h_next.clone());
        h = h_next;

        if d < depth_max {
            // Trained on every token's state, frozen or not; the realized
            // distribution q must cover all depths.
            let alpha = halting_decider_forward(params, &states[d - 1])?;
            let q_col = match &survival {
                Some(r) => r.mul(&alpha)?,
                None => alpha.clone(),
            };
            let one_minus = alpha.rsub_scalar(T::one());
            survival = Some(match &survival {
                Some(r) => r.mul(&one_minus)?,
                None => one_minus,
            });
            if forced.is_none() {
                let qv = q_col.data();
                for i in 0..t_len {
                    cdf_acc[i] += qv[i].as_f64();
                    if !halted[i] && cdf_acc[i] >= us[i] {
                        halted[i] = true;
                        depths[i] = d;
                    }
                }
            }
            alphas.push(alpha);
            q_cols.push(q_col);
        } else {
            // q(D) absorbs the remaining mass r^(D-1).
            let last = match &survival {
                Some(r) => r.clone(),
                None => Tensor::full(vec![t_len, 1], T::one()),
            };
            q_cols.push(last);
            if forced.is_none() {
                for i in 0..t_len {
                    if !halted[i] {
                        depths[i] = depth_max;
                    }
                }
            }
        }
    }

    let assignment = DepthAssignment::new(depths, depth_max)?;
    let refs: Vec<&Tensor<T>> = q_cols.iter().collect();
    let q = concat_cols(&refs)?;
    let z = h;
    let logits = coda_forward(params, &z)?;
    Ok(ForwardTrace {
        h0,
        states,
        z: z.clone(),
        logits,
        q,
        alphas: Some(alphas),
        assignment,
    })
}

fn apply_gate<T: Scalar>(
    tilde: &Tensor<T>,
    h_prev: &Tensor<T>,
    assignment: &DepthAssignment,
    d: usize,
    soft: Option<&Tensor<T>>,
    mode: GateMode,
) -> Result<Tensor<T>> {
    match mode {
        GateMode::Hard => passthrough_update(tilde, h_prev, assignment, d, soft),
        GateMode::SoftSurrogate => {
            let t_len = assignment.len();
            let gate = match soft {
                Some(s) => s.reshape(vec![t_len])?,
                None => {
                    let hard: Vec<f64> = (0..t_len)
                        .map(|i| if assignment.active(i, d) { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::from_f64(vec![t_len], &hard)?
                }
            };
            let keep = gate.rsub_scalar(T::one());
            tilde.row_scale(&gate)?.add(&h_prev.row_scale(&keep)?)
        }
    }
}
