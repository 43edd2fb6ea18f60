//! Dataset evaluation: greedy generation, exact-match scoring against the
//! oracle answers, and per-instance compute allocation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{decode_step, generate, AllocationAwareKVCache, DecodeDepth};
use crate::model::{DeciderKind, DepthRule, ModelParams};
use crate::scalar::Scalar;
use crate::tasks::{Payload, TaskInstance, TaskKind, Vocabulary};

/// Per-instance evaluation output (one JSONL line).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalRecord {
    pub task: TaskKind,
    pub knob: i64,
    pub seed: u64,
    pub correct: bool,
    /// Mean exit depth over positions predicting answer tokens.
    pub d_bar_answer: f64,
    /// Mean exit depth over all consumed positions (prompt included).
    pub d_bar_all: f64,
    pub depths: Vec<usize>,
    pub cost_exec: usize,
    pub cost_dec: usize,
}

/// Default deterministic depth rule for a decider kind.
pub fn default_rule(kind: DeciderKind) -> DepthRule {
    match kind {
        DeciderKind::Early => DepthRule::Modal,
        DeciderKind::Online => DepthRule::Median,
    }
}

/// Evaluate one instance by greedy decoding.
pub fn evaluate_instance<T: Scalar>(
    params: &ModelParams<T>,
    inst: &TaskInstance,
    vocab: &Vocabulary,
    rule: DepthRule,
) -> Result<EvalRecord> {
    if let Payload::Depo { .. } = inst.payload {
        return evaluate_depo(params, inst, vocab, rule);
    }
    let gen = generate(
        params,
        &inst.prompt_ids,
        inst.answer_ids.len(),
        rule,
        Some(vocab.eoa()),
    )?;
    let correct = gen.generated() == inst.answer_ids.as_slice();
    Ok(EvalRecord {
        task: inst.task,
        knob: inst.knob,
        seed: inst.seed,
        correct,
        d_bar_answer: gen.report.mean_depth_answer.unwrap_or(gen.report.mean_depth),
        d_bar_all: gen.report.mean_depth,
        depths: gen.depths,
        cost_exec: gen.report.cost_exec,
        cost_dec: gen.report.cost_dec,
    })
}

/// K-step successor evaluation: answers are interleaved with teacher-forced
/// query framing, so each query contributes exactly one generated token.
fn evaluate_depo<T: Scalar>(
    params: &ModelParams<T>,
    inst: &TaskInstance,
    vocab: &Vocabulary,
    rule: DepthRule,
) -> Result<EvalRecord> {
    let Payload::Depo { queries, k, .. } = &inst.payload else {
        unreachable!("caller checked the payload kind");
    };
    let mut cache = AllocationAwareKVCache::for_model(params);
    let mut cost_dec = 0usize;
    let mut last_logits = None;
    let feed = |cache: &mut AllocationAwareKVCache<T>, tok: u32, cost_dec: &mut usize| {
        decode_step(params, cache, tok, DecodeDepth::Rule(rule)).map(|out| {
            *cost_dec += out.decider_evals;
            out.logits
        })
    };
    for &t in &inst.prompt_ids {
        last_logits = Some(feed(&mut cache, t, &mut cost_dec)?);
    }
    let mut correct = true;
    let mut answer_positions = Vec::new();
    for q in queries {
        // teacher-force <query-k> start <ans>
        for tok in [
            vocab.query_k(*k as usize)?,
            vocab.id(&q.start)?,
            vocab.ans(),
        ] {
            last_logits = Some(feed(&mut cache, tok, &mut cost_dec)?);
        }
        // the <ans> position predicts the answer token
        answer_positions.push(cache.len() - 1);
        let logits = last_logits.as_ref().expect("prompt fed");
        let predicted = argmax(logits);
        let want = vocab.id(&q.answer)?;
        if predicted != want {
            correct = false;
        }
        // teacher-force the true answer and the separator
        feed(&mut cache, want, &mut cost_dec)?;
        last_logits = Some(feed(&mut cache, vocab.eoa(), &mut cost_dec)?);
    }
    let _ = last_logits;
    let depths = cache.exit_depths().to_vec();
    let cost_exec: usize = depths.iter().sum();
    let d_bar_all = cost_exec as f64 / depths.len() as f64;
    let d_bar_answer = answer_positions
        .iter()
        .map(|&p| depths[p] as f64)
        .sum::<f64>()
        / answer_positions.len().max(1) as f64;
    Ok(EvalRecord {
        task: inst.task,
        knob: inst.knob,
        seed: inst.seed,
        correct,
        d_bar_answer,
        d_bar_all,
        depths,
        cost_exec,
        cost_dec,
    })
}

fn argmax<T: Scalar>(logits: &crate::tensor::Tensor<T>) -> u32 {
    let data = logits.data();
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best as u32
}

/// Evaluate many instances in parallel, output ordered by instance index.
pub fn evaluate_dataset<T: Scalar>(
    params: &ModelParams<T>,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
    rule: DepthRule,
) -> Result<Vec<EvalRecord>> {
    instances
        .par_iter()
        .map(|inst| evaluate_instance(params, inst, vocab, rule))
        .collect()
}

/// Accuracy over records.
pub fn accuracy(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

/// Mean answer-token depth over records.
pub fn mean_answer_depth(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.d_bar_answer).sum::<f64>() / records.len() as f64
}

/// Vocabulary compatibility gate between a checkpoint and a dataset.
pub fn check_vocab_match(expected_version: &str, vocab: &Vocabulary) -> Result<()> {
    if expected_version != vocab.version() {
        return Err(Error::contract(format!(
            "vocabulary mismatch: checkpoint {expected_version}, dataset {}",
            vocab.version()
        )));
    }
    Ok(())
}
