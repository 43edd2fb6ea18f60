//! Training loop: batched sequence gradients, compute-regularized objective,
//! periodic generation-based evaluation, checkpointing, exact resume.
//!
//! Determinism: batch composition, depth sampling, and evaluation all derive
//! from the run seed through stateless per-(step, slot) streams, and
//! per-sequence gradients are reduced in slot order, so a resumed run is
//! bit-identical to an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, EvalRecord};
use crate::model::{full_forward_train, ModelParams};
use crate::objective::{
    sequence_loss, AdamW, AdamWConfig, DepthPrior, GradMap, LossReport, SequenceLoss,
};
use crate::rng::derive_rng_indexed;
use crate::scalar::Scalar;
use crate::tasks::{TaskInstance, Vocabulary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Compute-regularizer weight γ.
    pub gamma: f64,
    /// Exponential depth-prior base b.
    pub prior_base: f64,
    pub optimizer: AdamWConfig,
    pub run_seed: u64,
    pub log_interval: usize,
    pub eval_interval: usize,
    /// Held-out instances per knob value for the periodic evaluation.
    pub eval_per_knob: usize,
    pub checkpoint_interval: usize,
    /// Optional global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            gamma: 0.1,
            prior_base: 1.25,
            optimizer: AdamWConfig::default(),
            run_seed: 0,
            log_interval: 50,
            eval_interval: 500,
            eval_per_knob: 24,
            checkpoint_interval: 5000,
            max_grad_norm: None,
        }
    }
}

/// One metrics line (JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub per_knob: Vec<KnobEval>,
    pub overall_accuracy: f64,
    pub overall_d_bar_answer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnobEval {
    pub knob: i64,
    pub accuracy: f64,
    pub d_bar_answer: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    pub metrics: Vec<TrainMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Train `params` on `train_set`, evaluating on `eval_set` every
/// `eval_interval` steps. `out_dir`, when given, receives `metrics.jsonl`
/// plus periodic and final checkpoints.
pub fn train<T: Scalar>(
    mut params: ModelParams<T>,
    vocab: &Vocabulary,
    train_set: &[TaskInstance],
    eval_set: &[TaskInstance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let mut optimizer = AdamW::<T>::new(cfg.optimizer.clone());
    run_training(&mut params, &mut optimizer, vocab, train_set, eval_set, cfg, out_dir, 0)
        .map(|(metrics, final_checkpoint)| TrainOutcome {
            params,
            metrics,
            final_checkpoint,
        })
}

/// Continue a checkpointed run to `cfg.steps` total steps.
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    vocab: &Vocabulary,
    train_set: &[TaskInstance],
    eval_set: &[TaskInstance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let loaded = load_checkpoint::<T>(checkpoint)?;
    if loaded.vocab.version() != vocab.version() {
        return Err(Error::contract(
            "checkpoint vocabulary does not match the dataset",
        ));
    }
    let mut params = loaded.params;
    let mut optimizer = loaded
        .optimizer
        .ok_or_else(|| Error::contract("checkpoint has no optimizer state; cannot resume"))?;
    let start_step = loaded.step;
    run_training(
        &mut params,
        &mut optimizer,
        vocab,
        train_set,
        eval_set,
        cfg,
        out_dir,
        start_step,
    )
    .map(|(metrics, final_checkpoint)| TrainOutcome {
        params,
        metrics,
        final_checkpoint,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_training<T: Scalar>(
    params: &mut ModelParams<T>,
    optimizer: &mut AdamW<T>,
    vocab: &Vocabulary,
    train_set: &[TaskInstance],
    eval_set: &[TaskInstance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    start_step: usize,
) -> Result<(Vec<TrainMetrics>, Option<PathBuf>)> {
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if params.config.vocab_size != vocab.len() {
        return Err(Error::contract(format!(
            "model vocab_size {} does not match vocabulary {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    for inst in train_set.iter().chain(eval_set) {
        let len = inst.prompt_ids.len() + inst.answer_ids.len();
        if len > params.config.max_seq_len {
            return Err(Error::contract(format!(
                "instance of length {len} exceeds max_seq_len {}",
                params.config.max_seq_len
            )));
        }
    }
    let prior = DepthPrior::exponential(cfg.prior_base, params.config.depth_max)?;

    let mut metrics_out: Vec<TrainMetrics> = Vec::new();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            Some(file)
        }
        None => None,
    };

    // interval accumulators
    let mut acc_reports: Vec<LossReport> = Vec::new();
    let mut final_checkpoint = None;

    for step in start_step + 1..=cfg.steps {
        // batch composition from the stateless per-step data stream
        let mut data_rng = derive_rng_indexed(cfg.run_seed, "data", &[step as u64]);
        use rand::Rng;
        let batch: Vec<&TaskInstance> = (0..cfg.batch_size)
            .map(|_| &train_set[data_rng.random_range(0..train_set.len())])
            .collect();

        // denominators over the whole batch
        let mut ce_denom = 0usize;
        let mut kl_denom = 0usize;
        for inst in &batch {
            let (full, _, mask) = inst.training_view();
            ce_denom += mask.iter().filter(|&&m| m).count();
            kl_denom += full.len();
        }

        // per-sequence forward/backward in parallel, reduced in slot order
        let results: Vec<Result<(GradMap<T>, SequenceLoss<T>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, inst)| {
                sequence_gradients(
                    params,
                    inst,
                    &prior,
                    cfg,
                    step,
                    slot,
                    ce_denom as f64,
                    kl_denom as f64,
                )
            })
            .collect();

        let mut grads: GradMap<T> = GradMap::new();
        let mut seq_losses: Vec<SequenceLoss<T>> = Vec::new();
        for r in results {
            let (g, s) = r?;
            for (name, v) in g {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&v) {
                            *a += *b;
                        }
                    }
                    None => {
                        grads.insert(name, v);
                    }
                }
            }
            seq_losses.push(s);
        }

        if let Some(max_norm) = cfg.max_grad_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let lr = optimizer.apply(params, &grads);

        let report = LossReport::from_sequences(&seq_losses, cfg.gamma);
        if !report.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at step {step}: {report:?}"
            )));
        }
        acc_reports.push(report);

        let log_now = step % cfg.log_interval == 0 || step == cfg.steps;
        let eval_now =
            !eval_set.is_empty() && (step % cfg.eval_interval == 0 || step == cfg.steps);
        if log_now || eval_now {
            let loss = mean_report(&acc_reports, cfg.gamma);
            acc_reports.clear();
            let eval_snapshot = if eval_now {
                Some(evaluate_snapshot(params, vocab, eval_set)?)
            } else {
                None
            };
            let m = TrainMetrics {
                step,
                lr,
                loss,
                eval: eval_snapshot,
            };
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}")?;
            }
            metrics_out.push(m);
        }

        if let Some(dir) = out_dir {
            let will_checkpoint = (cfg.checkpoint_interval > 0
                && step % cfg.checkpoint_interval == 0)
                || step == cfg.steps;
            if will_checkpoint {
                let path = dir.join(format!("step-{step:07}.ckpt"));
                save_checkpoint(
                    &path,
                    params,
                    Some(optimizer),
                    vocab,
                    step,
                    serde_json::to_value(cfg)?,
                )?;
                if step == cfg.steps {
                    let latest = dir.join("final.ckpt");
                    fs::copy(&path, &latest)?;
                    final_checkpoint = Some(latest);
                }
            }
        }
    }
    Ok((metrics_out, final_checkpoint))
}

#[allow(clippy::too_many_arguments)]
fn sequence_gradients<T: Scalar>(
    params: &ModelParams<T>,
    inst: &TaskInstance,
    prior: &DepthPrior,
    cfg: &TrainConfig,
    step: usize,
    slot: usize,
    ce_denom: f64,
    kl_denom: f64,
) -> Result<(GradMap<T>, SequenceLoss<T>)> {
    let (full, targets, mask) = inst.training_view();
    let tape = crate::tensor::GradientTape::new();
    let tracked = params.tracked(&tape);
    let mut sample_rng =
        derive_rng_indexed(cfg.run_seed, "sample", &[step as u64, slot as u64]);
    let trace = full_forward_train(&tracked, &full, &mut sample_rng)?;
    let seq = sequence_loss(&trace, &targets, &mask, prior, cfg.gamma, ce_denom, kl_denom)?;
    let grads = tape.backward(&seq.scaled_total)?;
    let mut map = GradMap::new();
    tracked.visit(&mut |name, tensor| {
        if let Some(g) = grads.get(tensor) {
            map.insert(name, g.to_vec());
        }
    });
    Ok((map, seq))
}

fn clip_global_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for v in grads.values() {
        for g in v {
            let gf = g.as_f64();
            sq += gf * gf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::cast(max_norm / norm);
        for v in grads.values_mut() {
            for g in v.iter_mut() {
                *g = *g * scale;
            }
        }
    }
}

fn mean_report(reports: &[LossReport], gamma: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let ce = reports.iter().map(|r| r.ce).sum::<f64>() / n;
    let compute = reports.iter().map(|r| r.compute).sum::<f64>() / n;
    LossReport {
        total: ce + gamma * compute,
        ce,
        compute,
        gamma,
        mean_expected_depth: reports.iter().map(|r| r.mean_expected_depth).sum::<f64>() / n,
        mean_entropy: reports.iter().map(|r| r.mean_entropy).sum::<f64>() / n,
        masked_tokens: reports.iter().map(|r| r.masked_tokens).sum(),
        tokens: reports.iter().map(|r| r.tokens).sum(),
    }
}

fn evaluate_snapshot<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    eval_set: &[TaskInstance],
) -> Result<EvalSnapshot> {
    let rule = eval::default_rule(params.config.decider_kind);
    let records = eval::evaluate_dataset(params, eval_set, vocab, rule)?;
    Ok(snapshot_from_records(&records))
}

pub fn snapshot_from_records(records: &[EvalRecord]) -> EvalSnapshot {
    let mut groups: std::collections::BTreeMap<i64, Vec<&EvalRecord>> = Default::default();
    for r in records {
        groups.entry(r.knob).or_default().push(r);
    }
    let per_knob = groups
        .into_iter()
        .map(|(knob, rs)| KnobEval {
            knob,
            accuracy: rs.iter().filter(|r| r.correct).count() as f64 / rs.len() as f64,
            d_bar_answer: rs.iter().map(|r| r.d_bar_answer).sum::<f64>() / rs.len() as f64,
        })
        .collect();
    EvalSnapshot {
        per_knob,
        overall_accuracy: records.iter().filter(|r| r.correct).count() as f64
            / records.len().max(1) as f64,
        overall_d_bar_answer: records.iter().map(|r| r.d_bar_answer).sum::<f64>()
            / records.len().max(1) as f64,
    }
}

/// Read a metrics JSONL file back.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: TrainMetrics = serde_json::from_str(line).map_err(|e| Error::DataAt {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}
