//! End-to-end training smoke tests: the loop runs, logs, checkpoints, and a
//! resumed run is bit-identical to an uninterrupted one.

use anira::model::{DeciderKind, ModelConfig, ModelParams};
use anira::tasks::io::generate_stratified;
use anira::tasks::{mano, TaskKind};
use anira::train::{resume, train, TrainConfig};

fn tiny_setup(kind: DeciderKind) -> (ModelParams<f32>, anira::tasks::Vocabulary, Vec<anira::tasks::TaskInstance>, Vec<anira::tasks::TaskInstance>) {
    let vocab = mano::mano_vocab();
    let cfg = ModelConfig {
        depth_max: 3,
        n_heads: 2,
        n_prelude_layers: 1,
        n_coda_layers: 1,
        d_model: 16,
        d_ff: 32,
        decider_d_ff: 32,
        max_seq_len: 32,
        vocab_size: vocab.len(),
        decider_kind: kind,
        gumbel_tau: 1.0,
        rope_base: 10_000.0,
        norm_eps: 1e-6,
        init_std: 0.02,
        seed: 3,
    };
    let params = ModelParams::<f32>::init(cfg);
    let train_set = generate_stratified(TaskKind::Mano, 1, 3, 60, 5, None, 0).unwrap();
    let eval_set = generate_stratified(TaskKind::Mano, 1, 3, 9, 1009, None, 0).unwrap();
    (params, vocab, train_set, eval_set)
}

fn params_bits(p: &ModelParams<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    p.visit(&mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn smoke_run_produces_metrics_and_loadable_checkpoint() {
    let dir = std::env::temp_dir().join(format!("anira-train-smoke-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (params, vocab, train_set, eval_set) = tiny_setup(DeciderKind::Early);
    let cfg = TrainConfig {
        steps: 10,
        batch_size: 4,
        log_interval: 1,
        eval_interval: 10,
        checkpoint_interval: 10,
        eval_per_knob: 3,
        ..Default::default()
    };
    let outcome = train(params, &vocab, &train_set, &eval_set, &cfg, Some(&dir)).unwrap();
    // 10 metric lines, one per step at log_interval 1
    assert_eq!(outcome.metrics.len(), 10);
    assert!(outcome.metrics.iter().all(|m| m.loss.total.is_finite()));
    let last = outcome.metrics.last().unwrap();
    assert!(last.eval.is_some(), "final step must carry an evaluation");

    let final_ckpt = outcome.final_checkpoint.expect("final checkpoint written");
    let loaded = anira::checkpoint::load_checkpoint::<f32>(&final_ckpt).unwrap();
    assert_eq!(loaded.step, 10);
    assert_eq!(params_bits(&loaded.params), params_bits(&outcome.params));

    let metrics_file = dir.join("metrics.jsonl");
    let read_back = anira::train::read_metrics(&metrics_file).unwrap();
    assert_eq!(read_back.len(), 10);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn resumed_run_is_bit_identical_to_uninterrupted() {
    for kind in [DeciderKind::Early, DeciderKind::Online] {
        let dir = std::env::temp_dir().join(format!(
            "anira-train-resume-{}-{kind}",
            std::process::id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        let (params, vocab, train_set, eval_set) = tiny_setup(kind);

        // uninterrupted: 14 steps
        let full_cfg = TrainConfig {
            steps: 14,
            batch_size: 4,
            log_interval: 7,
            eval_interval: 1000,
            checkpoint_interval: 0,
            ..Default::default()
        };
        let uninterrupted = train(
            params.clone(),
            &vocab,
            &train_set,
            &eval_set,
            &full_cfg,
            None,
        )
        .unwrap();

        // interrupted at 7, checkpointed, resumed to 14
        let head_cfg = TrainConfig {
            steps: 7,
            checkpoint_interval: 7,
            ..full_cfg.clone()
        };
        let head = train(
            params.clone(),
            &vocab,
            &train_set,
            &eval_set,
            &head_cfg,
            Some(&dir),
        )
        .unwrap();
        let ckpt = head.final_checkpoint.expect("checkpoint at step 7");
        let resumed = resume::<f32>(&ckpt, &vocab, &train_set, &eval_set, &full_cfg, None).unwrap();

        assert_eq!(
            params_bits(&uninterrupted.params),
            params_bits(&resumed.params),
            "{kind}: resume must reproduce the uninterrupted run exactly"
        );
        // metric stream continues at step 8+
        assert!(resumed.metrics.iter().all(|m| m.step > 7));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

#[test]
fn gamma_zero_reduces_to_pure_cross_entropy() {
    let (params, vocab, train_set, eval_set) = tiny_setup(DeciderKind::Online);
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 4,
        gamma: 0.0,
        log_interval: 1,
        eval_interval: 1000,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let outcome = train(params, &vocab, &train_set, &eval_set, &cfg, None).unwrap();
    for m in &outcome.metrics {
        // L_C is still logged but contributes nothing
        assert_eq!(m.loss.total, m.loss.ce);
        assert!(m.loss.compute.is_finite());
    }
}
