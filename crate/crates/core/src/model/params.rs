//! Model parameters: initialization, named traversal, tape attachment.

use rand_chacha::ChaCha8Rng;

use crate::rng::{derive_rng, truncated_normal};
use crate::scalar::Scalar;
use crate::tensor::{GradientTape, RopeTable, Tensor};

use super::config::{DeciderKind, ModelConfig};

/// One pre-norm decoder block: attention + gated feed-forward.
#[derive(Clone)]
pub struct BlockParams<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.d_model;
        let f = cfg.d_ff;
        BlockParams {
            attn_norm: Tensor::full(vec![h], T::one()),
            wq: init_matrix(h, h, cfg.init_std, rng),
            wk: init_matrix(h, h, cfg.init_std, rng),
            wv: init_matrix(h, h, cfg.init_std, rng),
            wo: init_matrix(h, h, cfg.init_std, rng),
            ffn_norm: Tensor::full(vec![h], T::one()),
            w_gate: init_matrix(h, f, cfg.init_std, rng),
            w_up: init_matrix(h, f, cfg.init_std, rng),
            w_down: init_matrix(f, h, cfg.init_std, rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.attn_norm"), &self.attn_norm);
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.ffn_norm"), &self.ffn_norm);
        f(format!("{prefix}.w_gate"), &self.w_gate);
        f(format!("{prefix}.w_up"), &self.w_up);
        f(format!("{prefix}.w_down"), &self.w_down);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.attn_norm"), &mut self.attn_norm);
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.ffn_norm"), &mut self.ffn_norm);
        f(format!("{prefix}.w_gate"), &mut self.w_gate);
        f(format!("{prefix}.w_up"), &mut self.w_up);
        f(format!("{prefix}.w_down"), &mut self.w_down);
    }
}

/// Decider head: learnable-scale normalization, then a gated-width FFN to
/// D logits (early) or a single halting logit (online).
#[derive(Clone)]
pub struct DeciderParams<T: Scalar> {
    pub norm: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Scalar> DeciderParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.d_model;
        let f = cfg.decider_d_ff;
        let out = match cfg.decider_kind {
            DeciderKind::Early => cfg.depth_max,
            DeciderKind::Online => 1,
        };
        DeciderParams {
            norm: Tensor::full(vec![h], T::one()),
            w_in: init_matrix(h, f, cfg.init_std, rng),
            w_out: init_matrix(f, out, cfg.init_std, rng),
            b_out: Tensor::zeros(vec![out]),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("decider.norm".into(), &self.norm);
        f("decider.w_in".into(), &self.w_in);
        f("decider.w_out".into(), &self.w_out);
        f("decider.b_out".into(), &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("decider.norm".into(), &mut self.norm);
        f("decider.w_in".into(), &mut self.w_in);
        f("decider.w_out".into(), &mut self.w_out);
        f("decider.b_out".into(), &mut self.b_out);
    }

    pub fn param_count(&self) -> usize {
        self.norm.numel() + self.w_in.numel() + self.w_out.numel() + self.b_out.numel()
    }
}

/// Full parameter set plus the rotary table derived from the config.
#[derive(Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub prelude: Vec<BlockParams<T>>,
    pub core: BlockParams<T>,
    pub coda: Vec<BlockParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    pub decider: DeciderParams<T>,
    pub rope: RopeTable<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal init (std from config) for projections, zeros for
    /// biases, ones for norm scales. Driven by the run's "init" stream.
    pub fn init(config: ModelConfig) -> Self {
        config.validate().expect("valid model config");
        let mut rng = derive_rng(config.seed, &["init"]);
        let embedding = init_matrix(config.vocab_size, config.d_model, config.init_std, &mut rng);
        let prelude = (0..config.n_prelude_layers)
            .map(|_| BlockParams::init(&config, &mut rng))
            .collect();
        let core = BlockParams::init(&config, &mut rng);
        let coda = (0..config.n_coda_layers)
            .map(|_| BlockParams::init(&config, &mut rng))
            .collect();
        let final_norm = Tensor::full(vec![config.d_model], T::one());
        let unembed = init_matrix(config.d_model, config.vocab_size, config.init_std, &mut rng);
        let decider = DeciderParams::init(&config, &mut rng);
        let rope = RopeTable::new(config.max_seq_len, config.head_dim(), config.rope_base);
        ModelParams {
            config,
            embedding,
            prelude,
            core,
            coda,
            final_norm,
            unembed,
            decider,
            rope,
        }
    }

    /// Deterministic named traversal of every parameter tensor.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("embedding".into(), &self.embedding);
        for (i, b) in self.prelude.iter().enumerate() {
            b.visit(&format!("prelude.{i}"), f);
        }
        self.core.visit("core", f);
        for (i, b) in self.coda.iter().enumerate() {
            b.visit(&format!("coda.{i}"), f);
        }
        f("final_norm".into(), &self.final_norm);
        f("unembed".into(), &self.unembed);
        self.decider.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("embedding".into(), &mut self.embedding);
        for (i, b) in self.prelude.iter_mut().enumerate() {
            b.visit_mut(&format!("prelude.{i}"), f);
        }
        self.core.visit_mut("core", f);
        for (i, b) in self.coda.iter_mut().enumerate() {
            b.visit_mut(&format!("coda.{i}"), f);
        }
        f("final_norm".into(), &mut self.final_norm);
        f("unembed".into(), &mut self.unembed);
        self.decider.visit_mut(f);
    }

    /// Copy of the parameter set with every tensor watched on `tape`.
    pub fn tracked(&self, tape: &GradientTape<T>) -> ModelParams<T> {
        let mut out = self.clone();
        out.visit_mut(&mut |_, t| *t = tape.watch(t));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Fraction of parameters in the decider head; the shipped defaults keep
    /// this near 8%.
    pub fn decider_fraction(&self) -> f64 {
        self.decider.param_count() as f64 / self.param_count() as f64
    }
}

fn init_matrix<T: Scalar, R: rand::Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::cast(truncated_normal(rng, std)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_traversal_is_deterministic_and_complete() {
        let cfg = ModelConfig::desk_default(32, DeciderKind::Early);
        let params = ModelParams::<f32>::init(cfg);
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n));
        let mut names2 = Vec::new();
        params.visit(&mut |n, _| names2.push(n));
        assert_eq!(names, names2);
        assert!(names.contains(&"core.w_gate".to_string()));
        assert!(names.contains(&"decider.b_out".to_string()));
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn decider_budget_near_eight_percent_for_shipped_defaults() {
        // asserted within ±3 percentage points of 8%
        for (cfg_name, cfg) in [
            ("default/early", ModelConfig::desk_default(32, DeciderKind::Early)),
            ("default/online", ModelConfig::desk_default(32, DeciderKind::Online)),
            ("mano/early", ModelConfig::desk_mano(33, DeciderKind::Early)),
            ("mano/online", ModelConfig::desk_mano(33, DeciderKind::Online)),
            ("big-vocab/early", ModelConfig::desk_default(70, DeciderKind::Early)),
        ] {
            let params = ModelParams::<f32>::init(cfg);
            let frac = params.decider_fraction();
            assert!(
                (0.05..=0.11).contains(&frac),
                "{cfg_name}: decider fraction {frac:.4} outside 8% ± 3pp"
            );
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk_default(16, DeciderKind::Online);
        let a = ModelParams::<f64>::init(cfg.clone());
        let b = ModelParams::<f64>::init(cfg);
        let mut equal = true;
        a.visit(&mut |name, t| {
            let mut other = None;
            b.visit(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.data().to_vec());
                }
            });
            if other.expect("name present") != t.data() {
                equal = false;
            }
        });
        assert!(equal);
    }
}
