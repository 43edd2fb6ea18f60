//! Synthetic-language modeling: strings sampled from a PCFG.
//!
//! An instance is one sampled derivation split into a short prompt prefix
//! and its continuation. There is no single difficulty knob (knob = 0);
//! per-token difficulty comes from the incremental-parser proxies.

use crate::pcfg::Pcfg;
use crate::rng::derive_rng_indexed;

use super::{Payload, TaskInstance, TaskKind, Vocabulary};

/// Terminals kept as answer continuation at minimum.
const PROMPT_TERMINALS: usize = 4;
/// Generation length guard; derivations longer than this are resampled.
pub const MAX_TERMINALS: usize = 128;

pub fn lano_vocab(grammar: &Pcfg) -> Vocabulary {
    let mut terms: Vec<String> = grammar.terminals().to_vec();
    terms.sort();
    Vocabulary::build(&terms)
}

/// Sample one language-modeling instance from the grammar.
pub fn gen_lano(grammar: &Pcfg, seed: u64) -> TaskInstance {
    let vocab = lano_vocab(grammar);
    let mut rng = derive_rng_indexed(seed, "lano", &[]);
    let (text, _depth) = grammar
        .sample(&mut rng, MAX_TERMINALS, 64)
        .expect("grammar produces bounded strings");
    let prompt_terminals = PROMPT_TERMINALS.min(text.len().saturating_sub(1)).max(1);

    let mut prompt_ids = vec![vocab.bos()];
    prompt_ids.extend(
        vocab
            .tokenize(&text[..prompt_terminals])
            .expect("terminals in vocab"),
    );
    let mut answer_ids = vocab
        .tokenize(&text[prompt_terminals..])
        .expect("terminals in vocab");
    answer_ids.push(vocab.eoa());

    TaskInstance {
        task: TaskKind::Lano,
        knob: 0,
        seed,
        prompt_ids,
        answer_ids,
        payload: Payload::Lano { text },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcfg::default_lano_grammar;

    #[test]
    fn instance_splits_prompt_and_continuation() {
        let g = default_lano_grammar();
        let vocab = lano_vocab(&g);
        let inst = gen_lano(&g, 12);
        let Payload::Lano { text } = &inst.payload else {
            unreachable!()
        };
        assert_eq!(inst.prompt_ids.len(), 1 + PROMPT_TERMINALS);
        assert_eq!(
            inst.prompt_ids.len() - 1 + inst.answer_ids.len() - 1,
            text.len()
        );
        assert_eq!(inst.knob, 0);
        assert_eq!(inst.oracle_answer_ids(&vocab).unwrap(), inst.answer_ids);
    }

    #[test]
    fn single_string_grammar_is_constant() {
        let g = Pcfg::parse("S -> A B : 1.0\nA -> 'a' : 1.0\nB -> 'b' : 1.0").unwrap();
        let a = gen_lano(&g, 0);
        let b = gen_lano(&g, 1);
        let Payload::Lano { text: ta } = &a.payload else {
            unreachable!()
        };
        let Payload::Lano { text: tb } = &b.payload else {
            unreachable!()
        };
        assert_eq!(ta, tb);
        assert_eq!(ta, &vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let g = default_lano_grammar();
        assert_eq!(gen_lano(&g, 42), gen_lano(&g, 42));
        assert_ne!(gen_lano(&g, 42), gen_lano(&g, 43));
    }
}
