//! Modular-arithmetic expressions in prefix notation.
//!
//! Instances are uniformly random prefix expressions with exactly `L` binary
//! operators from {+, -, *} over operands 0..=22; the answer is the value
//! modulo 23. The knob is `L`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;

use super::{Payload, TaskInstance, TaskKind, Vocabulary};

pub const MODULUS: u64 = 23;
pub const OPERATORS: [&str; 3] = ["+", "-", "*"];
/// Largest operator count with a Catalan number that fits the sampler.
pub const MAX_OPERATORS: usize = 30;

pub fn mano_vocab() -> Vocabulary {
    let mut toks: Vec<String> = OPERATORS.iter().map(|s| s.to_string()).collect();
    toks.extend((0..MODULUS).map(|v| v.to_string()));
    Vocabulary::build(&toks)
}

/// Uniformly random instance with exactly `l` operators.
pub fn gen_mano(l: usize, seed: u64) -> TaskInstance {
    assert!(l >= 1 && l <= MAX_OPERATORS, "operator count {l} out of range");
    let vocab = mano_vocab();
    let mut rng = derive_rng_indexed(seed, "mano", &[l as u64]);
    let mut expr = Vec::with_capacity(2 * l + 1);
    sample_prefix(l, &mut rng, &mut expr);
    let value = mano_oracle(&expr).expect("generated expression is well-formed");

    let mut prompt_ids = vec![vocab.bos()];
    prompt_ids.extend(vocab.tokenize(&expr).expect("expression tokens in vocab"));
    prompt_ids.push(vocab.ans());
    let answer_ids = vec![
        vocab.id(&value.to_string()).expect("value token in vocab"),
        vocab.eoa(),
    ];
    TaskInstance {
        task: TaskKind::Mano,
        knob: l as i64,
        seed,
        prompt_ids,
        answer_ids,
        payload: Payload::Mano { expr },
    }
}

/// Sample a prefix expression with exactly `l` operators, uniform over tree
/// shapes: the left/right operator split is weighted by Catalan products.
fn sample_prefix<R: Rng + ?Sized>(l: usize, rng: &mut R, out: &mut Vec<String>) {
    if l == 0 {
        out.push(rng.random_range(0..MODULUS).to_string());
        return;
    }
    out.push(OPERATORS[rng.random_range(0..OPERATORS.len())].to_string());
    // P(left subtree has j operators) ∝ C_j · C_{l-1-j}
    let weights: Vec<f64> = (0..l)
        .map(|j| catalan(j) * catalan(l - 1 - j))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.random::<f64>() * total;
    let mut left = l - 1;
    for (j, w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            left = j;
            break;
        }
    }
    sample_prefix(left, rng, out);
    sample_prefix(l - 1 - left, rng, out);
}

fn catalan(n: usize) -> f64 {
    // C_n = binom(2n, n) / (n+1); exact in f64 for n ≤ 30
    let mut c = 1.0f64;
    for i in 0..n {
        c = c * 2.0 * (2 * i + 1) as f64 / (i + 2) as f64;
    }
    c
}

/// Single left-to-right stack evaluation performing exactly one reduction per
/// operator; all arithmetic modulo 23. This is the shipped oracle.
pub fn mano_oracle(expr: &[String]) -> Result<u64> {
    let mut stack: Vec<(usize, Option<u64>)> = Vec::new(); // (operator index, left value)
    let mut reductions = 0usize;
    let mut current: Option<u64> = None;
    for tok in expr {
        if let Some(op) = OPERATORS.iter().position(|o| o == tok) {
            if current.is_some() {
                return Err(Error::parse(format!(
                    "operator {tok:?} after a completed expression"
                )));
            }
            stack.push((op, None));
            continue;
        }
        let mut value: u64 = tok
            .parse()
            .map_err(|_| Error::parse(format!("bad operand {tok:?}")))?;
        if value >= MODULUS {
            return Err(Error::parse(format!("operand {value} out of range")));
        }
        // fold the value into pending operators
        loop {
            match stack.last_mut() {
                None => {
                    if current.is_some() {
                        return Err(Error::parse("dangling operand".to_string()));
                    }
                    current = Some(value);
                    break;
                }
                Some((_, left @ None)) => {
                    *left = Some(value);
                    break;
                }
                Some((op, Some(left))) => {
                    value = apply_mod(*op, *left, value);
                    reductions += 1;
                    stack.pop();
                }
            }
        }
    }
    match (current, stack.is_empty()) {
        (Some(v), true) => {
            debug_assert_eq!(reductions, expr.iter().filter(|t| OPERATORS.contains(&t.as_str())).count());
            Ok(v)
        }
        _ => Err(Error::parse("incomplete prefix expression".to_string())),
    }
}

fn apply_mod(op: usize, a: u64, b: u64) -> u64 {
    match op {
        0 => (a + b) % MODULUS,
        1 => (a + MODULUS - b % MODULUS) % MODULUS,
        2 => (a * b) % MODULUS,
        _ => unreachable!("operator index"),
    }
}

/// Independent recursive evaluator used by the verification suites.
pub fn recursive_eval(expr: &[String]) -> Result<u64> {
    let (v, used) = recursive_eval_at(expr, 0)?;
    if used != expr.len() {
        return Err(Error::parse("trailing tokens after expression".to_string()));
    }
    Ok(v)
}

fn recursive_eval_at(expr: &[String], at: usize) -> Result<(u64, usize)> {
    let tok = expr
        .get(at)
        .ok_or_else(|| Error::parse("unexpected end of expression".to_string()))?;
    if let Some(op) = OPERATORS.iter().position(|o| o == tok) {
        let (a, next) = recursive_eval_at(expr, at + 1)?;
        let (b, next) = recursive_eval_at(expr, next)?;
        Ok((apply_mod(op, a, b), next))
    } else {
        let v: u64 = tok
            .parse()
            .map_err(|_| Error::parse(format!("bad operand {tok:?}")))?;
        if v >= MODULUS {
            return Err(Error::parse(format!("operand {v} out of range")));
        }
        Ok((v, at + 1))
    }
}
