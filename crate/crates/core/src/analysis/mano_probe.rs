//! Prefix-observable parse-state features for modular-arithmetic questions,
//! from a deterministic stack parser.

use crate::error::{Error, Result};
use crate::tasks::mano::OPERATORS;

/// Parse state immediately before consuming each question token.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ManoParseState {
    pub position: usize,
    pub is_operator: bool,
    /// Pre-token operator stack depth d_t.
    pub stack_depth: usize,
    /// Remaining operands for the current top-of-stack operator, r_t ∈
    /// {0,1,2}; 0 at the root operator token (empty stack).
    pub remaining_operands: usize,
    /// Pre-token completed subtree size s_t: operator nodes of the outermost
    /// subtree completed while consuming the preceding token (completions
    /// nest, so the outermost contains them all).
    pub completed_subtree_size: usize,
    /// Operator subtrees reduced while consuming this token; these sum to
    /// the expression's operator count over all tokens.
    pub completions_here: usize,
}

/// Replay the single-pass stack evaluation of a prefix expression and record
/// the parse state before each token.
pub fn mano_parse_state(expr: &[String]) -> Result<Vec<ManoParseState>> {
    // frames: (has left operand, operator nodes under the left operand)
    let mut stack: Vec<(bool, usize)> = Vec::new();
    let mut out = Vec::with_capacity(expr.len());
    let mut finished = false;
    // size of the outermost subtree completed at the previous token
    let mut completed_prev = 0usize;

    for (position, tok) in expr.iter().enumerate() {
        if finished {
            return Err(Error::parse("tokens after a completed expression"));
        }
        let is_operator = OPERATORS.contains(&tok.as_str());
        let remaining_operands = match stack.last() {
            None => 0,
            Some((false, _)) => 2,
            Some((true, _)) => 1,
        };
        let state_index = out.len();
        out.push(ManoParseState {
            position,
            is_operator,
            stack_depth: stack.len(),
            remaining_operands,
            completed_subtree_size: completed_prev,
            completions_here: 0,
        });
        completed_prev = 0;

        if is_operator {
            stack.push((false, 0));
            continue;
        }
        if tok.parse::<u64>().is_err() {
            return Err(Error::parse(format!("bad token {tok:?}")));
        }
        // an operand closes zero or more operator subtrees
        let mut completed_ops = 0usize; // operator nodes under the rising value
        let mut completions = 0usize;
        loop {
            match stack.last_mut() {
                None => {
                    finished = true;
                    break;
                }
                Some((has_left @ false, left_ops)) => {
                    *has_left = true;
                    *left_ops = completed_ops;
                    break;
                }
                Some((true, left_ops)) => {
                    // reduce: this operator + ops on both sides
                    completed_ops = 1 + *left_ops + completed_ops;
                    completions += 1;
                    stack.pop();
                }
            }
        }
        out[state_index].completions_here = completions;
        completed_prev = if completions > 0 { completed_ops } else { 0 };
    }
    if !finished {
        return Err(Error::parse("incomplete prefix expression"));
    }
    Ok(out)
}
