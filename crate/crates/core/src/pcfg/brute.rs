//! Brute-force parse-tree enumeration, the independence oracle for the
//! incremental charts: no dynamic programming, every tree's probability is a
//! fresh product of rule probabilities.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{NtId, Pcfg, TermId};

/// Combinatorial safety bound from the operation contract.
pub const MAX_BRUTE_LEN: usize = 10;
const STEP_BUDGET: u64 = 50_000_000;

/// Inside probabilities and tree counts for every span, via enumeration.
pub struct BruteForceTable {
    n: usize,
    values: HashMap<(usize, NtId, usize), (f64, u64)>,
}

impl BruteForceTable {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, x: NtId, k: usize) -> f64 {
        self.values.get(&(i, x, k)).map(|v| v.0).unwrap_or(0.0)
    }

    pub fn tree_count(&self, i: usize, x: NtId, k: usize) -> u64 {
        self.values.get(&(i, x, k)).map(|v| v.1).unwrap_or(0)
    }

    /// |{(i, X) : β[i, X, k] > 0}| — constituents ending at `k`.
    pub fn nonzero_ending_at(&self, k: usize) -> usize {
        self.values
            .iter()
            .filter(|((_, _, kk), (p, _))| *kk == k && *p > 0.0)
            .count()
    }
}

/// Enumerate every parse tree of every span of `tokens` (≤ 10) and sum exact
/// 64-bit probabilities.
pub fn brute_force_inside(grammar: &Pcfg, tokens: &[String]) -> Result<BruteForceTable> {
    if tokens.len() > MAX_BRUTE_LEN {
        return Err(Error::contract(format!(
            "brute-force parsing refuses strings longer than {MAX_BRUTE_LEN} (got {})",
            tokens.len()
        )));
    }
    let ids: Vec<TermId> = tokens
        .iter()
        .map(|t| {
            grammar
                .terminal_id(t)
                .ok_or_else(|| Error::parse(format!("unknown terminal {t:?}")))
        })
        .collect::<Result<_>>()?;
    let mut budget = STEP_BUDGET;
    let mut values = HashMap::new();
    let n = ids.len();
    for i in 0..n {
        for k in i + 1..=n {
            for x in 0..grammar.n_nonterminals() {
                let (sum, count) = tree_sum(grammar, &ids, i, k, x, &mut budget)?;
                if count > 0 {
                    values.insert((i, x, k), (sum, count));
                }
            }
        }
    }
    Ok(BruteForceTable { n, values })
}

/// Sum of tree probabilities and the number of trees for X over [i, k),
/// enumerated recursively without memoization.
fn tree_sum(
    grammar: &Pcfg,
    tokens: &[TermId],
    i: usize,
    k: usize,
    x: NtId,
    budget: &mut u64,
) -> Result<(f64, u64)> {
    if *budget == 0 {
        return Err(Error::contract(
            "brute-force enumeration budget exceeded; refuse",
        ));
    }
    *budget -= 1;
    let mut sum = 0.0;
    let mut count = 0u64;
    if k - i == 1 {
        for rule in grammar.lexical_rules() {
            if rule.lhs == x && rule.term == tokens[i] {
                sum += rule.prob;
                count += 1;
            }
        }
        return Ok((sum, count));
    }
    for rule in grammar.binary_rules() {
        if rule.lhs != x {
            continue;
        }
        for j in i + 1..k {
            let (ls, lc) = tree_sum(grammar, tokens, i, j, rule.left, budget)?;
            if lc == 0 {
                continue;
            }
            let (rs, rc) = tree_sum(grammar, tokens, j, k, rule.right, budget)?;
            if rc == 0 {
                continue;
            }
            sum += rule.prob * ls * rs;
            count += lc * rc;
        }
    }
    Ok((sum, count))
}

/// Number of parse trees of X over the full span, by enumeration.
pub fn enumerate_trees(grammar: &Pcfg, tokens: &[String], x: NtId) -> Result<u64> {
    let table = brute_force_inside(grammar, tokens)?;
    Ok(table.tree_count(0, x, tokens.len()))
}

/// Brute-force view of the partial-derivation slice at split `j`: the set of
/// `(i, Y, Z)` with some rule X -> Y Z and a nonzero left child Y over
/// [i, j), with the accumulated mass Σ_X p(X -> Y Z) · β[i, Y, j].
pub fn brute_force_partial_derivations(
    grammar: &Pcfg,
    tokens: &[String],
    j: usize,
) -> Result<HashMap<(usize, NtId, NtId), f64>> {
    let table = brute_force_inside(grammar, tokens)?;
    let mut out: HashMap<(usize, NtId, NtId), f64> = HashMap::new();
    for i in 0..j {
        for y in 0..grammar.n_nonterminals() {
            let by = table.get(i, y, j);
            if by == 0.0 {
                continue;
            }
            for &ri in grammar.binary_with_left(y) {
                let rule = &grammar.binary_rules()[ri];
                *out.entry((i, rule.left, rule.right)).or_insert(0.0) += rule.prob * by;
            }
        }
    }
    Ok(out)
}

/// Small random grammars for the verification suites: every nonterminal can
/// reach a terminal, probabilities sum to 1 exactly.
pub fn random_test_grammar<R: rand::Rng + ?Sized>(rng: &mut R) -> Pcfg {
    let n_nt = rng.random_range(2..5usize);
    let n_term = rng.random_range(2..4usize);
    let terms: Vec<String> = (0..n_term)
        .map(|i| char::from(b'a' + i as u8).to_string())
        .collect();
    let mut lines = Vec::new();
    for nt in 0..n_nt {
        let name = |id: usize| format!("N{id}");
        let n_bin = rng.random_range(0..3usize);
        let n_lex = rng.random_range(1..3usize);
        let total = n_bin + n_lex;
        let mut weights: Vec<u32> = (0..total).map(|_| rng.random_range(1..5)).collect();
        let wsum: u32 = weights.iter().sum();
        // exact rational probabilities keep per-LHS sums at 1 within 1e-12
        let mut rules = Vec::new();
        for w in weights.drain(..) {
            rules.push(w as f64 / wsum as f64);
        }
        for (ri, p) in rules.iter().enumerate() {
            if ri < n_bin {
                let l = rng.random_range(0..n_nt);
                let r = rng.random_range(0..n_nt);
                lines.push(format!("{} -> {} {} : {}", name(nt), name(l), name(r), p));
            } else {
                let t = &terms[rng.random_range(0..n_term)];
                lines.push(format!("{} -> '{}' : {}", name(nt), t, p));
            }
        }
    }
    Pcfg::parse(&lines.join("\n")).expect("generated grammar is well-formed")
}
