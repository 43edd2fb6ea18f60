//! Incremental prefix parser: inside probabilities and partial-derivation
//! mass, extended one token at a time, with per-token complexity proxies.
//!
//! After a push that brings the prefix to length `n`, the new chart content
//! is exactly the β cells ending at `n` plus the partial-derivation entries
//! whose recognized left child ends at `n`. The per-token proxies read those
//! two frontiers:
//!
//! * `active_gamma_slice` — distinct `(i, Y, Z)` with nonzero mass of a
//!   recognized `Y` over `[i, n)` expecting `Z` from `n` (parse-space
//!   expansion),
//! * `active_beta_end` — nonzero `(i, X)` with `β[i, X, n] > 0` (parse
//!   convergence),
//! * `ops_add` / `ops_mul` — chart-cell accumulations and probability
//!   products performed during the push; combinations with zero mass are
//!   skipped and count nothing.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::{NtId, Pcfg};

/// Per-token complexity proxies recorded by `parse_push_token`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TokenComplexityRecord {
    /// 0-based index of the pushed token.
    pub position: usize,
    /// parse-space expansion
    pub active_gamma_slice: usize,
    /// parse convergence
    pub active_beta_end: usize,
    pub ops_add: usize,
    pub ops_mul: usize,
}

/// Inside chart β[i, X, k] and partial-derivation mass γ, grown prefix by
/// prefix.
pub struct ParseCharts {
    n: usize,
    n_nt: usize,
    /// (i, k) span -> dense per-nonterminal inside probabilities.
    beta: HashMap<(usize, usize), Vec<f64>>,
    /// Per split j: (span start i, binary rule id) -> p(rule) · β[i, left, j].
    /// γ[i, j, Y, Z] is the sum over rules X -> Y Z of these masses.
    partials: Vec<HashMap<(usize, usize), f64>>,
}

impl ParseCharts {
    pub fn new(grammar: &Pcfg) -> Self {
        ParseCharts {
            n: 0,
            n_nt: grammar.n_nonterminals(),
            beta: HashMap::new(),
            partials: vec![HashMap::new()],
        }
    }

    /// Current prefix length.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// β[i, X, k]; spans outside 0 ≤ i < k ≤ n are an error.
    pub fn inside_probability(&self, x: NtId, i: usize, k: usize) -> Result<f64> {
        if i >= k || k > self.n || x >= self.n_nt {
            return Err(Error::contract(format!(
                "span [{i}, {k}) with nonterminal {x} out of range (prefix length {})",
                self.n
            )));
        }
        Ok(self.beta.get(&(i, k)).map(|v| v[x]).unwrap_or(0.0))
    }

    /// γ[i, j, Y, Z]: accumulated mass of partial derivations with Y
    /// recognized over [i, j) and Z expected from j.
    pub fn partial_derivation_mass(
        &self,
        grammar: &Pcfg,
        i: usize,
        j: usize,
        y: NtId,
        z: NtId,
    ) -> f64 {
        let Some(slice) = self.partials.get(j) else {
            return 0.0;
        };
        slice
            .iter()
            .filter(|((ii, ri), _)| {
                *ii == i && {
                    let r = &grammar.binary_rules()[*ri];
                    r.left == y && r.right == z
                }
            })
            .map(|(_, &m)| m)
            .sum()
    }

    /// Extend the charts with one token, recording the step's proxies.
    pub fn push_token(&mut self, grammar: &Pcfg, token: &str) -> Result<TokenComplexityRecord> {
        let term = grammar
            .terminal_id(token)
            .ok_or_else(|| Error::parse(format!("unknown terminal {token:?}")))?;
        let n = self.n + 1;
        let mut ops_add = 0usize;
        let mut ops_mul = 0usize;

        // Lexical cell [n-1, n).
        let mut lex_cell = vec![0.0; self.n_nt];
        for &li in grammar.lexical_for_terminal(term) {
            let rule = &grammar.lexical_rules()[li];
            lex_cell[rule.lhs] += rule.prob;
            ops_add += 1;
        }
        self.beta.insert((n - 1, n), lex_cell);

        // Binary completions: new cells [i, n) in order of increasing width.
        // The right child [j, n) is always a cell created this push (j > i),
        // the recognized left part comes from the partial-derivation chart.
        for i in (0..n.saturating_sub(1)).rev() {
            let mut cell = vec![0.0; self.n_nt];
            for j in i + 1..n {
                let right_cell = match self.beta.get(&(j, n)) {
                    Some(c) => c.clone(),
                    None => continue,
                };
                if let Some(slice) = self.partials.get(j) {
                    for ((ii, ri), &mass) in slice.iter() {
                        if *ii != i || mass == 0.0 {
                            continue;
                        }
                        let rule = &grammar.binary_rules()[*ri];
                        let rb = right_cell[rule.right];
                        if rb == 0.0 {
                            continue;
                        }
                        cell[rule.lhs] += mass * rb;
                        ops_mul += 1;
                        ops_add += 1;
                    }
                }
            }
            if cell.iter().any(|&v| v != 0.0) {
                self.beta.insert((i, n), cell);
            }
        }

        // Partial derivations opened at split n: every new constituent
        // Y over [i, n) seeds the rules X -> Y Z that now expect Z.
        let mut slice: HashMap<(usize, usize), f64> = HashMap::new();
        let mut gamma_keys: HashSet<(usize, NtId, NtId)> = HashSet::new();
        let mut beta_end = 0usize;
        for i in 0..n {
            let Some(cell) = self.beta.get(&(i, n)) else {
                continue;
            };
            for (y, &by) in cell.iter().enumerate() {
                if by == 0.0 {
                    continue;
                }
                beta_end += 1;
                for &ri in grammar.binary_with_left(y) {
                    let rule = &grammar.binary_rules()[ri];
                    let mass = rule.prob * by;
                    ops_mul += 1;
                    *slice.entry((i, ri)).or_insert(0.0) += mass;
                    ops_add += 1;
                    gamma_keys.insert((i, rule.left, rule.right));
                }
            }
        }
        let gamma_count = gamma_keys.len();
        self.partials.push(slice);
        self.n = n;

        Ok(TokenComplexityRecord {
            position: n - 1,
            active_gamma_slice: gamma_count,
            active_beta_end: beta_end,
            ops_add,
            ops_mul,
        })
    }

    /// Count of nonzero β cells ending at `k`.
    pub fn nonzero_ending_at(&self, k: usize) -> usize {
        (0..k)
            .filter_map(|i| self.beta.get(&(i, k)))
            .map(|cell| cell.iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

/// Fold of `push_token` over a whole sequence.
pub fn extract_sequence_proxies(
    grammar: &Pcfg,
    tokens: &[String],
) -> Result<Vec<TokenComplexityRecord>> {
    let mut charts = ParseCharts::new(grammar);
    tokens
        .iter()
        .map(|t| charts.push_token(grammar, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{brute_force_inside, default_lano_grammar, Pcfg};
    use super::*;

    fn ab_grammar() -> Pcfg {
        Pcfg::parse("S -> A B : 1.0\nA -> 'a' : 1.0\nB -> 'b' : 1.0").unwrap()
    }

    #[test]
    fn two_token_grammar_walkthrough() {
        let g = ab_grammar();
        let mut charts = ParseCharts::new(&g);

        // after "a": one partial derivation (A done over [0,1), B expected)
        let rec = charts.push_token(&g, "a").unwrap();
        assert_eq!(rec.active_gamma_slice, 1);
        assert_eq!(rec.active_beta_end, 1); // A over [0,1)
        let a_id = g.nonterminal_id("A").unwrap();
        let b_id = g.nonterminal_id("B").unwrap();
        assert_eq!(charts.partial_derivation_mass(&g, 0, 1, a_id, b_id), 1.0);

        // after "b": S spans [0,2) with probability 1; B and S end at 2
        let rec = charts.push_token(&g, "b").unwrap();
        let s_id = g.nonterminal_id("S").unwrap();
        assert_eq!(charts.inside_probability(s_id, 0, 2).unwrap(), 1.0);
        assert_eq!(rec.active_beta_end, 2);
        // nothing expects a continuation after the complete sentence
        assert_eq!(rec.active_gamma_slice, 0);
    }

    #[test]
    fn unknown_terminal_is_an_error() {
        let g = ab_grammar();
        let mut charts = ParseCharts::new(&g);
        assert!(charts.push_token(&g, "z").is_err());
    }

    #[test]
    fn token_with_no_reachable_analysis_yields_zero_proxies() {
        // "b" first: no lexical rule chains survive and nothing is expected
        let g = Pcfg::parse("S -> A B : 1.0\nA -> 'a' : 1.0\nB -> 'b' : 1.0").unwrap();
        let mut charts = ParseCharts::new(&g);
        let rec = charts.push_token(&g, "b").unwrap();
        // B itself parses [0,1) but no rule has B as a left child
        assert_eq!(rec.active_gamma_slice, 0);
        let rec = charts.push_token(&g, "b").unwrap();
        assert_eq!(rec.active_gamma_slice, 0);
        let s = g.nonterminal_id("S").unwrap();
        assert_eq!(charts.inside_probability(s, 0, 2).unwrap(), 0.0);
    }

    #[test]
    fn ambiguous_string_sums_tree_probabilities() {
        // two parses of "aaa": (a(aa)) and ((aa)a)
        let g = Pcfg::parse("S -> S S : 0.4\nS -> 'a' : 0.6").unwrap();
        let mut charts = ParseCharts::new(&g);
        for _ in 0..3 {
            charts.push_token(&g, "a").unwrap();
        }
        let s = g.nonterminal_id("S").unwrap();
        // each tree: two binary rules (0.4²) and three lexical (0.6³)
        let per_tree = 0.4f64.powi(2) * 0.6f64.powi(3);
        let want = 2.0 * per_tree;
        let got = charts.inside_probability(s, 0, 3).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn out_of_range_span_is_an_error() {
        let g = ab_grammar();
        let mut charts = ParseCharts::new(&g);
        charts.push_token(&g, "a").unwrap();
        assert!(charts.inside_probability(0, 0, 2).is_err());
        assert!(charts.inside_probability(0, 1, 1).is_err());
    }

    #[test]
    fn proxies_are_deterministic_and_cover_every_position() {
        let g = default_lano_grammar();
        let tokens: Vec<String> = "abcbabca".chars().map(|c| c.to_string()).collect();
        let a = extract_sequence_proxies(&g, &tokens).unwrap();
        let b = extract_sequence_proxies(&g, &tokens).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), tokens.len());
        for (i, r) in a.iter().enumerate() {
            assert_eq!(r.position, i);
        }
    }

    #[test]
    fn incremental_beta_matches_brute_force_on_small_grammars() {
        let g = Pcfg::parse(
            "S -> S S : 0.3\nS -> A B : 0.2\nS -> 'a' : 0.5\nA -> 'a' : 1.0\nB -> 'b' : 0.4\nB -> 'a' : 0.6",
        )
        .unwrap();
        for s in ["a", "ab", "aab", "abab", "aaaa", "ba", "bbbb", "aabbaa"] {
            let tokens: Vec<String> = s.chars().map(|c| c.to_string()).collect();
            let brute = brute_force_inside(&g, &tokens).unwrap();
            let mut charts = ParseCharts::new(&g);
            for t in &tokens {
                charts.push_token(&g, t).unwrap();
            }
            for i in 0..tokens.len() {
                for k in i + 1..=tokens.len() {
                    for x in 0..g.n_nonterminals() {
                        let inc = charts.inside_probability(x, i, k).unwrap();
                        let bf = brute.get(i, x, k);
                        assert!(
                            (inc - bf).abs() < 1e-12,
                            "{s}: span [{i},{k}) nt {x}: incremental {inc} brute {bf}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn per_step_work_stays_polynomial_on_default_grammar() {
        let g = default_lano_grammar();
        let mut rng = crate::rng::derive_rng(9, &["work"]);
        let (s, _) = g.sample(&mut rng, 128, 3).unwrap();
        let recs = extract_sequence_proxies(&g, &s).unwrap();
        let n = s.len();
        let bound = 16 * (n + 1) * (n + 1) * g.n_nonterminals() * g.rule_count();
        for r in &recs {
            assert!(r.ops_add + r.ops_mul <= bound, "step work exploded: {r:?}");
        }
    }
}
