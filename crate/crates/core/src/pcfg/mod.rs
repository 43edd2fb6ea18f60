//! Probabilistic context-free grammars in binary + lexical form, an
//! incremental prefix parser over them, and a brute-force enumeration oracle.
//!
//! Grammar files are plain text, one rule per line:
//!
//! ```text
//! # comment
//! S  -> NP VP : 0.8
//! S  -> 'a'   : 0.2
//! NP -> 'a'   : 1.0
//! ```
//!
//! The start symbol is the left-hand side of the first rule. Rules with more
//! than two right-hand symbols are binarized at load with deterministic fresh
//! nonterminal names; quoted terminals inside multi-symbol rules get fresh
//! preterminals. Unary nonterminal rules and empty right-hand sides are
//! rejected — the chart recurrences require the binary+lexical form.

mod brute;
mod incremental;

pub use brute::{
    brute_force_inside, brute_force_partial_derivations, enumerate_trees, random_test_grammar,
    BruteForceTable, MAX_BRUTE_LEN,
};
pub use incremental::{extract_sequence_proxies, ParseCharts, TokenComplexityRecord};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

pub type NtId = usize;
pub type TermId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRule {
    pub lhs: NtId,
    pub left: NtId,
    pub right: NtId,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicalRule {
    pub lhs: NtId,
    pub term: TermId,
    pub prob: f64,
}

/// A PCFG in binary + lexical form.
#[derive(Debug, Clone)]
pub struct Pcfg {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    start: NtId,
    binary: Vec<BinaryRule>,
    lexical: Vec<LexicalRule>,
    /// terminal -> lexical rules producing it
    lex_by_term: Vec<Vec<usize>>,
    /// left child -> binary rules with that left child
    bin_by_left: Vec<Vec<usize>>,
    /// lhs -> (binary rule ids, lexical rule ids)
    by_lhs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Pcfg {
    pub fn parse(text: &str) -> Result<Pcfg> {
        let mut raw_rules: Vec<(String, Vec<Symbol>, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, prob) = split_prob(line, lineno)?;
            let (lhs, rhs) = split_arrow(head, lineno)?;
            if rhs.is_empty() {
                return Err(Error::parse(format!(
                    "line {}: empty right-hand side",
                    lineno + 1
                )));
            }
            raw_rules.push((lhs, rhs, prob));
        }
        if raw_rules.is_empty() {
            return Err(Error::parse("grammar has no rules"));
        }
        Self::from_raw(raw_rules)
    }

    fn from_raw(raw: Vec<(String, Vec<Symbol>, f64)>) -> Result<Pcfg> {
        let mut nonterminals: Vec<String> = Vec::new();
        let mut nt_map: HashMap<String, NtId> = HashMap::new();
        let mut terminals: Vec<String> = Vec::new();
        let mut term_map: HashMap<String, TermId> = HashMap::new();
        let intern_nt = |name: &str, nts: &mut Vec<String>, map: &mut HashMap<String, NtId>| {
            *map.entry(name.to_string()).or_insert_with(|| {
                nts.push(name.to_string());
                nts.len() - 1
            })
        };

        let start = intern_nt(&raw[0].0, &mut nonterminals, &mut nt_map);
        let mut binary: Vec<BinaryRule> = Vec::new();
        let mut lexical: Vec<LexicalRule> = Vec::new();

        for (ri, (lhs_name, rhs, prob)) in raw.into_iter().enumerate() {
            if !(prob.is_finite() && prob > 0.0 && prob <= 1.0) {
                return Err(Error::parse(format!(
                    "rule {ri}: probability {prob} outside (0, 1]"
                )));
            }
            let lhs = intern_nt(&lhs_name, &mut nonterminals, &mut nt_map);
            match rhs.len() {
                1 => match &rhs[0] {
                    Symbol::Terminal(t) => {
                        let term = *term_map.entry(t.clone()).or_insert_with(|| {
                            terminals.push(t.clone());
                            terminals.len() - 1
                        });
                        lexical.push(LexicalRule { lhs, term, prob });
                    }
                    Symbol::Nonterminal(n) => {
                        return Err(Error::parse(format!(
                            "rule {ri}: unary nonterminal rule {lhs_name} -> {n} is not supported; binary+lexical form required"
                        )));
                    }
                },
                _ => {
                    // lexicalize inline terminals, then right-binarize
                    let mut syms: Vec<NtId> = Vec::with_capacity(rhs.len());
                    for (si, sym) in rhs.iter().enumerate() {
                        match sym {
                            Symbol::Nonterminal(n) => {
                                syms.push(intern_nt(n, &mut nonterminals, &mut nt_map));
                            }
                            Symbol::Terminal(t) => {
                                let pre_name = format!("{lhs_name}#r{ri}t{si}");
                                let pre = intern_nt(&pre_name, &mut nonterminals, &mut nt_map);
                                let term = *term_map.entry(t.clone()).or_insert_with(|| {
                                    terminals.push(t.clone());
                                    terminals.len() - 1
                                });
                                lexical.push(LexicalRule {
                                    lhs: pre,
                                    term,
                                    prob: 1.0,
                                });
                                syms.push(pre);
                            }
                        }
                    }
                    // X -> s0 s1 ... sn  ⇒  X -> s0 X#r.1, X#r.1 -> s1 X#r.2, ...
                    let mut lhs_cur = lhs;
                    let mut prob_cur = prob;
                    for k in 0..syms.len() - 2 {
                        let fresh_name = format!("{lhs_name}#r{ri}.{}", k + 1);
                        let fresh = intern_nt(&fresh_name, &mut nonterminals, &mut nt_map);
                        binary.push(BinaryRule {
                            lhs: lhs_cur,
                            left: syms[k],
                            right: fresh,
                            prob: prob_cur,
                        });
                        lhs_cur = fresh;
                        prob_cur = 1.0;
                    }
                    binary.push(BinaryRule {
                        lhs: lhs_cur,
                        left: syms[syms.len() - 2],
                        right: syms[syms.len() - 1],
                        prob: prob_cur,
                    });
                }
            }
        }

        let g = Pcfg::assemble(nonterminals, terminals, start, binary, lexical)?;
        g.validate()?;
        Ok(g)
    }

    fn assemble(
        nonterminals: Vec<String>,
        terminals: Vec<String>,
        start: NtId,
        binary: Vec<BinaryRule>,
        lexical: Vec<LexicalRule>,
    ) -> Result<Pcfg> {
        let mut lex_by_term = vec![Vec::new(); terminals.len()];
        for (i, r) in lexical.iter().enumerate() {
            lex_by_term[r.term].push(i);
        }
        let mut bin_by_left = vec![Vec::new(); nonterminals.len()];
        for (i, r) in binary.iter().enumerate() {
            bin_by_left[r.left].push(i);
        }
        let mut by_lhs = vec![(Vec::new(), Vec::new()); nonterminals.len()];
        for (i, r) in binary.iter().enumerate() {
            by_lhs[r.lhs].0.push(i);
        }
        for (i, r) in lexical.iter().enumerate() {
            by_lhs[r.lhs].1.push(i);
        }
        Ok(Pcfg {
            nonterminals,
            terminals,
            start,
            binary,
            lexical,
            lex_by_term,
            bin_by_left,
            by_lhs,
        })
    }

    /// Per-nonterminal rule probabilities must sum to 1 within 1e-12.
    pub fn validate(&self) -> Result<()> {
        for (nt, (bins, lexes)) in self.by_lhs.iter().enumerate() {
            let sum: f64 = bins.iter().map(|&i| self.binary[i].prob).sum::<f64>()
                + lexes.iter().map(|&i| self.lexical[i].prob).sum::<f64>();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::parse(format!(
                    "rules for {} sum to {sum}, expected 1",
                    self.nonterminals[nt]
                )));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> NtId {
        self.start
    }

    pub fn n_nonterminals(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn nonterminal_name(&self, id: NtId) -> &str {
        &self.nonterminals[id]
    }

    pub fn nonterminal_id(&self, name: &str) -> Option<NtId> {
        self.nonterminals.iter().position(|n| n == name)
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn terminal_id(&self, name: &str) -> Option<TermId> {
        self.terminals.iter().position(|t| t == name)
    }

    pub fn binary_rules(&self) -> &[BinaryRule] {
        &self.binary
    }

    pub fn lexical_rules(&self) -> &[LexicalRule] {
        &self.lexical
    }

    pub fn rule_count(&self) -> usize {
        self.binary.len() + self.lexical.len()
    }

    pub(crate) fn lexical_for_terminal(&self, term: TermId) -> &[usize] {
        &self.lex_by_term[term]
    }

    pub(crate) fn binary_with_left(&self, left: NtId) -> &[usize] {
        &self.bin_by_left[left]
    }

    /// Sample one derivation top-down; returns the terminal string and the
    /// derivation depth (nonterminal expansion levels). Fails after
    /// `max_retries` attempts exceeding `max_len` terminals.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        max_len: usize,
        max_retries: usize,
    ) -> Result<(Vec<String>, usize)> {
        'retry: for _ in 0..max_retries.max(1) {
            let mut out: Vec<TermId> = Vec::new();
            let mut max_depth = 0usize;
            // explicit stack of (symbol, depth)
            let mut stack = vec![(self.start, 1usize)];
            while let Some((nt, depth)) = stack.pop() {
                max_depth = max_depth.max(depth);
                if out.len() > max_len || depth > 64 {
                    continue 'retry;
                }
                let (bins, lexes) = &self.by_lhs[nt];
                let mut dart: f64 = rng.random();
                let mut chosen: Option<ChosenRule> = None;
                for &bi in bins {
                    dart -= self.binary[bi].prob;
                    if dart <= 0.0 {
                        chosen = Some(ChosenRule::Binary(bi));
                        break;
                    }
                }
                if chosen.is_none() {
                    for &li in lexes {
                        dart -= self.lexical[li].prob;
                        if dart <= 0.0 {
                            chosen = Some(ChosenRule::Lexical(li));
                            break;
                        }
                    }
                }
                let chosen = chosen.unwrap_or_else(|| {
                    if let Some(&li) = lexes.last() {
                        ChosenRule::Lexical(li)
                    } else {
                        ChosenRule::Binary(*bins.last().expect("nonterminal has rules"))
                    }
                });
                match chosen {
                    ChosenRule::Binary(bi) => {
                        let r = &self.binary[bi];
                        // right pushed first so left expands first
                        stack.push((r.right, depth + 1));
                        stack.push((r.left, depth + 1));
                    }
                    ChosenRule::Lexical(li) => out.push(self.lexical[li].term),
                }
            }
            if out.len() <= max_len {
                return Ok((
                    out.into_iter()
                        .map(|t| self.terminals[t].clone())
                        .collect(),
                    max_depth,
                ));
            }
        }
        Err(Error::numeric(format!(
            "grammar sampling exceeded {max_len} terminals in every retry"
        )))
    }
}

enum ChosenRule {
    Binary(usize),
    Lexical(usize),
}

enum Symbol {
    Nonterminal(String),
    Terminal(String),
}

fn split_prob(line: &str, lineno: usize) -> Result<(&str, f64)> {
    let (head, p) = line.rsplit_once(':').ok_or_else(|| {
        Error::parse(format!("line {}: missing ': probability'", lineno + 1))
    })?;
    let prob: f64 = p
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("line {}: bad probability {p:?}", lineno + 1)))?;
    Ok((head.trim(), prob))
}

fn split_arrow(head: &str, lineno: usize) -> Result<(String, Vec<Symbol>)> {
    let (lhs, rhs) = head
        .split_once("->")
        .ok_or_else(|| Error::parse(format!("line {}: missing '->'", lineno + 1)))?;
    let lhs = lhs.trim();
    if lhs.is_empty() || lhs.contains(char::is_whitespace) {
        return Err(Error::parse(format!(
            "line {}: bad left-hand side {lhs:?}",
            lineno + 1
        )));
    }
    let mut syms = Vec::new();
    for tok in rhs.split_whitespace() {
        if let Some(stripped) = tok.strip_prefix('\'') {
            let t = stripped.strip_suffix('\'').ok_or_else(|| {
                Error::parse(format!("line {}: unterminated terminal {tok:?}", lineno + 1))
            })?;
            if t.is_empty() {
                return Err(Error::parse(format!(
                    "line {}: empty terminal",
                    lineno + 1
                )));
            }
            syms.push(Symbol::Terminal(t.to_string()));
        } else {
            syms.push(Symbol::Nonterminal(tok.to_string()));
        }
    }
    Ok((lhs.to_string(), syms))
}

/// Default synthetic-language grammar: 16 branching nonterminals with two
/// equiprobable binary rules each, 3 terminals behind dedicated preterminals,
/// 35 rules in total, maximum derivation depth 7.
pub const DEFAULT_LANO_GRAMMAR: &str = "\
# default synthetic-language grammar
# 16 branching nonterminals x 2 rules @ 0.5 + 3 lexical rules = 35 rules
S  -> A1 A2 : 0.5
S  -> A2 A1 : 0.5
A1 -> B1 B2 : 0.5
A1 -> B2 B3 : 0.5
A2 -> B3 B1 : 0.5
A2 -> B2 B1 : 0.5
B1 -> C1 C2 : 0.5
B1 -> C2 C1 : 0.5
B2 -> C2 C3 : 0.5
B2 -> C3 C1 : 0.5
B3 -> C1 C3 : 0.5
B3 -> C3 C2 : 0.5
C1 -> D1 D2 : 0.5
C1 -> D2 D3 : 0.5
C2 -> D2 D1 : 0.5
C2 -> D3 D1 : 0.5
C3 -> D3 D2 : 0.5
C3 -> D1 D3 : 0.5
D1 -> E1 E2 : 0.5
D1 -> E2 E3 : 0.5
D2 -> E2 E1 : 0.5
D2 -> E3 E4 : 0.5
D3 -> E4 E1 : 0.5
D3 -> E1 E3 : 0.5
E1 -> Pa Pb : 0.5
E1 -> Pb Pa : 0.5
E2 -> Pb Pc : 0.5
E2 -> Pc Pb : 0.5
E3 -> Pa Pc : 0.5
E3 -> Pc Pa : 0.5
E4 -> Pa Pa : 0.5
E4 -> Pc Pc : 0.5
Pa -> 'a' : 1.0
Pb -> 'b' : 1.0
Pc -> 'c' : 1.0
";

/// Parse the shipped default grammar.
pub fn default_lano_grammar() -> Pcfg {
    Pcfg::parse(DEFAULT_LANO_GRAMMAR).expect("default grammar is well-formed")
}

#[cfg(test)]
mod grammar_tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn parses_and_validates_default_grammar() {
        let g = default_lano_grammar();
        assert_eq!(g.terminals().len(), 3);
        assert_eq!(g.rule_count(), 35);
        // 16 branching + 3 preterminals
        assert_eq!(g.n_nonterminals(), 19);
        g.validate().unwrap();
    }

    #[test]
    fn default_grammar_depth_is_seven_and_length_fixed() {
        let g = default_lano_grammar();
        let mut rng = derive_rng(3, &["glen"]);
        for _ in 0..50 {
            let (s, depth) = g.sample(&mut rng, 128, 5).unwrap();
            assert_eq!(s.len(), 64);
            assert_eq!(depth, 7);
        }
    }

    #[test]
    fn rejects_malformed_grammars() {
        assert!(Pcfg::parse("S -> A : 1.0\nA -> 'a' : 1.0").is_err(), "unary nt rule");
        assert!(Pcfg::parse("S -> 'a' : 0.5").is_err(), "probs must sum to 1");
        assert!(Pcfg::parse("S 'a' : 1.0").is_err(), "missing arrow");
        assert!(Pcfg::parse("S -> 'a'").is_err(), "missing probability");
        assert!(Pcfg::parse("").is_err(), "empty grammar");
    }

    #[test]
    fn binarizes_long_rules_preserving_distribution() {
        let g = Pcfg::parse(
            "S -> 'a' 'b' 'c' : 0.25\nS -> 'a' 'a' : 0.75\n",
        )
        .unwrap();
        g.validate().unwrap();
        let mut rng = derive_rng(4, &["bin"]);
        let mut abc = 0;
        let n = 20_000;
        for _ in 0..n {
            let (s, _) = g.sample(&mut rng, 8, 3).unwrap();
            if s == ["a", "b", "c"] {
                abc += 1;
            } else {
                assert_eq!(s, ["a", "a"]);
            }
        }
        let frac = abc as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.02, "got {frac}");
    }

    #[test]
    fn deterministic_single_string_grammars() {
        let g = Pcfg::parse("S -> 'a' : 1.0").unwrap();
        let mut rng = derive_rng(5, &["det"]);
        assert_eq!(g.sample(&mut rng, 4, 1).unwrap().0, ["a"]);
        let g = Pcfg::parse("S -> A B : 1.0\nA -> 'a' : 1.0\nB -> 'b' : 1.0").unwrap();
        assert_eq!(g.sample(&mut rng, 4, 1).unwrap().0, ["a", "b"]);
    }

    #[test]
    fn two_rule_stochastic_grammar_matches_tree_probabilities() {
        // S -> 'a' with 0.3, S -> 'b' 'b' with 0.7: string frequencies must
        // match derivation probabilities within TV 0.02 over many samples
        let g = Pcfg::parse("S -> 'a' : 0.3\nS -> 'b' 'b' : 0.7").unwrap();
        let mut rng = derive_rng(6, &["freq"]);
        let n = 100_000;
        let mut a = 0usize;
        for _ in 0..n {
            if g.sample(&mut rng, 4, 2).unwrap().0 == ["a"] {
                a += 1;
            }
        }
        let pa = a as f64 / n as f64;
        let tv = (pa - 0.3).abs();
        assert!(tv < 0.02, "tv {tv}");
    }
}
