//! Dependency traversal over random DAGs.
//!
//! An instance is a degree-bounded random DAG presented as shuffled edges
//! plus a query node; the answer lists every node the query transitively
//! depends on, in depth-first postorder with predecessors visited in
//! lexicographic name order and the query itself excluded. The knob is the
//! node count `N`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;

use super::{Payload, TaskInstance, TaskKind, Vocabulary};

pub const MAX_DEGREE: usize = 4;
/// Node-name pool shared with the successor task; every name is one token.
pub const NAME_POOL: usize = 50;

pub fn node_name(i: usize) -> String {
    format!("n{i:02}")
}

pub fn brevo_vocab() -> Vocabulary {
    let names: Vec<String> = (0..NAME_POOL).map(node_name).collect();
    Vocabulary::build(&names)
}

/// Random degree-bounded DAG instance with `n` nodes.
pub fn gen_brevo(n: usize, seed: u64) -> TaskInstance {
    assert!((2..=NAME_POOL).contains(&n), "node count {n} out of range");
    let vocab = brevo_vocab();
    let mut rng = derive_rng_indexed(seed, "brevo", &[n as u64]);

    // random names in a random topological order
    let mut pool: Vec<usize> = (0..NAME_POOL).collect();
    pool.shuffle(&mut rng);
    let topo: Vec<String> = pool[..n].iter().map(|&i| node_name(i)).collect();

    // sample predecessor edges backward under the degree caps
    let mut out_degree = vec![0usize; n];
    let mut edges: Vec<(String, String)> = Vec::new();
    for t in 1..n {
        let want = rng.random_range(1..=MAX_DEGREE.min(t));
        let mut avail: Vec<usize> = (0..t).filter(|&p| out_degree[p] < MAX_DEGREE).collect();
        avail.shuffle(&mut rng);
        for &p in avail.iter().take(want) {
            out_degree[p] += 1;
            edges.push((topo[p].clone(), topo[t].clone()));
        }
    }
    edges.shuffle(&mut rng);

    // query a node that actually has dependencies
    let with_preds: Vec<&String> = topo[1..].iter().collect();
    let query = with_preds[rng.random_range(0..with_preds.len())].clone();
    let answer = brevo_oracle(&edges, &query).expect("generated graph is consistent");

    let mut prompt_ids = vec![vocab.bos()];
    for (src, dst) in &edges {
        prompt_ids.push(vocab.id(src).expect("name in vocab"));
        prompt_ids.push(vocab.id(dst).expect("name in vocab"));
    }
    prompt_ids.push(vocab.query());
    prompt_ids.push(vocab.id(&query).expect("name in vocab"));
    prompt_ids.push(vocab.ans());

    let mut answer_ids = vocab.tokenize(&answer).expect("names in vocab");
    answer_ids.push(vocab.eoa());

    TaskInstance {
        task: TaskKind::Brevo,
        knob: n as i64,
        seed,
        prompt_ids,
        answer_ids,
        payload: Payload::Brevo { edges, query },
    }
}

/// Predecessor map with children pre-sorted lexicographically.
pub fn predecessor_map(edges: &[(String, String)]) -> BTreeMap<&str, Vec<&str>> {
    let mut preds: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (src, dst) in edges {
        preds.entry(dst.as_str()).or_default().push(src.as_str());
        preds.entry(src.as_str()).or_default();
    }
    for v in preds.values_mut() {
        v.sort_unstable();
    }
    preds
}

/// Depth-first postorder over predecessor edges from the query, children in
/// lexicographic order, visited-set semantics, query excluded.
pub fn brevo_oracle(edges: &[(String, String)], query: &str) -> Result<Vec<String>> {
    let preds = predecessor_map(edges);
    if !preds.contains_key(query) {
        return Err(Error::parse(format!("query node {query:?} not in graph")));
    }
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    visited.insert(query);
    let mut out = Vec::new();
    dfs(query, &preds, &mut visited, &mut out);
    Ok(out.into_iter().map(str::to_string).collect())
}

fn dfs<'a>(
    node: &'a str,
    preds: &BTreeMap<&'a str, Vec<&'a str>>,
    visited: &mut BTreeSet<&'a str>,
    out: &mut Vec<&'a str>,
) {
    if let Some(parents) = preds.get(node) {
        for &p in parents {
            if visited.insert(p) {
                dfs(p, preds, visited, out);
                out.push(p);
            }
        }
    }
}

/// Transitive predecessor set by brute-force reachability; the verification
/// oracle for the DFS output's membership.
pub fn dependency_set(edges: &[(String, String)], query: &str) -> BTreeSet<String> {
    let preds = predecessor_map(edges);
    let mut set: BTreeSet<&str> = BTreeSet::new();
    let mut stack = vec![query];
    while let Some(u) = stack.pop() {
        if let Some(parents) = preds.get(u) {
            for &p in parents {
                if set.insert(p) {
                    stack.push(p);
                }
            }
        }
    }
    set.remove(query);
    set.into_iter().map(str::to_string).collect()
}

/// Check that `order` is a valid topological order of exactly the dependency
/// set: every edge inside the set points forward.
pub fn is_valid_topological_answer(
    edges: &[(String, String)],
    query: &str,
    order: &[String],
) -> bool {
    let want: BTreeSet<String> = dependency_set(edges, query);
    let got: BTreeSet<String> = order.iter().cloned().collect();
    if want != got || got.len() != order.len() {
        return false;
    }
    let position: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    for (src, dst) in edges {
        if let (Some(&a), Some(&b)) = (position.get(src.as_str()), position.get(dst.as_str())) {
            if a >= b {
                return false;
            }
        }
    }
    true
}
