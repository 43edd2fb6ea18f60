//! K-step successor retrieval on a directed cycle.
//!
//! The cycle over `N` nodes is presented as shuffled edges, followed by up to
//! `min(N, 10)` queries serialized as `<query-k> <q> <ans> <y> <eoa>` with
//! the hop count `K` encoded in the query-token identity. Node names are
//! single tokens, so each answer is a single token; supervision applies only
//! to that answer token. The knob is `K`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;

use super::brevo::{node_name, NAME_POOL};
use super::{DepoQuery, Payload, TaskInstance, TaskKind, Vocabulary, MAX_QUERY_K};

pub const MAX_QUERIES: usize = 10;

pub fn depo_vocab() -> Vocabulary {
    super::brevo::brevo_vocab()
}

/// Random cycle instance with `n` nodes and hop count `k` shared by all of
/// its queries.
pub fn gen_depo(n: usize, k: usize, seed: u64) -> TaskInstance {
    assert!((2..=NAME_POOL).contains(&n), "node count {n} out of range");
    assert!(
        (1..=MAX_QUERY_K).contains(&k),
        "hop count {k} outside the query-token family"
    );
    let vocab = depo_vocab();
    let mut rng = derive_rng_indexed(seed, "depo", &[n as u64, k as u64]);

    let mut pool: Vec<usize> = (0..NAME_POOL).collect();
    pool.shuffle(&mut rng);
    let cycle: Vec<String> = pool[..n].iter().map(|&i| node_name(i)).collect();

    let mut edge_order: Vec<usize> = (0..n).collect();
    edge_order.shuffle(&mut rng);

    let mut starts: Vec<usize> = (0..n).collect();
    starts.shuffle(&mut rng);
    let queries: Vec<DepoQuery> = starts[..MAX_QUERIES.min(n)]
        .iter()
        .map(|&s| DepoQuery {
            start: cycle[s].clone(),
            answer: cycle[(s + k) % n].clone(),
        })
        .collect();

    let mut prompt_ids = vec![vocab.bos()];
    for &i in &edge_order {
        prompt_ids.push(vocab.id(&cycle[i]).expect("name in vocab"));
        prompt_ids.push(vocab.id(&cycle[(i + 1) % n]).expect("name in vocab"));
    }
    let mut answer_ids = Vec::new();
    for q in &queries {
        answer_ids.push(vocab.query_k(k).expect("k in range"));
        answer_ids.push(vocab.id(&q.start).expect("name in vocab"));
        answer_ids.push(vocab.ans());
        answer_ids.push(vocab.id(&q.answer).expect("name in vocab"));
        answer_ids.push(vocab.eoa());
    }

    TaskInstance {
        task: TaskKind::Depo,
        knob: k as i64,
        seed,
        prompt_ids,
        answer_ids,
        payload: Payload::Depo {
            cycle,
            k: k as u32,
            queries,
        },
    }
}

/// K-th successor by walking the cycle step by step.
pub fn walk_successor(cycle: &[String], start: &str, k: usize) -> Result<String> {
    let succ = successor_map(cycle);
    let mut cur = start;
    if !succ.contains_key(start) {
        return Err(Error::parse(format!("start node {start:?} not in cycle")));
    }
    for _ in 0..k {
        cur = succ[cur];
    }
    Ok(cur.to_string())
}

/// K-th successor by composing the successor function k times, then applying
/// it once; the independent route for the walk oracle.
pub fn compose_successor(cycle: &[String], start: &str, k: usize) -> Result<String> {
    let succ = successor_map(cycle);
    if !succ.contains_key(start) {
        return Err(Error::parse(format!("start node {start:?} not in cycle")));
    }
    // identity function, composed with succ k times
    let mut composed: BTreeMap<&str, &str> = succ.keys().map(|&n| (n, n)).collect();
    for _ in 0..k {
        composed = composed.iter().map(|(&n, &m)| (n, succ[m])).collect();
    }
    Ok(composed[start].to_string())
}

fn successor_map(cycle: &[String]) -> BTreeMap<&str, &str> {
    (0..cycle.len())
        .map(|i| (cycle[i].as_str(), cycle[(i + 1) % cycle.len()].as_str()))
        .collect()
}
