//! Structural and execution-state features of the dependency-traversal task,
//! recorded at each answer token by replaying the reference depth-first
//! search.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::tasks::brevo::{dependency_set, predecessor_map};

/// Features at one emitted answer token.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BrevoStateFeatures {
    pub position: usize,
    pub node: String,
    /// Total graph size N.
    pub graph_size: usize,
    /// Out-degree of the emitted node (hub structure).
    pub hub_out_degree: usize,
    /// In-degree (dependency count) of the emitted node.
    pub in_degree: usize,
    /// Dependency-set nodes still unemitted after this token.
    pub remaining_subtree: usize,
    /// Depth of the node in the DFS recursion (query at 0).
    pub dfs_depth: usize,
    /// Open recursion path (query excluded) plus unexplored lexicographic
    /// siblings at each level.
    pub frontier_size: usize,
    /// Dependents whose last unmet dependency this emission satisfied.
    pub newly_enabled: usize,
    /// Forward-edge distance from the node to the query.
    pub distance_to_query: usize,
}

/// Replay the reference DFS postorder and record features at each emission.
/// `answer` must equal the oracle output for (edges, query).
pub fn brevo_state_features(
    edges: &[(String, String)],
    query: &str,
    answer: &[String],
) -> Result<Vec<BrevoStateFeatures>> {
    let preds = predecessor_map(edges);
    if !preds.contains_key(query) {
        return Err(Error::parse(format!("query node {query:?} not in graph")));
    }
    let mut successors: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut in_degree: BTreeMap<&str, usize> = BTreeMap::new();
    for (src, dst) in edges {
        successors.entry(src.as_str()).or_default().push(dst.as_str());
        successors.entry(dst.as_str()).or_default();
        *in_degree.entry(dst.as_str()).or_insert(0) += 1;
        in_degree.entry(src.as_str()).or_insert(0);
    }
    let graph_size = preds.len();
    let dep_set = dependency_set(edges, query);
    let distance = reverse_distances(&preds, query);

    let mut replay = Replay {
        preds: &preds,
        successors: &successors,
        in_degree: &in_degree,
        visited: BTreeSet::new(),
        emitted: BTreeSet::new(),
        out: Vec::new(),
        graph_size,
        dep_total: dep_set.len(),
        distance,
    };
    replay.visited.insert(query);
    let mut path: Vec<Frame> = vec![Frame {
        node: query,
        child_index: 0,
    }];
    replay.dfs(&mut path)?;

    let got: Vec<&str> = replay.out.iter().map(|f| f.node.as_str()).collect();
    let want: Vec<&str> = answer.iter().map(|s| s.as_str()).collect();
    if got != want {
        return Err(Error::contract(format!(
            "answer sequence does not match the oracle replay: {got:?} vs {want:?}"
        )));
    }
    Ok(replay.out)
}

struct Frame<'a> {
    node: &'a str,
    child_index: usize,
}

struct Replay<'a> {
    preds: &'a BTreeMap<&'a str, Vec<&'a str>>,
    successors: &'a BTreeMap<&'a str, Vec<&'a str>>,
    in_degree: &'a BTreeMap<&'a str, usize>,
    visited: BTreeSet<&'a str>,
    emitted: BTreeSet<&'a str>,
    out: Vec<BrevoStateFeatures>,
    graph_size: usize,
    dep_total: usize,
    distance: BTreeMap<&'a str, usize>,
}

impl<'a> Replay<'a> {
    fn dfs(&mut self, path: &mut Vec<Frame<'a>>) -> Result<()> {
        let node = path.last().expect("non-empty path").node;
        let parents: Vec<&str> = self.preds.get(node).cloned().unwrap_or_default();
        for (ci, &p) in parents.iter().enumerate() {
            if self.visited.contains(p) {
                continue;
            }
            self.visited.insert(p);
            path.last_mut().expect("non-empty").child_index = ci;
            path.push(Frame {
                node: p,
                child_index: 0,
            });
            self.dfs(path)?;
            path.pop();
            self.emit(p, path)?;
        }
        Ok(())
    }

    fn emit(&mut self, node: &'a str, path: &[Frame<'a>]) -> Result<()> {
        self.emitted.insert(node);
        // frontier: open path below the query plus unexplored, unvisited
        // siblings at every open level
        let mut frontier = path.len() - 1 + 1; // path minus query, plus the node itself
        for frame in path.iter() {
            let parents: Vec<&str> = self.preds.get(frame.node).cloned().unwrap_or_default();
            for &sib in parents.iter().skip(frame.child_index + 1) {
                if !self.visited.contains(sib) {
                    frontier += 1;
                }
            }
        }
        let newly_enabled = self
            .successors
            .get(node)
            .map(|deps| {
                deps.iter()
                    .filter(|&&q| {
                        self.preds
                            .get(q)
                            .map(|ps| ps.iter().all(|p| self.emitted.contains(p)))
                            .unwrap_or(false)
                    })
                    .count()
            })
            .unwrap_or(0);
        self.out.push(BrevoStateFeatures {
            position: self.out.len(),
            node: node.to_string(),
            graph_size: self.graph_size,
            hub_out_degree: self.successors.get(node).map(|v| v.len()).unwrap_or(0),
            in_degree: self.in_degree.get(node).copied().unwrap_or(0),
            remaining_subtree: self.dep_total - self.emitted.len(),
            dfs_depth: path.len(), // query at depth 0; path excludes the node
            frontier_size: frontier,
            newly_enabled,
            distance_to_query: self.distance.get(node).copied().ok_or_else(|| {
                Error::contract(format!("emitted node {node} unreachable from query"))
            })?,
        });
        Ok(())
    }
}

/// BFS distances from the query along predecessor edges (= forward-edge
/// distance from each node to the query).
fn reverse_distances<'a>(
    preds: &BTreeMap<&'a str, Vec<&'a str>>,
    query: &'a str,
) -> BTreeMap<&'a str, usize> {
    let mut dist = BTreeMap::new();
    dist.insert(query, 0usize);
    let mut queue = VecDeque::from([query]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u];
        if let Some(parents) = preds.get(u) {
            for &p in parents {
                if !dist.contains_key(p) {
                    dist.insert(p, du + 1);
                    queue.push_back(p);
                }
            }
        }
    }
    dist
}
