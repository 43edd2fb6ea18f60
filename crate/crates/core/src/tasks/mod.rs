//! Complexity-controlled task suite: generators, exact oracles, vocabulary,
//! and dataset serialization.
//!
//! Every operand, operator, node name, terminal symbol, and control marker is
//! one vocabulary token. All tasks share the control-token scheme
//! `<bos> ... <ans> answer <eoa>`; the k-step successor task encodes its hop
//! count in the query-token identity (`<query-03>`).

pub mod brevo;
pub mod depo;
pub mod io;
pub mod lano;
pub mod mano;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Highest hop count representable by the query-token family.
pub const MAX_QUERY_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mano,
    Brevo,
    Depo,
    Lano,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Mano => "mano",
            TaskKind::Brevo => "brevo",
            TaskKind::Depo => "depo",
            TaskKind::Lano => "lano",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mano" => Ok(TaskKind::Mano),
            "brevo" => Ok(TaskKind::Brevo),
            "depo" => Ok(TaskKind::Depo),
            "lano" => Ok(TaskKind::Lano),
            other => Err(Error::parse(format!("unknown task id {other:?}"))),
        }
    }
}

/// Bidirectional token ↔ id map with the reserved control prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularySerde", into = "VocabularySerde")]
pub struct Vocabulary {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularySerde {
    tokens: Vec<String>,
}

impl From<VocabularySerde> for Vocabulary {
    fn from(v: VocabularySerde) -> Self {
        Vocabulary::from_tokens(v.tokens)
    }
}

impl From<Vocabulary> for VocabularySerde {
    fn from(v: Vocabulary) -> Self {
        VocabularySerde { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Control tokens present in every task vocabulary, at fixed ids.
    pub fn control_tokens() -> Vec<String> {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<ans>".to_string(),
            "<eoa>".to_string(),
            "<query>".to_string(),
        ];
        for k in 1..=MAX_QUERY_K {
            tokens.push(format!("<query-{k:02}>"));
        }
        tokens
    }

    /// Build from task tokens appended after the control prefix.
    pub fn build(task_tokens: &[String]) -> Vocabulary {
        let mut tokens = Self::control_tokens();
        tokens.extend(task_tokens.iter().cloned());
        Vocabulary::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, map }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn ans(&self) -> u32 {
        2
    }

    pub fn eoa(&self) -> u32 {
        3
    }

    pub fn query(&self) -> u32 {
        4
    }

    /// `<query-k>` token id, 1 ≤ k ≤ 10.
    pub fn query_k(&self, k: usize) -> Result<u32> {
        if k < 1 || k > MAX_QUERY_K {
            return Err(Error::contract(format!(
                "query hop count {k} outside 1..={MAX_QUERY_K}"
            )));
        }
        Ok(4 + k as u32)
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.map
            .get(token)
            .copied()
            .ok_or_else(|| Error::parse(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::OutOfVocab {
                id,
                vocab: self.tokens.len(),
            })
    }

    pub fn tokenize(&self, tokens: &[impl AsRef<str>]) -> Result<Vec<u32>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// Content hash identifying this vocabulary in dataset headers and
    /// checkpoints.
    pub fn version(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0]);
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One K-step successor query with its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepoQuery {
    pub start: String,
    pub answer: String,
}

/// Raw structured payload kept alongside the token ids for oracle replay and
/// analysis probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Mano {
        expr: Vec<String>,
    },
    Brevo {
        edges: Vec<(String, String)>,
        query: String,
    },
    Depo {
        cycle: Vec<String>,
        k: u32,
        queries: Vec<DepoQuery>,
    },
    Lano {
        text: Vec<String>,
    },
}

/// One generated task instance; the unit of all dataset I/O.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub knob: i64,
    pub seed: u64,
    pub prompt_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub payload: Payload,
}

impl TaskInstance {
    pub fn full_tokens(&self) -> Vec<u32> {
        let mut out = self.prompt_ids.clone();
        out.extend_from_slice(&self.answer_ids);
        out
    }

    /// Next-token training view: `(full, targets, mask)` where position `t`
    /// predicts `targets[t] = full[t+1]` and `mask[t]` marks supervised
    /// positions. Supervision covers answer tokens; the k-step successor
    /// task supervises only the answer token of each query.
    pub fn training_view(&self) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
        let full = self.full_tokens();
        let n = full.len();
        let mut targets = vec![0u32; n];
        for t in 0..n - 1 {
            targets[t] = full[t + 1];
        }
        let supervised = self.supervised_target_positions();
        let mut mask = vec![false; n];
        for p in supervised {
            if p >= 1 {
                mask[p - 1] = true;
            }
        }
        (full, targets, mask)
    }

    /// Indices (into the full sequence) of tokens that are supervised.
    fn supervised_target_positions(&self) -> Vec<usize> {
        let prompt_len = self.prompt_ids.len();
        match &self.payload {
            Payload::Depo { queries, .. } => {
                // each query block is [<query-k>, start, <ans>, answer, <eoa>]
                (0..queries.len())
                    .map(|qi| prompt_len + qi * 5 + 3)
                    .collect()
            }
            _ => (prompt_len..prompt_len + self.answer_ids.len()).collect(),
        }
    }

    /// Positions whose logits predict supervised tokens; the answer-token
    /// compute allocation d̄ averages exit depths over these.
    pub fn answer_positions(&self) -> Vec<usize> {
        self.supervised_target_positions()
            .into_iter()
            .filter(|&p| p >= 1)
            .map(|p| p - 1)
            .collect()
    }

    /// Recompute the answer from the payload; must equal the stored ids.
    pub fn oracle_answer_ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        match &self.payload {
            Payload::Mano { expr } => {
                let value = mano::mano_oracle(expr)?;
                Ok(vec![vocab.id(&value.to_string())?, vocab.eoa()])
            }
            Payload::Brevo { edges, query } => {
                let order = brevo::brevo_oracle(edges, query)?;
                let mut ids = vocab.tokenize(&order)?;
                ids.push(vocab.eoa());
                Ok(ids)
            }
            Payload::Depo { cycle, k, queries } => {
                let mut ids = Vec::new();
                for q in queries {
                    let ans = depo::walk_successor(cycle, &q.start, *k as usize)?;
                    ids.push(vocab.query_k(*k as usize)?);
                    ids.push(vocab.id(&q.start)?);
                    ids.push(vocab.ans());
                    ids.push(vocab.id(&ans)?);
                    ids.push(vocab.eoa());
                }
                Ok(ids)
            }
            Payload::Lano { text } => {
                let prompt_terminals = self.prompt_ids.len() - 1; // minus <bos>
                let mut ids = vocab.tokenize(&text[prompt_terminals..])?;
                ids.push(vocab.eoa());
                Ok(ids)
            }
        }
    }
}
