//! Dataset serialization: one JSON header line with the vocabulary, then one
//! JSON line per instance. Writes go to a temp file and are renamed into
//! place on success.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcfg::Pcfg;

use super::{brevo, depo, lano, mano, TaskInstance, TaskKind, Vocabulary};

pub const DATASET_SCHEMA: &str = "anira-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub task: TaskKind,
    pub vocab_version: String,
    pub vocab: Vocabulary,
    pub count: usize,
}

#[derive(Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<TaskInstance>,
}

/// Write header + instances as JSONL, atomically.
pub fn write_dataset(path: &Path, task: TaskKind, vocab: &Vocabulary, instances: &[TaskInstance]) -> Result<()> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        task,
        vocab_version: vocab.version(),
        vocab: vocab.clone(),
        count: instances.len(),
    };
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for inst in instances {
            serde_json::to_writer(&mut w, inst)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a dataset; parse failures carry the file position.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let display = path.display().to_string();

    let (_, first) = lines.next().ok_or_else(|| Error::DataAt {
        path: display.clone(),
        line: 1,
        msg: "empty dataset file".to_string(),
    })?;
    let header: DatasetHeader =
        serde_json::from_str(&first?).map_err(|e| Error::DataAt {
            path: display.clone(),
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::DataAt {
            path: display,
            line: 1,
            msg: format!("unknown schema {:?}", header.schema),
        });
    }

    let mut instances = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line).map_err(|e| Error::DataAt {
            path: display.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if inst.task != header.task {
            return Err(Error::DataAt {
                path: display.clone(),
                line: i + 1,
                msg: format!("instance task {} does not match header {}", inst.task, header.task),
            });
        }
        instances.push(inst);
    }
    Ok(Dataset { header, instances })
}

/// The vocabulary a task uses (LANO derives its own from a grammar).
pub fn task_vocab(task: TaskKind, grammar: Option<&Pcfg>) -> Result<Vocabulary> {
    match task {
        TaskKind::Mano => Ok(mano::mano_vocab()),
        TaskKind::Brevo => Ok(brevo::brevo_vocab()),
        TaskKind::Depo => Ok(depo::depo_vocab()),
        TaskKind::Lano => {
            let g = grammar.ok_or_else(|| {
                Error::contract("synthetic-language generation needs a grammar")
            })?;
            Ok(lano::lano_vocab(g))
        }
    }
}

/// Generate `count` instances stratified evenly over the knob range, keyed by
/// `(master_seed, knob, index)` so shards are reproducible.
pub fn generate_stratified(
    task: TaskKind,
    knob_lo: i64,
    knob_hi: i64,
    count: usize,
    master_seed: u64,
    grammar: Option<&Pcfg>,
    depo_n: usize,
) -> Result<Vec<TaskInstance>> {
    if knob_lo > knob_hi {
        return Err(Error::contract(format!(
            "empty knob range {knob_lo}..={knob_hi}"
        )));
    }
    let knobs: Vec<i64> = (knob_lo..=knob_hi).collect();
    let per = count / knobs.len();
    let extra = count % knobs.len();
    let mut out = Vec::with_capacity(count);
    for (ki, &knob) in knobs.iter().enumerate() {
        let n_here = per + usize::from(ki < extra);
        for idx in 0..n_here {
            let inst_seed = master_seed
                .wrapping_mul(1_000_003)
                .wrapping_add((knob as u64) << 20)
                .wrapping_add(idx as u64);
            let inst = match task {
                TaskKind::Mano => mano::gen_mano(knob as usize, inst_seed),
                TaskKind::Brevo => brevo::gen_brevo(knob as usize, inst_seed),
                TaskKind::Depo => depo::gen_depo(depo_n, knob as usize, inst_seed),
                TaskKind::Lano => {
                    let g = grammar.ok_or_else(|| {
                        Error::contract("synthetic-language generation needs a grammar")
                    })?;
                    lano::gen_lano(g, inst_seed)
                }
            };
            out.push(inst);
        }
    }
    Ok(out)
}

/// Knob-value histogram rows `(knob, count)`.
pub fn knob_histogram(instances: &[TaskInstance]) -> Vec<(i64, usize)> {
    let mut map = std::collections::BTreeMap::new();
    for inst in instances {
        *map.entry(inst.knob).or_insert(0usize) += 1;
    }
    map.into_iter().collect()
}
