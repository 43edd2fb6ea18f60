//! Checkpoint container.
//!
//! Layout: 8-byte magic `ANCKPT01`, a little-endian u64 header length, a JSON
//! header (config, vocabulary, step, tensor manifest, run metadata), then the
//! raw little-endian tensor data — parameters first, optimizer first/second
//! moments after, in manifest order. The format is versioned by the magic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::{AdamW, AdamWConfig};
use crate::scalar::{Dtype, Scalar};
use crate::tasks::Vocabulary;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ANCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    config: ModelConfig,
    vocab: Vocabulary,
    step: usize,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// element offset into the data block
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamWConfig,
    step: usize,
    /// (name, m offset, v offset); lengths match the parameter tensor
    moments: Vec<(String, usize, usize)>,
}

/// Everything a resumed run needs.
pub struct LoadedCheckpoint<T: Scalar> {
    pub params: ModelParams<T>,
    pub optimizer: Option<AdamW<T>>,
    pub vocab: Vocabulary,
    pub step: usize,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    optimizer: Option<&AdamW<T>>,
    vocab: &Vocabulary,
    step: usize,
    meta: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<T> = Vec::new();
    params.visit(&mut |name, t| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        data.extend_from_slice(t.data());
    });
    let optimizer_entry = optimizer.map(|opt| {
        let (ostep, entries) = opt.export_state();
        let mut moments = Vec::new();
        for (name, m, v) in entries {
            let m_off = data.len();
            data.extend_from_slice(&m);
            let v_off = data.len();
            data.extend_from_slice(&v);
            moments.push((name, m_off, v_off));
        }
        OptimizerEntry {
            config: opt.config.clone(),
            step: ostep,
            moments,
        }
    });
    let header = Header {
        dtype: T::DTYPE,
        config: params.config.clone(),
        vocab: vocab.clone(),
        step,
        tensors,
        optimizer: optimizer_entry,
        meta,
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        let mut bytes = Vec::with_capacity(data.len() * T::width());
        for v in &data {
            v.to_le_bytes(&mut bytes);
        }
        f.write_all(&bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::parse(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.dtype != T::DTYPE {
        return Err(Error::contract(format!(
            "checkpoint dtype {:?} does not match requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    let w = T::width();
    if raw.len() % w != 0 {
        return Err(Error::parse("truncated checkpoint data".to_string()));
    }
    let data: Vec<T> = raw.chunks_exact(w).map(T::from_le_slice).collect();

    let mut params = ModelParams::<T>::init(header.config.clone());
    let read_tensor = |entry: &TensorEntry| -> Result<Tensor<T>> {
        let numel: usize = entry.shape.iter().product();
        let slice = data.get(entry.offset..entry.offset + numel).ok_or_else(|| {
            Error::parse(format!("tensor {} out of data bounds", entry.name))
        })?;
        Tensor::new(entry.shape.clone(), slice.to_vec())
    };
    let mut by_name: std::collections::HashMap<&str, &TensorEntry> = Default::default();
    for e in &header.tensors {
        by_name.insert(e.name.as_str(), e);
    }
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, t| match by_name.get(name.as_str()) {
        Some(entry) => match read_tensor(entry) {
            Ok(loaded) => *t = loaded,
            Err(_) => missing.push(name),
        },
        None => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::parse(format!(
            "checkpoint is missing tensors: {missing:?}"
        )));
    }

    let optimizer = match header.optimizer {
        Some(entry) => {
            let mut opt = AdamW::<T>::new(entry.config.clone());
            let mut moments = Vec::new();
            for (name, m_off, v_off) in entry.moments {
                let Some(te) = by_name.get(name.as_str()) else {
                    return Err(Error::parse(format!("optimizer state for unknown {name}")));
                };
                let numel: usize = te.shape.iter().product();
                let m = data
                    .get(m_off..m_off + numel)
                    .ok_or_else(|| Error::parse("optimizer m out of bounds".to_string()))?
                    .to_vec();
                let v = data
                    .get(v_off..v_off + numel)
                    .ok_or_else(|| Error::parse("optimizer v out of bounds".to_string()))?
                    .to_vec();
                moments.push((name, m, v));
            }
            opt.import_state(entry.step, moments);
            Some(opt)
        }
        None => None,
    };

    Ok(LoadedCheckpoint {
        params,
        optimizer,
        vocab: header.vocab,
        step: header.step,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeciderKind;
    use crate::tasks::mano::mano_vocab;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join(format!("anira-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            decider_d_ff: 32,
            n_heads: 2,
            depth_max: 3,
            max_seq_len: 16,
            vocab_size: 41,
            ..ModelConfig::desk_default(41, DeciderKind::Online)
        };
        let params = ModelParams::<f32>::init(cfg);
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut grads = crate::objective::GradMap::new();
        grads.insert("embedding".into(), vec![0.01; params.embedding.numel()]);
        let mut p2 = params.clone();
        opt.apply(&mut p2, &grads);
        let vocab = mano_vocab();
        save_checkpoint(
            &path,
            &p2,
            Some(&opt),
            &vocab,
            17,
            serde_json::json!({"run": "test"}),
        )
        .unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.vocab.version(), vocab.version());
        assert_eq!(loaded.meta["run"], "test");
        let opt2 = loaded.optimizer.expect("optimizer saved");
        assert_eq!(opt2.step_count(), opt.step_count());
        let mut equal = true;
        p2.visit(&mut |name, t| {
            loaded.params.visit(&mut |n2, t2| {
                if n2 == name && t.data() != t2.data() {
                    equal = false;
                }
            });
        });
        assert!(equal, "parameters differ after round trip");

        // dtype gate
        assert!(load_checkpoint::<f64>(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
