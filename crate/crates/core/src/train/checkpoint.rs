//! Binary checkpoint: magic, version, a JSON header, then every parameter
//! as little-endian `f64` in registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ErcModel, Result, RunConfig, TrainError};
use crate::tensor::Tensor;
use crate::text::{LabelMap, Vocab};

const MAGIC: &[u8; 8] = b"ERCCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub labels: LabelMap,
    pub params: Vec<ParamEntry>,
    pub seed: u64,
    pub epoch: usize,
    pub best_dev_score: f64,
}

fn incompatible(msg: impl Into<String>) -> TrainError {
    TrainError::Compatibility(msg.into())
}

pub fn write_checkpoint(
    mut w: impl Write,
    model: &ErcModel,
    seed: u64,
    epoch: usize,
    best_dev_score: f64,
) -> std::io::Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        labels: model.labels.clone(),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed,
        epoch,
        best_dev_score,
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, t) in model.store.iter() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save(
    path: &Path,
    model: &ErcModel,
    seed: u64,
    epoch: usize,
    best_dev_score: f64,
) -> Result<()> {
    let file = File::create(path).map_err(|e| TrainError::io(path, e))?;
    write_checkpoint(BufWriter::new(file), model, seed, epoch, best_dev_score)
        .map_err(|e| TrainError::io(path, e))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ErcModel, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| incompatible("truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(incompatible("not a checkpoint file"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)
        .map_err(|_| incompatible("truncated checkpoint"))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(incompatible(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut b8)
        .map_err(|_| incompatible("truncated checkpoint"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| incompatible("truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| incompatible(format!("bad header: {e}")))?;

    let vocab =
        Vocab::from_tokens(header.vocab.clone()).map_err(|e| incompatible(e.to_string()))?;
    let labels = LabelMap::new(
        header.labels.names().to_vec(),
        header.labels.excluded().map(str::to_string),
    )
    .map_err(|e| incompatible(e.to_string()))?;
    let mut model = ErcModel::new(header.config.clone(), vocab, labels, header.seed);
    if model.store.len() != header.params.len() {
        return Err(incompatible(format!(
            "checkpoint has {} tensors, architecture expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| incompatible(format!("unknown parameter {}", entry.name)))?;
        let expected = model.store.get(id).shape().to_vec();
        if expected != entry.shape {
            return Err(incompatible(format!(
                "{} has shape {:?} in the checkpoint but {:?} in the model (vocabulary of {} tokens)",
                entry.name,
                entry.shape,
                expected,
                model.vocab.len()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)
                .map_err(|_| incompatible("truncated parameter data"))?;
            data.push(f64::from_le_bytes(b8));
        }
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| incompatible(e.to_string()))?;
        model
            .store
            .set(id, t)
            .map_err(|e| incompatible(e.to_string()))?;
    }
    Ok((model, header))
}

pub fn load(path: &Path) -> Result<(ErcModel, CheckpointHeader)> {
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{LabelMap, Vocab};

    fn tiny() -> ErcModel {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 8;
        cfg.model.heads = 2;
        cfg.model.dialogue_heads = 2;
        cfg.model.ffn_dim = 8;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_layers = 1;
        cfg.model.max_len = 8;
        let vocab = Vocab::from_texts(["a b c"], 1);
        ErcModel::new(cfg, vocab, LabelMap::meld(), 3)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = tiny();
        let id = model.head.proj.weight;
        model.store.get_mut(id).data_mut()[0] = std::f64::consts::PI;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, 3, 7, 0.625).unwrap();
        let (back, header) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(header.epoch, 7);
        assert_eq!(header.best_dev_score, 0.625);
        assert_eq!(back.vocab, model.vocab);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(
            read_checkpoint(&b"nonsense"[..]),
            Err(TrainError::Compatibility(_))
        ));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tiny(), 3, 0, 0.0).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(TrainError::Compatibility(_))
        ));
    }
}
