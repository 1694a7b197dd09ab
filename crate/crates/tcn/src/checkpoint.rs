//! Model checkpoints: a JSON header (dimensions, hyper-parameters, label
//! names, vocabulary contents and hashes) followed by the binary parameter
//! blob. Byte-identical for identical model state.

use crate::embed::TokenVocab;
use crate::error::{Result, TcnError};
use crate::model::{Dims, ModelConfig, TcnModel, Variant};
use crate::params::ParamStore;
use crate::train::CellVocab;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TCNCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub dims: Dims,
    pub views: usize,
    pub budget: usize,
    pub gamma: f64,
    pub variant: String,
    pub share_multiview: bool,
    pub type_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub token_vocab_hash: u64,
    pub tokens: Vec<String>,
    pub cell_vocab_hash: Option<u64>,
    pub cell_values: Option<Vec<String>>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    model: &TcnModel,
    gamma: f64,
    type_names: &[String],
    relation_names: &[String],
    cell_vocab: Option<&CellVocab>,
) -> Result<()> {
    let meta = CheckpointMeta {
        version: 1,
        dims: model.cfg.dims,
        views: model.cfg.views,
        budget: model.cfg.budget,
        gamma,
        variant: model.cfg.variant.to_string(),
        share_multiview: model.cfg.share_multiview,
        type_names: type_names.to_vec(),
        relation_names: relation_names.to_vec(),
        token_vocab_hash: model.vocab.hash(),
        tokens: model.vocab.tokens().to_vec(),
        cell_vocab_hash: cell_vocab.map(|v| v.hash()),
        cell_values: cell_vocab.map(|v| v.values().to_vec()),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| TcnError::Data(format!("checkpoint header serialize failed: {e}")))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    model.store.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TcnError::Data("bad checkpoint magic".into()));
    }
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let json_len = u64::from_le_bytes(len_buf) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| TcnError::Data(format!("checkpoint header parse failed: {e}")))?;
    let params = ParamStore::read_from(&mut r)?;
    Ok(Checkpoint { meta, params })
}

/// Rebuild a runnable model from a checkpoint (e.g. for `predict`).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<TcnModel> {
    let cfg = ModelConfig {
        dims: ckpt.meta.dims,
        views: ckpt.meta.views,
        budget: ckpt.meta.budget,
        variant: Variant::from_str(&ckpt.meta.variant)?,
        share_multiview: ckpt.meta.share_multiview,
        seed: 0,
    };
    let vocab = TokenVocab::from_tokens(ckpt.meta.tokens.clone());
    if vocab.hash() != ckpt.meta.token_vocab_hash {
        return Err(TcnError::Data("checkpoint token vocabulary hash mismatch".into()));
    }
    let mut model = TcnModel::new(
        cfg,
        vocab,
        ckpt.meta.type_names.len(),
        ckpt.meta.relation_names.len(),
        None,
    )?;
    if let Some(values) = &ckpt.meta.cell_values {
        model.attach_cell_head(values.len())?;
    }
    for param in ckpt.params.iter() {
        let idx = model.store.index_of(&param.name).ok_or_else(|| {
            TcnError::Data(format!("checkpoint parameter {:?} not in model", param.name))
        })?;
        model.store.set_value(idx, (*param.value).clone())?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Cell, LabeledDataset, LabelVocab, Table};

    fn dataset() -> LabeledDataset {
        LabeledDataset {
            tables: vec![Table {
                table_id: 0,
                schema_id: 0,
                topic: Cell::new("topic words"),
                rows: vec![
                    vec![Cell::new("ha"), Cell::new("hb")],
                    vec![Cell::new("va"), Cell::new("vb")],
                ],
            }],
            num_schemas: 1,
            label_vocab: LabelVocab {
                types: vec!["T0".into(), "T1".into()],
                relations: vec!["R0".into()],
            },
            ..LabeledDataset::default()
        }
    }

    fn model(ds: &LabeledDataset) -> TcnModel {
        let cfg = ModelConfig {
            dims: Dims::uniform(5),
            views: 2,
            budget: 3,
            variant: Variant::Full,
            share_multiview: false,
            seed: 4,
        };
        TcnModel::new(cfg, TokenVocab::build(ds), 2, 1, None).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ds = dataset();
        let mut m = model(&ds);
        let cell_vocab = CellVocab::from_values(vec!["va".into(), "vb".into()]);
        m.attach_cell_head(cell_vocab.len()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tcn");
        save_checkpoint(
            &path,
            &m,
            0.5,
            &ds.label_vocab.types,
            &ds.label_vocab.relations,
            Some(&cell_vocab),
        )
        .unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.meta.gamma, 0.5);
        assert_eq!(ckpt.meta.type_names, ds.label_vocab.types);
        assert_eq!(ckpt.meta.cell_values.as_ref().unwrap().len(), 2);
        let rebuilt = model_from_checkpoint(&ckpt).unwrap();
        for (a, b) in m.store.iter().zip(rebuilt.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // saving twice is byte-identical
        let path2 = dir.path().join("model2.tcn");
        save_checkpoint(
            &path2,
            &m,
            0.5,
            &ds.label_vocab.types,
            &ds.label_vocab.relations,
            Some(&cell_vocab),
        )
        .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tcn");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
