//! Training: the joint supervised objective, masked-cell pre-training, and
//! the epoch loop with validation logging and early stopping.

use crate::corpus::{Cell, LabeledDataset};
use crate::error::{Result, TcnError};
use crate::eval::{evaluate_tables_averaged, Split};
use crate::index::{CellRef, ContextIndex};
use crate::model::{Forward, SampleCtx, TcnModel};
use crate::params::AdamConfig;
use crate::seed::{fnv1a_str, mix};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Sampling streams are salted by purpose so shuffling, masking, and
/// neighbor draws never alias.
const SALT_SHUFFLE: u64 = 0x5348;
const SALT_MASK: u64 = 0x4D53;
/// Evaluation uses a fixed pseudo-epoch so predictions are deterministic and
/// independent of how many epochs trained.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Mixture weight: `gamma` on the type loss, `1 - gamma` on relations.
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of data cells masked for pre-training.
    pub mask_rate: f64,
    pub adam: AdamConfig,
    /// Early stopping patience, in epochs without validation improvement.
    pub patience: usize,
    pub threads: usize,
    /// Neighbor-sample draws averaged per prediction when validating.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            gamma: 0.5,
            batch_size: 16,
            epochs: 30,
            seed: 42,
            mask_rate: 0.10,
            adam: AdamConfig::default(),
            patience: 5,
            threads: 1,
            eval_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TcnError::Data(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(TcnError::Data("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TcnError::Data("epochs must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(TcnError::Data(format!(
                "mask rate {} outside (0, 1)",
                self.mask_rate
            )));
        }
        Ok(())
    }
}

// ---- cell vocabulary and masking ------------------------------------------

/// Vocabulary of distinct normalized non-empty cell values, id by first
/// occurrence. Built from the training split only.
#[derive(Debug, Clone, Default)]
pub struct CellVocab {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl CellVocab {
    pub fn build(ds: &LabeledDataset, table_ids: &[usize]) -> CellVocab {
        let mut vocab = CellVocab::default();
        for &k in table_ids {
            for row in &ds.tables[k].rows {
                for cell in row {
                    if cell.is_empty() || cell.is_masked() {
                        continue;
                    }
                    vocab.insert(&cell.normalized);
                }
            }
        }
        vocab
    }

    pub fn from_values(values: Vec<String>) -> CellVocab {
        let index = values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        CellVocab { values, index }
    }

    fn insert(&mut self, value: &str) {
        if !self.index.contains_key(value) {
            self.index.insert(value.to_string(), self.values.len());
            self.values.push(value.to_string());
        }
    }

    pub fn get(&self, value: &str) -> Option<usize> {
        self.index.get(value).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn hash(&self) -> u64 {
        let mut h = self.values.len() as u64;
        for v in &self.values {
            h = fnv1a_str(h, v);
        }
        h
    }
}

/// A masked cell: where it was, what it said, and its recovery class
/// (`None` when the value is outside the vocabulary; such cells are skipped
/// by the loss and counted).
#[derive(Debug, Clone)]
pub struct MaskTarget {
    pub cell: CellRef,
    pub value: String,
    pub vocab_id: Option<usize>,
}

/// Replace `floor(rate * data_cells)` cells (at least one; header rows,
/// empty cells and topics are never touched) with the mask sentinel.
/// Deterministic for a fixed seed.
pub fn mask_cells(
    ds: &LabeledDataset,
    rate: f64,
    seed: u64,
    vocab: &CellVocab,
) -> Result<(LabeledDataset, Vec<MaskTarget>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(TcnError::Data(format!("mask rate {rate} outside (0, 1)")));
    }
    let mut candidates = Vec::new();
    for table in &ds.tables {
        for m in 1..table.num_rows() {
            for n in 0..table.num_cols() {
                let cell = table.cell(m, n);
                if !cell.is_empty() && !cell.is_masked() {
                    candidates.push(CellRef::new(table.table_id, m, n));
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(TcnError::Data("no maskable cells in dataset".into()));
    }
    let count = ((rate * candidates.len() as f64).floor() as usize).clamp(1, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[SALT_MASK]));
    let mut picked: Vec<CellRef> =
        rand::seq::index::sample(&mut rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
    picked.sort();

    let mut masked = ds.clone();
    let mut targets = Vec::with_capacity(count);
    for at in picked {
        let cell = &mut masked.tables[at.table].rows[at.row][at.col];
        let value = cell.normalized.clone();
        *cell = Cell::masked();
        let vocab_id = vocab.get(&value);
        targets.push(MaskTarget {
            cell: at,
            value,
            vocab_id,
        });
    }
    Ok((masked, targets))
}

// ---- batch objectives -------------------------------------------------------

enum Objective<'a> {
    Supervised { gamma: f64 },
    MaskedRecovery { targets: &'a HashMap<usize, Vec<MaskTarget>> },
}

/// Forward + backward over one batch of tables, gradients deposited into the
/// model's store. Returns `(summed loss, skipped mask targets)`.
///
/// With one thread the whole batch shares a tape (neighbor contexts computed
/// once per batch); with more, each table gets its own tape and gradients
/// are accumulated in table order after the join.
fn batch_step(
    model: &mut TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    batch: &[usize],
    ctx: SampleCtx,
    objective: Objective<'_>,
    threads: usize,
) -> Result<(f64, usize)> {
    let threads = crate::parallel::effective_threads(threads);
    if threads <= 1 {
        let mut fwd = Forward::new(model, ds, idx, ctx);
        let (loss, skipped) = match &objective {
            Objective::Supervised { gamma } => {
                let mut terms = Vec::with_capacity(batch.len());
                for &k in batch {
                    terms.push(fwd.supervised_loss(k, *gamma)?);
                }
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = fwd.tape.add(acc, t)?;
                }
                (acc, 0)
            }
            Objective::MaskedRecovery { targets } => {
                let mut batch_targets = Vec::new();
                for &k in batch {
                    if let Some(ts) = targets.get(&k) {
                        batch_targets.extend(ts.iter().cloned());
                    }
                }
                fwd.masked_recovery_loss(&batch_targets)?
            }
        };
        let (value, tape) = fwd.finish(loss)?;
        tape.accumulate_into(&mut model.store);
        return Ok((value, skipped));
    }

    let shared: &TcnModel = model;
    let results = crate::parallel::map_ordered(threads, batch, |&k| {
        let mut fwd = Forward::new(shared, ds, idx, ctx);
        let (loss, skipped) = match &objective {
            Objective::Supervised { gamma } => (fwd.supervised_loss(k, *gamma)?, 0),
            Objective::MaskedRecovery { targets } => {
                let empty = Vec::new();
                let ts = targets.get(&k).unwrap_or(&empty);
                fwd.masked_recovery_loss(ts)?
            }
        };
        let (value, tape) = fwd.finish(loss)?;
        Ok::<_, TcnError>((value, skipped, tape))
    });
    let mut total = 0.0;
    let mut skipped = 0;
    for r in results {
        let (value, s, tape) = r?;
        total += value;
        skipped += s;
        tape.accumulate_into(&mut model.store);
    }
    Ok((total, skipped))
}

/// Value of the joint supervised objective over the given tables (no
/// gradients). Errors if any column is missing a label.
pub fn multitask_loss_value(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    tables: &[usize],
    gamma: f64,
    ctx: SampleCtx,
) -> Result<f64> {
    let mut fwd = Forward::new(model, ds, idx, ctx);
    let mut total = 0.0;
    for &k in tables {
        let loss = fwd.supervised_loss(k, gamma)?;
        total += fwd.tape.value(loss).scalar_value()?;
    }
    Ok(total)
}

/// Value of the masked-recovery objective over targets (no gradients);
/// returns the summed loss and how many targets fell outside the vocabulary.
pub fn masked_loss_value(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    targets: &[MaskTarget],
    ctx: SampleCtx,
) -> Result<(f64, usize)> {
    let mut fwd = Forward::new(model, ds, idx, ctx);
    let (loss, skipped) = fwd.masked_recovery_loss(targets)?;
    let value = fwd.tape.value(loss).scalar_value()?;
    Ok((value, skipped))
}

// ---- epoch loops -------------------------------------------------------------

/// One row of the supervised training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc_type: f64,
    pub val_f1_type: f64,
    pub val_kappa_type: f64,
    pub val_acc_rel: f64,
    pub val_f1_rel: f64,
    pub val_kappa_rel: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// gamma-weighted validation F1 of the retained parameters.
    pub best_score: f64,
}

/// Supervised multi-task training: shuffled mini-batches, per-epoch
/// validation, best-validation parameters retained, early stopping on the
/// gamma-weighted validation F1.
pub fn train_supervised(
    model: &mut TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(TcnError::Data("training and validation splits must be non-empty".into()));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<crate::tensor::Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[epoch as u64, SALT_SHUFFLE]));
        order.shuffle(&mut rng);
        let ctx = SampleCtx {
            root_seed: cfg.seed,
            epoch: epoch as u64,
        };
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, _) = batch_step(
                model,
                ds,
                idx,
                batch,
                ctx,
                Objective::Supervised { gamma: cfg.gamma },
                cfg.threads,
            )?;
            if !loss.is_finite() {
                return Err(TcnError::Numeric(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            model.store.adam_step(&cfg.adam)?;
        }
        let train_loss = epoch_loss / split.train.len() as f64;

        let eval_ctx = SampleCtx {
            root_seed: cfg.seed,
            epoch: EVAL_EPOCH,
        };
        let (type_m, rel_m) =
            evaluate_tables_averaged(model, ds, idx, &split.valid, eval_ctx, cfg.eval_samples)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_acc_type: type_m.accuracy,
            val_f1_type: type_m.f1_weighted,
            val_kappa_type: type_m.cohens_kappa,
            val_acc_rel: rel_m.accuracy,
            val_f1_rel: rel_m.f1_weighted,
            val_kappa_rel: rel_m.cohens_kappa,
        });
        let score = cfg.gamma * type_m.f1_weighted + (1.0 - cfg.gamma) * rel_m.f1_weighted;
        let improved = best.as_ref().map_or(true, |(_, s, _)| score > *s);
        if improved {
            best = Some((epoch, score, model.store.snapshot()));
        } else if let Some((be, _, _)) = &best {
            if epoch - be >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_score, snapshot) = best.expect("at least one epoch ran");
    model.store.restore(&snapshot)?;
    Ok(TrainReport {
        log,
        best_epoch,
        best_score,
    })
}

/// One row of the pre-training log.
#[derive(Debug, Clone)]
pub struct PretrainLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mask targets outside the cell vocabulary, skipped this epoch.
    pub skipped: usize,
}

/// Masked-cell pre-training over the training split, validated by the mean
/// recovery loss on the validation split. Best-validation parameters are
/// retained.
pub fn pretrain(
    model: &mut TcnModel,
    masked_ds: &LabeledDataset,
    idx: &ContextIndex,
    targets: &[MaskTarget],
    split: &Split,
    cfg: &TrainConfig,
) -> Result<Vec<PretrainLog>> {
    cfg.validate()?;
    let mut by_table: HashMap<usize, Vec<MaskTarget>> = HashMap::new();
    for t in targets {
        by_table.entry(t.cell.table).or_default().push(t.clone());
    }
    let val_targets: Vec<MaskTarget> = split
        .valid
        .iter()
        .filter_map(|k| by_table.get(k))
        .flatten()
        .cloned()
        .collect();
    let train_tables: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|k| by_table.contains_key(k))
        .collect();
    if train_tables.is_empty() {
        return Err(TcnError::Data("no mask targets fall in the training split".into()));
    }
    let train_target_count: usize = train_tables.iter().map(|k| by_table[k].len()).sum();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<crate::tensor::Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = train_tables.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[epoch as u64, SALT_SHUFFLE]));
        order.shuffle(&mut rng);
        let ctx = SampleCtx {
            root_seed: cfg.seed,
            epoch: epoch as u64,
        };
        let mut epoch_loss = 0.0;
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, s) = batch_step(
                model,
                masked_ds,
                idx,
                batch,
                ctx,
                Objective::MaskedRecovery { targets: &by_table },
                cfg.threads,
            )?;
            if !loss.is_finite() {
                return Err(TcnError::Numeric(format!(
                    "non-finite pre-training loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            skipped += s;
            model.store.adam_step(&cfg.adam)?;
        }
        let train_loss = epoch_loss / train_target_count.max(1) as f64;
        let eval_ctx = SampleCtx {
            root_seed: cfg.seed,
            epoch: EVAL_EPOCH,
        };
        let val_loss = if val_targets.is_empty() {
            train_loss
        } else {
            let (v, _) = masked_loss_value(model, masked_ds, idx, &val_targets, eval_ctx)?;
            v / val_targets.len() as f64
        };
        log.push(PretrainLog {
            epoch,
            train_loss,
            val_loss,
            skipped,
        });
        let improved = best.as_ref().map_or(true, |(_, s, _)| val_loss < *s);
        if improved {
            best = Some((epoch, val_loss, model.store.snapshot()));
        } else if let Some((be, _, _)) = &best {
            if epoch - be >= cfg.patience {
                break;
            }
        }
    }
    let (_, _, snapshot) = best.expect("at least one epoch ran");
    model.store.restore(&snapshot)?;
    Ok(log)
}

/// Copy embedding and aggregator parameters from a pre-trained store into a
/// fresh model; the task heads (and the recovery head) stay newly
/// initialized.
pub fn init_from_pretrained(model: &mut TcnModel, pretrained: &crate::params::ParamStore) -> Result<()> {
    for param in pretrained.iter() {
        if matches!(param.name.as_str(), "m_c" | "m_r" | "m_v") {
            continue;
        }
        let idx = model.store.index_of(&param.name).ok_or_else(|| {
            TcnError::Data(format!(
                "checkpoint parameter {:?} does not exist in this model",
                param.name
            ))
        })?;
        model.store.set_value(idx, (*param.value).clone())?;
    }
    Ok(())
}

// ---- log files ----------------------------------------------------------------

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "epoch,train_loss,val_acc_type,val_f1_type,val_kappa_type,val_acc_rel,val_f1_rel,val_kappa_rel"
    )?;
    for row in log {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch,
            row.train_loss,
            row.val_acc_type,
            row.val_f1_type,
            row.val_kappa_type,
            row.val_acc_rel,
            row.val_f1_rel,
            row.val_kappa_rel
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_pretrain_log(path: &Path, log: &[PretrainLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,skipped")?;
    for row in log {
        writeln!(
            f,
            "{},{:.6},{:.6},{}",
            row.epoch, row.train_loss, row.val_loss, row.skipped
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelVocab, Table};
    use crate::embed::TokenVocab;
    use crate::model::{Dims, ModelConfig, Variant};
    use crate::tensor::Tensor;

    fn table(id: usize, schema: usize, topic: &str, grid: &[&[&str]]) -> Table {
        Table {
            table_id: id,
            schema_id: schema,
            topic: Cell::new(topic),
            rows: grid
                .iter()
                .map(|row| row.iter().map(|s| Cell::new(s)).collect())
                .collect(),
        }
    }

    /// Two-column tables whose object column tokens identify the type.
    fn toy_corpus(n_tables: usize) -> LabeledDataset {
        let mut ds = LabeledDataset {
            num_schemas: 2,
            label_vocab: LabelVocab {
                types: vec!["A".into(), "B".into(), "C".into(), "D".into()],
                relations: vec!["r0".into(), "r1".into(), "r2".into()],
            },
            ..LabeledDataset::default()
        };
        for k in 0..n_tables {
            let schema = k % 2;
            let (ty, rel, word) = if schema == 0 {
                (1, 0, "red")
            } else {
                (2, 1, "blue")
            };
            ds.tables.push(table(
                k,
                schema,
                &format!("topic{k}"),
                &[
                    &["subj", "obj"],
                    &[&format!("s{k}a"), &format!("{word} x{k}a")],
                    &[&format!("s{k}b"), &format!("{word} x{k}b")],
                ],
            ));
            ds.type_labels.insert((k, 0), 0);
            ds.type_labels.insert((k, 1), ty);
            ds.relation_labels.insert((k, 1), rel);
        }
        ds
    }

    fn model_for(ds: &LabeledDataset, seed: u64) -> TcnModel {
        let cfg = ModelConfig {
            dims: Dims::uniform(8),
            views: 2,
            budget: 4,
            variant: Variant::Full,
            share_multiview: false,
            seed,
        };
        TcnModel::new(
            cfg,
            TokenVocab::build(ds),
            ds.label_vocab.types.len(),
            ds.label_vocab.relations.len(),
            None,
        )
        .unwrap()
    }

    fn zero_param(model: &mut TcnModel, name: &str) {
        let i = model.store.index_of(name).unwrap();
        let shape = model.store.get(i).value.shape.clone();
        model.store.set_value(i, Tensor::zeros(shape)).unwrap();
    }

    #[test]
    fn uniform_logits_give_analytic_loss() {
        // Zero fusion weights force h = 0, so both heads emit uniform
        // logits: J = 0.5 * 2 ln|C| + 0.5 * ln|R| for one 2-column table.
        let ds = toy_corpus(2);
        let mut model = model_for(&ds, 1);
        zero_param(&mut model, "w_h");
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 0,
            epoch: 0,
        };
        let loss = multitask_loss_value(&model, &ds, &idx, &[0], 0.5, ctx).unwrap();
        let expect = 0.5 * 2.0 * 4.0_f64.ln() + 0.5 * 3.0_f64.ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((expect - 1.9356).abs() < 1e-4);
    }

    #[test]
    fn gamma_boundaries_isolate_task_heads() {
        let ds = toy_corpus(2);
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 3,
            epoch: 0,
        };
        // gamma = 1: relation gradients vanish
        let mut model = model_for(&ds, 2);
        let (_, _) = {
            let mut fwd = Forward::new(&model, &ds, &idx, ctx);
            let loss = fwd.supervised_loss(0, 1.0).unwrap();
            let (v, tape) = fwd.finish(loss).unwrap();
            tape.accumulate_into(&mut model.store);
            (v, ())
        };
        let m_r = model.store.by_name("m_r").unwrap();
        assert!(m_r.grad.data.iter().all(|&g| g == 0.0));
        let m_c = model.store.by_name("m_c").unwrap();
        assert!(m_c.grad.data.iter().any(|&g| g != 0.0));

        // gamma = 0: type gradients vanish
        let mut model = model_for(&ds, 2);
        {
            let mut fwd = Forward::new(&model, &ds, &idx, ctx);
            let loss = fwd.supervised_loss(0, 0.0).unwrap();
            let (_, tape) = fwd.finish(loss).unwrap();
            tape.accumulate_into(&mut model.store);
        }
        let m_c = model.store.by_name("m_c").unwrap();
        assert!(m_c.grad.data.iter().all(|&g| g == 0.0));
        let m_r = model.store.by_name("m_r").unwrap();
        assert!(m_r.grad.data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_is_linear_in_gamma() {
        let ds = toy_corpus(4);
        let model = model_for(&ds, 5);
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 1,
            epoch: 0,
        };
        let tables = [0, 1];
        let j0 = multitask_loss_value(&model, &ds, &idx, &tables, 0.0, ctx).unwrap();
        let j1 = multitask_loss_value(&model, &ds, &idx, &tables, 1.0, ctx).unwrap();
        let jh = multitask_loss_value(&model, &ds, &idx, &tables, 0.5, ctx).unwrap();
        assert!((jh - 0.5 * (j0 + j1)).abs() < 1e-9);
        assert!(j0 >= 0.0 && j1 >= 0.0 && jh >= 0.0);
    }

    #[test]
    fn missing_label_is_reported_with_location() {
        let mut ds = toy_corpus(2);
        ds.type_labels.remove(&(1, 1));
        let model = model_for(&ds, 5);
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 1,
            epoch: 0,
        };
        let err = multitask_loss_value(&model, &ds, &idx, &[1], 0.5, ctx)
            .unwrap_err()
            .to_string();
        assert!(err.contains("table 1") && err.contains("column 1"), "{err}");
    }

    #[test]
    fn mask_cells_exact_count_and_exclusions() {
        // 25 tables x 4 data cells = 100 data cells; rate 0.10 masks 10.
        let ds = toy_corpus(25);
        let vocab = CellVocab::build(&ds, &(0..25).collect::<Vec<_>>());
        let (masked, targets) = mask_cells(&ds, 0.10, 7, &vocab).unwrap();
        assert_eq!(targets.len(), 10);
        let mut seen = 0;
        for table in &masked.tables {
            for cell in &table.rows[0] {
                assert!(!cell.is_masked(), "header cell masked");
            }
            assert!(!table.topic.is_masked());
            for row in &table.rows[1..] {
                for cell in row {
                    if cell.is_masked() {
                        seen += 1;
                    }
                }
            }
        }
        assert_eq!(seen, 10);
        for t in &targets {
            assert!(t.cell.row >= 1);
            assert_eq!(t.vocab_id, vocab.get(&t.value));
            assert!(t.vocab_id.is_some());
        }

        // identical seed, identical mask set
        let (_, again) = mask_cells(&ds, 0.10, 7, &vocab).unwrap();
        let a: Vec<_> = targets.iter().map(|t| t.cell).collect();
        let b: Vec<_> = again.iter().map(|t| t.cell).collect();
        assert_eq!(a, b);

        // floor clamps up to one cell
        let (_, one) = mask_cells(&ds, 0.001, 7, &vocab).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn masked_recovery_uniform_logits_analytic() {
        let ds = toy_corpus(2);
        let mut model = model_for(&ds, 9);
        let values: Vec<String> = (0..50).map(|i| format!("value{i}")).collect();
        let vocab = CellVocab::from_values(values);
        model.attach_cell_head(vocab.len()).unwrap();
        zero_param(&mut model, "m_v");
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 0,
            epoch: 0,
        };
        let targets = vec![
            MaskTarget {
                cell: CellRef::new(0, 1, 0),
                value: "value3".into(),
                vocab_id: Some(3),
            },
            MaskTarget {
                cell: CellRef::new(1, 1, 1),
                value: "value7".into(),
                vocab_id: Some(7),
            },
        ];
        let (loss, skipped) = masked_loss_value(&model, &ds, &idx, &targets, ctx).unwrap();
        assert_eq!(skipped, 0);
        let expect = 2.0 * 50.0_f64.ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((expect - 7.824).abs() < 5e-3);
    }

    #[test]
    fn masked_recovery_skips_out_of_vocab_and_empty_batch_is_zero() {
        let ds = toy_corpus(2);
        let mut model = model_for(&ds, 9);
        model.attach_cell_head(5).unwrap();
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 0,
            epoch: 0,
        };
        let targets = vec![MaskTarget {
            cell: CellRef::new(0, 1, 0),
            value: "unseen".into(),
            vocab_id: None,
        }];
        let (loss, skipped) = masked_loss_value(&model, &ds, &idx, &targets, ctx).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(skipped, 1);
        let (zero, s0) = masked_loss_value(&model, &ds, &idx, &[], ctx).unwrap();
        assert_eq!((zero, s0), (0.0, 0));
    }

    #[test]
    fn recovery_loss_decreases_over_adam_steps() {
        let ds = toy_corpus(5);
        let all: Vec<usize> = (0..5).collect();
        let vocab = CellVocab::build(&ds, &all);
        let mut model = model_for(&ds, 21);
        model.attach_cell_head(vocab.len()).unwrap();
        let (masked, targets) = mask_cells(&ds, 0.2, 3, &vocab).unwrap();
        let idx = ContextIndex::build(&masked, 4).unwrap();
        let mut by_table: HashMap<usize, Vec<MaskTarget>> = HashMap::new();
        for t in &targets {
            by_table.entry(t.cell.table).or_default().push(t.clone());
        }
        let adam = AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        };
        let ctx = SampleCtx {
            root_seed: 1,
            epoch: 0,
        };
        let mut losses = Vec::new();
        for _ in 0..20 {
            let (loss, _) = batch_step(
                &mut model,
                &masked,
                &idx,
                &all,
                ctx,
                Objective::MaskedRecovery { targets: &by_table },
                1,
            )
            .unwrap();
            losses.push(loss);
            model.store.adam_step(&adam).unwrap();
        }
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "not strictly decreasing: {losses:?}");
        }
    }

    #[test]
    fn supervised_training_halves_loss_and_is_deterministic() {
        let ds = toy_corpus(10);
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let split = Split {
            train: (0..8).collect(),
            valid: vec![8],
            test: vec![9],
        };
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            seed: 11,
            patience: 30,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut model = model_for(&ds, 31);
        let report = train_supervised(&mut model, &ds, &idx, &split, &cfg).unwrap();
        let first = report.log.first().unwrap().train_loss;
        let last = report.log.last().unwrap().train_loss;
        assert!(
            last <= 0.5 * first,
            "loss did not halve: {first} -> {last}"
        );

        let mut model2 = model_for(&ds, 31);
        let report2 = train_supervised(&mut model2, &ds, &idx, &split, &cfg).unwrap();
        let bits = |r: &TrainReport| -> Vec<u64> {
            r.log.iter().map(|e| e.train_loss.to_bits()).collect()
        };
        assert_eq!(bits(&report), bits(&report2));
        for (a, b) in model.store.iter().zip(model2.store.iter()) {
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn init_from_pretrained_copies_trunk_not_heads() {
        let ds = toy_corpus(4);
        let mut source = model_for(&ds, 77);
        source.attach_cell_head(9).unwrap();
        // make the source distinguishable
        let i = source.store.index_of("w_c").unwrap();
        let shape = source.store.get(i).value.shape.clone();
        let n: usize = shape.iter().product();
        source
            .store
            .set_value(i, Tensor::new(shape, vec![0.25; n]).unwrap())
            .unwrap();

        let mut fresh = model_for(&ds, 78);
        let before_mc = fresh.store.by_name("m_c").unwrap().value.data.clone();
        init_from_pretrained(&mut fresh, &source.store).unwrap();
        assert!(fresh
            .store
            .by_name("w_c")
            .unwrap()
            .value
            .data
            .iter()
            .all(|&x| x == 0.25));
        assert_eq!(fresh.store.by_name("m_c").unwrap().value.data, before_mc);
        assert!(fresh.store.by_name("m_v").is_none());
    }
}
