//! Splits, classification metrics (accuracy, weighted F1, Cohen's kappa),
//! and the multi-run experiment driver used for ablations.

use crate::corpus::LabeledDataset;
use crate::embed::TokenVocab;
use crate::error::{Result, TcnError};
use crate::index::ContextIndex;
use crate::model::{ModelConfig, SampleCtx, TcnModel, Variant};
use crate::seed::mix;
use crate::train::{TrainConfig, EVAL_EPOCH};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Table-granularity partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random table-level split with `floor(ratio * K)` train/valid tables and
/// the rest in test. Deterministic per seed.
pub fn split_dataset(ds: &LabeledDataset, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr <= 0.0 || va <= 0.0 || te <= 0.0 {
        return Err(TcnError::Data(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let k = ds.tables.len();
    let n_train = (tr * k as f64).floor() as usize;
    let n_valid = (va * k as f64).floor() as usize;
    let n_test = k - n_train - n_valid;
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(TcnError::Data(format!(
            "corpus of {k} tables is too small for a {tr}/{va}/{te} split"
        )));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(Split {
        train: ids[..n_train].to_vec(),
        valid: ids[n_train..n_train + n_valid].to_vec(),
        test: ids[n_train + n_valid..].to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub cohens_kappa: f64,
    pub per_class: Vec<ClassMetrics>,
    pub total: usize,
}

/// Confusion-matrix metrics over class ids. Classes absent from `y_true`
/// carry zero support and therefore no weight in the weighted F1. Kappa uses
/// the convention that a degenerate chance agreement (`p_e = 1`) reports 1
/// on perfect agreement and 0 otherwise.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<MetricsReport> {
    if y_true.is_empty() {
        return Err(TcnError::Data("compute_metrics on empty labels".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(TcnError::Data(format!(
            "label lengths differ: {} true vs {} predicted",
            y_true.len(),
            y_pred.len()
        )));
    }
    let classes = y_true
        .iter()
        .chain(y_pred)
        .copied()
        .max()
        .expect("non-empty")
        + 1;
    let n = y_true.len();
    let mut confusion = vec![0usize; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t * classes + p] += 1;
    }
    let diag: usize = (0..classes).map(|c| confusion[c * classes + c]).sum();
    let accuracy = diag as f64 / n as f64;

    let mut per_class = Vec::with_capacity(classes);
    let mut f1_weighted = 0.0;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let row: usize = (0..classes).map(|j| confusion[c * classes + j]).sum();
        let col: usize = (0..classes).map(|i| confusion[i * classes + c]).sum();
        let precision = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
        let recall = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_weighted += row as f64 * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row,
        });
    }
    f1_weighted /= n as f64;

    let p_o = accuracy;
    let p_e: f64 = (0..classes)
        .map(|c| {
            let row: usize = (0..classes).map(|j| confusion[c * classes + j]).sum();
            let col: usize = (0..classes).map(|i| confusion[i * classes + c]).sum();
            (row as f64 / n as f64) * (col as f64 / n as f64)
        })
        .sum();
    let cohens_kappa = if (1.0 - p_e).abs() < 1e-12 {
        if (p_o - 1.0).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    Ok(MetricsReport {
        accuracy,
        f1_weighted,
        cohens_kappa,
        per_class,
        total: n,
    })
}

/// Predict over the given tables and score both tasks against the labels,
/// pooled across tables (columns for types, subject-object pairs for
/// relations).
pub fn evaluate_tables(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    tables: &[usize],
    ctx: SampleCtx,
) -> Result<(MetricsReport, MetricsReport)> {
    evaluate_tables_averaged(model, ds, idx, tables, ctx, 1)
}

/// Like [`evaluate_tables`] but with prediction-time sample averaging.
pub fn evaluate_tables_averaged(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    tables: &[usize],
    ctx: SampleCtx,
    samples: usize,
) -> Result<(MetricsReport, MetricsReport)> {
    let mut type_true = Vec::new();
    let mut type_pred = Vec::new();
    let mut rel_true = Vec::new();
    let mut rel_pred = Vec::new();
    for &k in tables {
        let pred = crate::model::predict_table_averaged(model, ds, idx, ctx, k, samples)?;
        for (n, (label, _)) in pred.types.iter().enumerate() {
            if let Some(&truth) = ds.type_labels.get(&(k, n)) {
                type_true.push(truth);
                type_pred.push(*label);
            }
        }
        for (i, (label, _)) in pred.relations.iter().enumerate() {
            if let Some(&truth) = ds.relation_labels.get(&(k, i + 1)) {
                rel_true.push(truth);
                rel_pred.push(*label);
            }
        }
    }
    let type_metrics = compute_metrics(&type_true, &type_pred)?;
    let rel_metrics = compute_metrics(&rel_true, &rel_pred)?;
    Ok((type_metrics, rel_metrics))
}

// ---- experiment driver ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub runs: usize,
    /// Root seed; each run derives fresh split/model/training seeds.
    pub seed: u64,
    /// Neighbor-sample draws averaged per prediction at evaluation time.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub cohens_kappa: f64,
}

impl TaskSummary {
    fn from_report(r: &MetricsReport) -> TaskSummary {
        TaskSummary {
            accuracy: r.accuracy,
            f1_weighted: r.f1_weighted,
            cohens_kappa: r.cohens_kappa,
        }
    }

    fn mean(items: &[TaskSummary]) -> TaskSummary {
        let n = items.len().max(1) as f64;
        TaskSummary {
            accuracy: items.iter().map(|i| i.accuracy).sum::<f64>() / n,
            f1_weighted: items.iter().map(|i| i.f1_weighted).sum::<f64>() / n,
            cohens_kappa: items.iter().map(|i| i.cohens_kappa).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub variant: String,
    pub runs: Vec<(TaskSummary, TaskSummary)>,
    pub mean_type: TaskSummary,
    pub mean_relation: TaskSummary,
}

/// Train-and-test `runs` times with fresh split seeds and report per-task
/// test means. The context index is built once per experiment.
pub fn run_experiment(ds: &LabeledDataset, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.runs == 0 {
        return Err(TcnError::Data("experiment needs at least one run".into()));
    }
    let idx = ContextIndex::build(ds, cfg.model.budget)?;
    let vocab = TokenVocab::build(ds);
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let split = split_dataset(ds, (0.8, 0.1, 0.1), mix(cfg.seed, &[run as u64, 1]))?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = mix(cfg.seed, &[run as u64, 2]);
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = mix(cfg.seed, &[run as u64, 3]);
        let mut model = TcnModel::new(
            model_cfg,
            vocab.clone(),
            ds.label_vocab.types.len(),
            ds.label_vocab.relations.len(),
            None,
        )?;
        crate::train::train_supervised(&mut model, ds, &idx, &split, &train_cfg)?;
        let eval_ctx = SampleCtx {
            root_seed: train_cfg.seed,
            epoch: EVAL_EPOCH,
        };
        let (type_m, rel_m) =
            evaluate_tables_averaged(&model, ds, &idx, &split.test, eval_ctx, cfg.eval_samples)?;
        runs.push((
            TaskSummary::from_report(&type_m),
            TaskSummary::from_report(&rel_m),
        ));
    }
    let types: Vec<TaskSummary> = runs.iter().map(|(t, _)| t.clone()).collect();
    let rels: Vec<TaskSummary> = runs.iter().map(|(_, r)| r.clone()).collect();
    Ok(ExperimentReport {
        variant: cfg.model.variant.to_string(),
        mean_type: TaskSummary::mean(&types),
        mean_relation: TaskSummary::mean(&rels),
        runs,
    })
}

/// Convenience for sweeps/ablations: run one variant with overridden
/// budget/gamma.
pub fn run_variant(
    ds: &LabeledDataset,
    base: &ExperimentConfig,
    variant: Variant,
) -> Result<ExperimentReport> {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    run_experiment(ds, &cfg)
}
