// Scratch diagnostic: per-class test F1 for selected variants on one split.
use tcn::embed::TokenVocab;
use tcn::eval::{evaluate_tables, split_dataset};
use tcn::index::ContextIndex;
use tcn::model::{Dims, ModelConfig, SampleCtx, TcnModel, Variant};
use tcn::params::AdamConfig;
use tcn::synthgen::{generate, music_ontology, GenConfig};
use tcn::train::{train_supervised, TrainConfig, EVAL_EPOCH};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let ds = generate(
        &music_ontology(),
        &GenConfig {
            topic_ref: 1.0,
            min_rows: 2,
            max_rows: 4,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let budget = env("PROBE_B", 12usize);
    let idx = ContextIndex::build(&ds, budget).unwrap();
    let split_seed = env("PROBE_SPLIT", 99u64);
    let split = split_dataset(&ds, (0.8, 0.1, 0.1), split_seed).unwrap();
    let vocab = TokenVocab::build(&ds);
    let variants: Vec<Variant> = std::env::var("PROBE_VARIANTS")
        .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![Variant::Intra, Variant::Nv]);
    for variant in variants {
        let mcfg = ModelConfig {
            dims: Dims::uniform(env("PROBE_DIM", 24)),
            views: 2,
            budget,
            variant,
            share_multiview: false,
            seed: env("PROBE_MODEL_SEED", 7),
        };
        let mut model = TcnModel::new(mcfg, vocab.clone(), 6, 10, None).unwrap();
        let tcfg = TrainConfig {
            epochs: env("PROBE_EPOCHS", 70),
            patience: env("PROBE_PATIENCE", 12),
            batch_size: 16,
            seed: env("PROBE_MODEL_SEED", 7),
            adam: AdamConfig {
                lr: env("PROBE_LR", 3e-3),
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let report = train_supervised(&mut model, &ds, &idx, &split, &tcfg).unwrap();
        let ctx = SampleCtx {
            root_seed: 7,
            epoch: EVAL_EPOCH,
        };
        let (t, r) = evaluate_tables(&model, &ds, &idx, &split.test, ctx).unwrap();
        println!(
            "== {variant}  type F1w {:.4}  rel F1w {:.4}  (best epoch {} of {})",
            t.f1_weighted,
            r.f1_weighted,
            report.best_epoch,
            report.log.len()
        );
        for (i, c) in t.per_class.iter().enumerate() {
            println!(
                "   type {:<12} f1 {:.3} support {}",
                ds.label_vocab.types[i], c.f1, c.support
            );
        }
        for (i, c) in r.per_class.iter().enumerate() {
            println!(
                "   rel  {:<14} f1 {:.3} support {}",
                ds.label_vocab.relations[i], c.f1, c.support
            );
        }
    }
}
