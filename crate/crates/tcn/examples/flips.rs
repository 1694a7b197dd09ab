// Scratch: list test columns the full variant mistypes.
use tcn::embed::TokenVocab;
use tcn::eval::split_dataset;
use tcn::index::ContextIndex;
use tcn::model::{predict_table_averaged, Dims, ModelConfig, SampleCtx, TcnModel, Variant};
use tcn::params::AdamConfig;
use tcn::synthgen::{generate, music_ontology, GenConfig};
use tcn::train::{train_supervised, TrainConfig, EVAL_EPOCH};

fn main() {
    let ds = generate(
        &music_ontology(),
        &GenConfig { topic_ref: 1.0, min_rows: 2, max_rows: 4, ..GenConfig::default() },
    )
    .unwrap();
    let idx = ContextIndex::build(&ds, 12).unwrap();
    let vocab = TokenVocab::build(&ds);
    let schema_names = ["Discography", "Tracklist", "Catalog", "ArtistRoster", "LabelRegistry"];
    for run in 0..3u64 {
        let split = split_dataset(&ds, (0.8, 0.1, 0.1), 2000 + run).unwrap();
        let mcfg = ModelConfig {
            dims: Dims::uniform(24), views: 2, budget: 12,
            variant: Variant::Full, share_multiview: false, seed: 300 + run,
        };
        let mut model = TcnModel::new(mcfg, vocab.clone(), 6, 10, None).unwrap();
        let tcfg = TrainConfig {
            epochs: 70, patience: 12, batch_size: 16, seed: 300 + run,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            eval_samples: 3,
            ..TrainConfig::default()
        };
        train_supervised(&mut model, &ds, &idx, &split, &tcfg).unwrap();
        let ctx = SampleCtx { root_seed: 300 + run, epoch: EVAL_EPOCH };
        for &k in &split.test {
            let pred = predict_table_averaged(&model, &ds, &idx, ctx, k, 3).unwrap();
            for (n, (label, p)) in pred.types.iter().enumerate() {
                let truth = ds.type_labels[&(k, n)];
                if *label != truth {
                    println!(
                        "run {run} table {k} ({}) col {n}: true {} pred {} (p={:.2})",
                        schema_names[ds.tables[k].schema_id],
                        ds.label_vocab.types[truth],
                        ds.label_vocab.types[*label],
                        p
                    );
                }
            }
        }
    }
}
