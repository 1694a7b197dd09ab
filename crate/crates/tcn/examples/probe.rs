// Scratch driver for tuning experiment settings; not part of the library.
use std::time::Instant;
use tcn::eval::{run_experiment, ExperimentConfig};
use tcn::model::{Dims, ModelConfig, Variant};
use tcn::params::AdamConfig;
use tcn::synthgen::{generate, music_ontology, GenConfig};
use tcn::train::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let runs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let dim: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let budget: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);

    let ds = generate(
        &music_ontology(),
        &GenConfig { topic_ref: 1.0, min_rows: 2, max_rows: 4, ..GenConfig::default() },
    )
    .unwrap();
    println!("corpus: {} tables", ds.num_tables());

    let which: Vec<Variant> = std::env::var("PROBE_VARIANTS")
        .map(|v| {
            v.split(',')
                .map(|s| s.parse::<Variant>().unwrap())
                .collect()
        })
        .unwrap_or_else(|_| vec![Variant::Intra, Variant::Nv, Variant::Ns, Variant::Np, Variant::Full]);
    for variant in which {
        let start = Instant::now();
        let cfg = ExperimentConfig {
            model: ModelConfig {
                dims: Dims::uniform(dim),
                views: 2,
                budget,
                variant,
                share_multiview: std::env::var("PROBE_SHARE").is_ok(),
                seed: 0,
            },
            train: TrainConfig {
                epochs,
                batch_size: std::env::var("PROBE_BATCH").map(|s| s.parse().unwrap()).unwrap_or(16),
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                patience: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5),
                eval_samples: std::env::var("PROBE_ESAMP").map(|s| s.parse().unwrap()).unwrap_or(3),
                ..TrainConfig::default()
            },
            runs,
            seed: 1234,
            eval_samples: std::env::var("PROBE_ESAMP").map(|s| s.parse().unwrap()).unwrap_or(3),
        };
        let report = run_experiment(&ds, &cfg).unwrap();
        println!(
            "{:>6}  type F1 {:.4}  rel F1 {:.4}   ({:.1?} for {} runs)",
            variant.to_string(),
            report.mean_type.f1_weighted,
            report.mean_relation.f1_weighted,
            start.elapsed(),
            runs,
        );
    }
}
