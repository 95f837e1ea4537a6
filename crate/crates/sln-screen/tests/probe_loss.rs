mod common;

use sln_screen::nn::ModelConfig;
use sln_screen::optim::{OptimizerConfig, OptimizerKind};
use sln_screen::synth::{generate, SynthOptions};
use sln_screen::trainer::{train, TrainConfig};

#[test]
#[ignore]
fn probe_first_three_epoch_losses() {
    for (counts, fracs, batch, lr) in [
        ([2usize, 2, 2, 2], [0.75, 0.125, 0.125], 16usize, 1e-3),
        ([4, 4, 4, 4], [0.75, 0.125, 0.125], 16, 1e-3),
        ([4, 4, 4, 4], [0.75, 0.125, 0.125], 32, 1e-3),
        ([4, 4, 4, 4], [0.75, 0.125, 0.125], 32, 5e-4),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(
            &dir.path().join("c"),
            &SynthOptions {
                seed: 23,
                category_counts: counts,
                split_fractions: fracs,
                ..SynthOptions::default()
            },
        )
        .unwrap();
        let mut ok = 0;
        let mut trajectories = Vec::new();
        for seed in 0..10u64 {
            let config = TrainConfig {
                batch_size: batch,
                max_epochs: 3,
                patience: 3,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::Adam,
                    learning_rate: lr,
                },
                seed: 100 + seed,
                ..TrainConfig::default()
            };
            let model = ModelConfig::with_input([100, 100, 3], &[4, 8, 16], 32, 0.25, 200 + seed);
            let outcome = train(&corpus, &model, &config).unwrap();
            let l: Vec<f64> = outcome.report.epochs.iter().map(|e| e.train_loss).collect();
            let dec = l[0] > l[1] && l[1] > l[2];
            ok += dec as usize;
            trajectories.push(format!("{l:.4?} {}", if dec { "v" } else { "X" }));
        }
        println!("counts {counts:?} batch {batch} lr {lr}: {ok}/10");
        for t in trajectories {
            println!("  {t}");
        }
    }
}
