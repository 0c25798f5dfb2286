//! Short runs with and without the functional penalty and the metric
//! ascent, on a reduced dataset.
//!
//! `cargo run --release --example adversarial_ablation -- [epochs]`

use htan::data::{generate_dataset, RegimeSwitchingSpec};
use htan::training::{evaluate, Model, TrainConfig, Trainer};

fn main() -> htan::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(2, |a| a.parse().expect("epochs"));
    let spec = RegimeSwitchingSpec {
        sequences: 120,
        ..Default::default()
    };
    let test_spec = RegimeSwitchingSpec {
        sequences: 60,
        seed: spec.seed + 1,
        ..spec.clone()
    };
    let (train, test) = (generate_dataset(&spec)?, generate_dataset(&test_spec)?);
    let settings = [
        ("penalty + metric ascent", 0.01, Some(1)),
        ("penalty, fixed metric", 0.01, None),
        ("no penalty", 0.0, None),
    ];
    for (label, lambda, theta_period) in settings {
        let config = TrainConfig {
            lambda,
            theta_period,
            epochs,
            hidden: 32,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config.clone(), Model::new(&config, &spec)?)?;
        let mut last = None;
        for _ in 0..epochs {
            last = Some(trainer.train_epoch(&train)?);
        }
        let r = last.expect("at least one epoch");
        let descending = trainer.steps.iter().filter(|s| s.phi_directional <= 0.0).count();
        let eval = evaluate(&trainer.model, &test)?;
        println!(
            "{label:<24} penalty {:.3e}  adversarial {:+.3e}  descent steps {descending}/{}  test CE {:.5}",
            r.reg_value,
            r.ltheta_value,
            trainer.steps.len(),
            eval.mean_loss()
        );
    }
    Ok(())
}
