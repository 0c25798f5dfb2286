//! Trains on the default regime-switching dataset and reports test loss.
//!
//! `cargo run --release --example train_htan -- [epochs] [lambda] [seed]`

use htan::data::{generate_dataset, ground_truth_relation, spearman, RegimeSwitchingSpec};
use htan::training::{evaluate, Model, TrainConfig, Trainer};

fn main() -> htan::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let config = TrainConfig {
        epochs: arg(0, "5").parse().expect("epochs"),
        lambda: arg(1, "0.01").parse().expect("lambda"),
        seed: arg(2, "1").parse().expect("seed"),
        ..TrainConfig::default()
    };
    let train_spec = RegimeSwitchingSpec::default();
    let test_spec = RegimeSwitchingSpec {
        sequences: 200,
        seed: train_spec.seed + 1,
        ..train_spec.clone()
    };
    let train = generate_dataset(&train_spec)?;
    let test = generate_dataset(&test_spec)?;

    let model = Model::new(&config, &train_spec)?;
    let mut trainer = Trainer::new(config.clone(), model)?;
    for _ in 0..config.epochs {
        let r = trainer.train_epoch(&train)?;
        println!(
            "epoch {} loss {:?} acc {:?} reg {:.4} l_theta {:.4} ({} ms)",
            r.epoch, r.task_loss, r.task_acc, r.reg_value, r.ltheta_value, r.wall_ms
        );
    }
    let eval = evaluate(&trainer.model, &test)?;
    println!("test loss {:?} acc {:?} mean {:.5}", eval.task_loss, eval.task_acc, eval.mean_loss());
    let report = trainer.model.relation_report(test.seq_len())?;
    let d12: Vec<f64> = (0..test.seq_len())
        .map(|n| {
            report
                .iter()
                .map(|block| block[n].distances.as_ref().map_or(0.0, |d| d.at(0, 1)))
                .sum::<f64>()
                / report.len() as f64
        })
        .collect();
    let truth = ground_truth_relation(&test);
    println!("d12 per slot {:?}", d12);
    println!("spearman(d12, coupling) = {:?}", spearman(&d12, &truth));
    Ok(())
}
