//! Decoupled re-balancing after training: clean the labels with a frozen
//! correction pass, drop OOD samples, and retrain only the classifier on
//! square-root-sampled batches.
//!
//! `cargo run --release --example rebalance_finetune`

use mopro::datagen::{generate, DatasetConfig};
use mopro::trainer::{rebalance_finetune, train, TrainConfig};

fn main() -> mopro::Result<()> {
    let ds = generate(&DatasetConfig { samples_per_class: 150, ..Default::default() })?;
    let config = TrainConfig { epochs: 24, warmup_epochs: 6, queue_size: 512, ..Default::default() };
    let mut state = train(config, &ds)?;

    let before = state.evaluate(&ds)?;
    let report = rebalance_finetune(&mut state, &ds)?;
    let after = state.evaluate(&ds)?;

    println!("correction pass: {:?}", report.rules);
    println!("cleaned set: {} samples, per class {:?}", report.cleaned, report.class_counts);
    println!("{} finetune steps, final loss {:.4}", report.steps, report.final_loss);
    println!(
        "backbone unchanged: {}, classifier changed: {}",
        report.backbone_hash_before == report.backbone_hash_after,
        report.classifier_hash_before != report.classifier_hash_after
    );
    println!(
        "classifier calibration error {:.4} -> {:.4}",
        before.calibration.error, after.calibration.error
    );
    Ok(())
}
