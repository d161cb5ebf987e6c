//! Interrupt a run, checkpoint it to disk, resume, and confirm the result is
//! bit-for-bit the uninterrupted run.
//!
//! `cargo run --release --example checkpoint_resume`

use mopro::datagen::{generate, DatasetConfig};
use mopro::evalkit::metrics_csv;
use mopro::trainer::{checkpoint_bytes, load_checkpoint, save_checkpoint, train, TrainConfig, TrainState};

fn main() -> mopro::Result<()> {
    let ds = generate(&DatasetConfig { samples_per_class: 100, ..Default::default() })?;
    let config = TrainConfig { epochs: 16, warmup_epochs: 4, queue_size: 256, ..Default::default() };

    let uninterrupted = train(config.clone(), &ds)?;

    let path = std::env::temp_dir().join("mopro_example.mpck");
    let mut first = TrainState::new(config, &ds)?;
    first.train_until(&ds, 7)?;
    save_checkpoint(&first, &path)?;
    println!("stopped after epoch {} -> {}", first.epoch, path.display());

    let mut resumed = load_checkpoint(&path)?;
    resumed.train_to_end(&ds)?;
    let same_metrics = metrics_csv(&resumed.records()) == metrics_csv(&uninterrupted.records());
    let same_state = checkpoint_bytes(&resumed) == checkpoint_bytes(&uninterrupted);
    println!("resumed to epoch {}: identical metrics {same_metrics}, identical state {same_state}", resumed.epoch);
    std::fs::remove_file(&path)?;
    Ok(())
}
