//! Generate the default noisy benchmark, save it, reload it, and check the
//! ground-truth bookkeeping.
//!
//! `cargo run --release --example generate_dataset -- [out.mpds]`

use mopro::datagen::{generate, DatasetConfig, NoiseKind, NoisyDataset};

fn main() -> mopro::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "benchmark.mpds".into());
    let config = DatasetConfig::default();
    let ds = generate(&config)?;
    ds.save(&path)?;
    let back = NoisyDataset::load(&path)?;
    assert_eq!(back, ds);

    let inside = ds.in_distribution().len();
    println!("{} samples, K={}, d_x={} -> {path}", ds.len(), ds.classes, ds.input_dim);
    println!(
        "in-distribution {inside}, corrupted {} ({:.3} of in-distribution, target {})",
        ds.corrupted_count(),
        ds.corrupted_count() as f64 / inside as f64,
        config.noise_rate
    );
    println!("OOD {} ({:.3} of all, target {})", ds.ood_count(), ds.ood_count() as f64 / ds.len() as f64, config.ood_rate);

    // Structured noise: class k is relabelled k+1.
    let pairwise = generate(&DatasetConfig { noise_kind: NoiseKind::Pairwise, ..config })?;
    let shifted = (0..pairwise.len())
        .filter(|&i| pairwise.is_corrupted(i))
        .all(|i| pairwise.noisy_label[i] == (pairwise.true_label[i].unwrap() + 1) % pairwise.classes);
    println!("pairwise mode flips every corrupted label to the next class: {shifted}");
    Ok(())
}
