//! Frozen-representation probes and calibration on a trained model: k-NN and
//! linear probes on a clean held-out set, plus the binned calibration error.
//!
//! `cargo run --release --example evaluate_probes`

use mopro::datagen::{generate, generate_holdout, DatasetConfig};
use mopro::evalkit::{calibration_error, knn_probe, linear_probe, LinearProbeConfig, CALIBRATION_BINS};
use mopro::trainer::{predict, train, TrainConfig};

fn main() -> mopro::Result<()> {
    let data = DatasetConfig { samples_per_class: 150, ..Default::default() };
    let ds = generate(&data)?;
    let holdout = generate_holdout(&data, 50)?;
    let config = TrainConfig { epochs: 20, warmup_epochs: 5, queue_size: 512, ..Default::default() };
    let state = train(config, &ds)?;

    // Reference: in-distribution training samples with their true labels.
    let reference = ds.in_distribution();
    let reference_labels: Vec<usize> = reference.iter().map(|&i| ds.true_label[i].unwrap()).collect();
    let queries: Vec<usize> = (0..holdout.len()).collect();
    let query_labels: Vec<usize> = holdout.true_label.iter().map(|t| t.unwrap()).collect();
    let train_out = predict(&state.network, &ds, &reference)?;
    let test_out = predict(&state.network, &holdout, &queries)?;

    let knn = knn_probe(&train_out.repr, &reference_labels, &test_out.repr, &query_labels, 5)?;
    let linear = linear_probe(
        &train_out.repr,
        &reference_labels,
        &test_out.repr,
        &query_labels,
        &LinearProbeConfig::default(),
    )?;
    println!("held-out k-NN accuracy {knn:.4}, linear probe accuracy {linear:.4}");

    let (conf, correct): (Vec<f64>, Vec<bool>) = test_out
        .probs
        .row_iter()
        .zip(&query_labels)
        .map(|(p, &y)| {
            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            (p[best], best == y)
        })
        .unzip();
    let calib = calibration_error(&conf, &correct, CALIBRATION_BINS)?;
    println!("classifier calibration error {:.4}", calib.error);
    for bin in calib.bins.iter().filter(|b| b.count > 0) {
        println!(
            "  ({:.3}, {:.3}]  n={:<4} confidence {:.3}  accuracy {:.3}",
            bin.lower, bin.upper, bin.count, bin.confidence, bin.accuracy
        );
    }
    Ok(())
}
