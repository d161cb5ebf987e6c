//! Train full MoPro and every ablation preset over several seeds, then
//! compare final correction quality and held-out kNN accuracy.
//!
//! Usage: `cargo run --release --example ablation_study -- [seeds]`
//! (default 5 seeds; each run takes well under a minute).

use std::time::Instant;

use mopro::datagen::{generate, generate_holdout, DatasetConfig};
use mopro::evalkit::score_corrections;
use mopro::trainer::{holdout_knn, train, Ablation, TrainConfig};

const HOLDOUT_PER_CLASS: usize = 100;

fn main() -> mopro::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let variants: Vec<(String, Option<Ablation>)> = std::iter::once(("full".to_string(), None))
        .chain(Ablation::ALL.iter().map(|a| (a.to_string(), Some(*a))))
        .collect();

    let mut knn = vec![Vec::new(); variants.len()];
    for seed in 0..seeds {
        let data = DatasetConfig { seed, ..Default::default() };
        let ds = generate(&data)?;
        let holdout = generate_holdout(&data, HOLDOUT_PER_CLASS)?;
        for (v, (name, ablation)) in variants.iter().enumerate() {
            let mut cfg = TrainConfig { seed, ..Default::default() };
            if let Some(a) = ablation {
                cfg = cfg.with_ablation(*a);
            }
            let t = Instant::now();
            let state = train(cfg, &ds)?;
            let report = score_corrections(&state.correction_pass(&ds)?, &ds)?;
            let acc = holdout_knn(&state, &ds, &holdout)?;
            knn[v].push(acc);
            println!(
                "seed {seed} {name:<8} pseudo_acc {:.3} ood_recall {:.3} ood_precision {:.3} knn {:.4} ({:.0}s)",
                report.pseudo_acc,
                report.ood_recall,
                report.ood_precision,
                acc,
                t.elapsed().as_secs_f64()
            );
        }
    }
    println!();
    for ((name, _), accs) in variants.iter().zip(&knn) {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{name:<8} mean held-out kNN {mean:.4}");
    }
    Ok(())
}
