//! Train on the default synthetic benchmark and print per-epoch metrics.
//!
//! `cargo run --release --example train_benchmark -- [seed] [ablation]`

use std::time::Instant;

use mopro::datagen::{generate, DatasetConfig};
use mopro::evalkit::score_corrections;
use mopro::trainer::{Ablation, TrainConfig, TrainState};

fn main() -> mopro::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let ablation: Option<Ablation> = args.next().map(|s| s.parse()).transpose()?;

    let ds = generate(&DatasetConfig { seed, ..DatasetConfig::default() })?;
    let mut config = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(a) = ablation {
        config = config.with_ablation(a);
    }
    let mut state = TrainState::new(config, &ds)?;
    let start = Instant::now();
    println!("epoch  total    l_ce     l_pro    l_ins    pseudo  ood_r  ood_p  knn    secs");
    while !state.is_finished() {
        let m = *state.run_epoch(&ds)?;
        println!(
            "{:>5}  {:.4}  {:.4}  {:.4}  {:.4}  {:.3}   {:.3}  {:.3}  {:.3}  {:.1}",
            m.epoch, m.total, m.l_ce, m.l_pro, m.l_ins, m.pseudo_acc, m.ood_recall,
            m.ood_precision, m.knn_acc, start.elapsed().as_secs_f64()
        );
    }
    let report = score_corrections(&state.correction_pass(&ds)?, &ds)?;
    println!(
        "frozen correction pass: pseudo_acc {:.3}, OOD recall {:.3}, OOD precision {:.3}, rules {:?}",
        report.pseudo_acc, report.ood_recall, report.ood_precision, report.rules
    );
    Ok(())
}
