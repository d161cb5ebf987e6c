//! The key = value config format shared by the command line and manifests:
//! print every default, then parse an override file.
//!
//! `cargo run --example config_files`

use mopro::cli::RunConfig;
use mopro::trainer::{Ablation, TrainConfig};

fn main() -> mopro::Result<()> {
    let defaults = RunConfig::default();
    println!("# every key with its default\n{}", defaults.to_settings_text());

    let text = "\
# a shorter, noisier run
[dataset]
noise_rate = 0.6   # inline comments are allowed
seed = 3

[train]
epochs = 30
warmup_epochs = 5

[ablation]
preset = wo_ins
";
    let config = RunConfig::from_settings_text(text)?;
    let expected = TrainConfig { epochs: 30, warmup_epochs: 5, ..defaults.train.clone() }.with_ablation(Ablation::WoIns);
    assert_eq!(config.train, expected);
    println!("parsed: noise_rate {}, epochs {}, ablation {:?}", config.dataset.noise_rate, config.train.epochs, config.train.ablation);

    match RunConfig::from_settings_text("[train]\nlr = fast\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
