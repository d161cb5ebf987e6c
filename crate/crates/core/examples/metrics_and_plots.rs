//! Export per-epoch metrics as CSV and JSON, read them back exactly, and
//! render the SVG charts the `plot` command writes.
//!
//! `cargo run --release --example metrics_and_plots -- [out_dir]`

use std::path::PathBuf;

use mopro::cli::plot::{render_chart, CHARTS};
use mopro::datagen::{generate, DatasetConfig};
use mopro::evalkit::{emit_metrics, read_metrics, MetricsFormat};
use mopro::trainer::{train, TrainConfig};

fn main() -> mopro::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mopro_plots".into()));
    std::fs::create_dir_all(&out)?;
    let ds = generate(&DatasetConfig { samples_per_class: 100, ..Default::default() })?;
    let state = train(TrainConfig { epochs: 12, warmup_epochs: 3, queue_size: 256, ..Default::default() }, &ds)?;
    let records = state.records();

    let csv = out.join("metrics.csv");
    let json = out.join("metrics.json");
    emit_metrics(&records, &csv, MetricsFormat::Csv)?;
    emit_metrics(&records, &json, MetricsFormat::Json)?;
    let from_csv = read_metrics(&csv)?;
    let from_json = read_metrics(&json)?;
    let exact = from_csv.iter().zip(&records).all(|(a, b)| a.bit_eq(b))
        && from_json.iter().zip(&records).all(|(a, b)| a.bit_eq(b));
    println!("{} records written; CSV and JSON read back bit-exactly: {exact}", records.len());

    for spec in &CHARTS {
        let path = out.join(format!("{}.svg", spec.file_stem));
        std::fs::write(&path, render_chart(spec, &records))?;
        println!("{}", path.display());
    }
    Ok(())
}
