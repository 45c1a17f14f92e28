//! ERM, TEXT and TDG under leave-one-domain-out, five seeds.

use tdg::data::BenchmarkSpec;
use tdg::experiments::{emit_table, run_lodo, TableFormat, DEFAULT_SEEDS};
use tdg::train::{Arm, TrainConfig};
use tdg::words::default_pool;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = run_lodo(
        &TrainConfig::default(),
        &BenchmarkSpec::default(),
        &default_pool(),
        &DEFAULT_SEEDS,
        &[Arm::Erm, Arm::Text, Arm::Tdg],
    )?;
    for arm in ["ERM", "TEXT", "TDG"] {
        eprintln!(
            "{arm:4} mean {:.4}  gain {:+.2} pp",
            table.overall_mean(arm).unwrap_or(f64::NAN),
            table.overall_gain(arm).unwrap_or(f64::NAN)
        );
    }
    emit_table(&table, TableFormat::Csv, std::io::stdout().lock())?;
    Ok(())
}
