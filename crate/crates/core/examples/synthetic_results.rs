//! Write a synthetic fold-level results table to stdout as CSV.
//!
//! cargo run --example synthetic_results -- [seed] > results.csv

use hierbench::synthetic::{synthetic_table, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let spec = |effect: f64| SyntheticSpec {
        n_datasets: 9,
        effect,
        ..Default::default()
    };
    let table = synthetic_table(
        "baseline",
        &[("better", spec(-0.03)), ("similar", spec(0.0)), ("worse", spec(0.04))],
        seed,
    )?;
    print!("{}", table.to_csv());
    Ok(())
}
