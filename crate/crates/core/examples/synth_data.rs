//! Write a synthetic ten-cohort dataset: `series.csv` and `population.csv`.
//!
//! ```text
//! cargo run -p underreport --example synth_data -- <dir> [noise] [seed]
//! ```

use std::path::PathBuf;

use underreport::series::save_csv;
use underreport::synth::{population_csv, synthetic_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let noise: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    std::fs::create_dir_all(&dir)?;
    let (ds, _) = synthetic_dataset(&SynthConfig {
        noise,
        seed,
        ..Default::default()
    });
    save_csv(dir.join("series.csv"), &ds)?;
    std::fs::write(dir.join("population.csv"), population_csv(&ds))?;
    println!("wrote {}", dir.display());
    Ok(())
}
