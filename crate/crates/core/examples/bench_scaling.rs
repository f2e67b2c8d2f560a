//! Message counts and simulated cycle completion time as the tour grows.
//!
//!     cargo run --example bench_scaling

use std::path::PathBuf;

use crowdmr::cli::{bench, BENCH_HEADER};
use crowdmr::sim::ScenarioSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/table1.scn");
    let spec = ScenarioSpec::load(&path)?;
    println!("{BENCH_HEADER}");
    for row in bench(&spec, &[50, 250, 500, 1000, 1500])? {
        println!("{}", row.csv());
    }
    Ok(())
}
