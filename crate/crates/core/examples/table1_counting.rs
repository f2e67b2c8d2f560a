//! Counts a 500-visitor guided tour through six rooms and prints both
//! aggregate views, followed by the check against the published totals.
//!
//!     cargo run --example table1_counting

use std::path::PathBuf;

use crowdmr::report::render_text;
use crowdmr::sim::{run_scenario, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/table1.scn");
    let spec = ScenarioSpec::load(&path)?;
    let out = run_scenario(&spec)?;
    print!("{}", render_text(&spec.id, spec.rooms, &out.reports, &spec.reference));
    println!(
        "{} messages exchanged, {} of them map/reduce traffic",
        out.stats.sent, out.stats.data
    );
    Ok(())
}
