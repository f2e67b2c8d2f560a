//! Crashes the master halfway through a cycle and shows who takes over,
//! when, and that the surviving rooms are still counted exactly.
//!
//!     cargo run --example failover

use crowdmr::domain::NodeId;
use crowdmr::mapreduce::sequential_oracle;
use crowdmr::sim::{run_scenario, FaultEvent, FaultKind, ScenarioSpec, VisitorPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ScenarioSpec::new("failover-demo", 6, VisitorPlan::Total(600));
    spec.seed = 3;
    spec.cluster.cycle_period = 60_000;
    spec.tour = 60_000;
    spec.duration = 75_000;
    spec.faults.push(FaultEvent { at: 30_000, kind: FaultKind::Crash(NodeId(0)) });

    let out = run_scenario(&spec)?;
    println!("node0 crashed at 30000 ms");
    for l in &out.leadership {
        println!("{} became master at {} ms, term {}", l.node, l.at, l.term);
    }
    let (expected, _) = sequential_oracle(&out.surviving_room_events())?;
    for r in &out.reports {
        println!(
            "cycle {} committed by {} (term {}): {} reads, surviving rooms hold {}",
            r.cycle_index,
            r.master,
            r.term,
            r.events_processed,
            expected.events()
        );
        println!("  exact: {}", r.case1 == expected);
    }
    Ok(())
}
