//! Splits a six-node cluster 2 | 4 while the master is on the small side.
//! The master loses eligibility, the four-node side elects a successor,
//! and after the heal everybody follows it.
//!
//!     cargo run --example partition

use crowdmr::domain::NodeId;
use crowdmr::sim::{run_scenario, FaultEvent, FaultKind, ScenarioSpec, VisitorPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ScenarioSpec::new("partition-demo", 6, VisitorPlan::Total(300));
    spec.cluster.cycle_period = 30_000;
    spec.cluster.check_period = 10_000;
    spec.tour = 60_000;
    spec.duration = 100_000;
    let small = [NodeId(0), NodeId(1)].into();
    let big = [NodeId(2), NodeId(3), NodeId(4), NodeId(5)].into();
    spec.faults.push(FaultEvent { at: 5_000, kind: FaultKind::Partition(vec![small, big]) });
    spec.faults.push(FaultEvent { at: 50_000, kind: FaultKind::Heal });

    let out = run_scenario(&spec)?;
    for l in &out.leadership {
        println!("{} became master at {} ms, term {}", l.node, l.at, l.term);
    }
    for r in &out.reports {
        println!("cycle {}: {} reads, committed by {}", r.cycle_index, r.events_processed, r.master);
    }
    println!("roles at the end:");
    for (n, role) in &out.final_roles {
        if let Some(r) = role {
            println!("  {n}: {:?} in term {}, following {:?}", r.role, r.term, r.known_master);
        }
    }
    println!("safety violations: {}", out.violations.len());
    Ok(())
}
