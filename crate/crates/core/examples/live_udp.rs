//! Three nodes on localhost UDP sockets, real clock, a two-second cycle.
//!
//!     cargo run --example live_udp

use crowdmr::live::run_live;
use crowdmr::mapreduce::sequential_oracle;
use crowdmr::report::{merge_reports, render_case1};
use crowdmr::sim::{ScenarioSpec, VisitorPlan};
use crowdmr::storage::MemorySink;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ScenarioSpec::new("live-demo", 3, VisitorPlan::Total(120));
    spec.cluster.heartbeat_period = 100;
    spec.cluster.heartbeat_timeout = 500;
    spec.cluster.cycle_period = 2_000;
    spec.tour = 2_000;
    spec.duration = 3_000;

    let out = run_live(&spec, MemorySink::new(), true)?;
    let (c1, _) = merge_reports(&out.reports);
    print!("{}", render_case1(&c1));
    println!("{} datagrams sent", out.sent);
    let (oracle, _) = sequential_oracle(&out.events)?;
    println!("matches sequential tally: {}", c1 == oracle);
    Ok(())
}
