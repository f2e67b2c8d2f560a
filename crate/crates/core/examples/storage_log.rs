//! The append-only report store: one JSON line per committed cycle,
//! idempotent re-uploads, and conditional commits that refuse to count a
//! batch twice.
//!
//!     cargo run --example storage_log

use std::collections::BTreeMap;

use crowdmr::domain::{CompositeKey, NodeId, RoomId, TagCategory};
use crowdmr::mapreduce::{aggregate_case1, aggregate_case2};
use crowdmr::membership::Term;
use crowdmr::storage::{FileSink, MeasurementRecord, ReportSink, RECORD_VERSION};

fn record(cycle: u64, batch: &str) -> MeasurementRecord {
    let reduced = BTreeMap::from([
        (CompositeKey::new(TagCategory::Man, RoomId(0)), 4),
        (CompositeKey::new(TagCategory::Other, RoomId(1)), 2),
    ]);
    MeasurementRecord {
        v: RECORD_VERSION,
        scenario_id: "demo".into(),
        cycle_index: cycle,
        term: Term(1),
        master: NodeId(2),
        ingested_at: 300_000 * (cycle + 1),
        events: 6,
        case1: aggregate_case1(&reduced),
        case2: aggregate_case2(&reduced),
        batches: vec![batch.to_string()],
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("crowdmr-storage-{}", std::process::id()));
    let mut sink = FileSink::new(&dir)?;
    sink.open_scenario("demo")?;

    sink.append_report(&record(0, "0.0.0"))?;
    sink.append_report(&record(0, "0.0.0"))?;
    println!("after a repeated upload: {} record(s)", sink.export("demo")?.len());

    println!("cycle 0 again: {:?}", sink.try_commit(&record(0, "0.0.9"))?);
    println!("reused batch:  {:?}", sink.try_commit(&record(1, "0.0.0"))?);
    println!("fresh cycle:   {:?}", sink.try_commit(&record(1, "0.0.1"))?);

    println!("{}:", sink.log_path("demo").display());
    print!("{}", std::fs::read_to_string(sink.log_path("demo"))?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
