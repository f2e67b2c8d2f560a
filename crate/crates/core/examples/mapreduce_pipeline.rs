//! The counting pipeline without a network: map per-room batches, spread
//! the keys over reducers, reduce, and compare with a plain sequential tally.
//!
//!     cargo run --example mapreduce_pipeline

use std::collections::BTreeSet;

use crowdmr::domain::{CompositeKey, RoomId, TagCategory, VisitorEvent};
use crowdmr::mapreduce::{map_batch, partition, run_local, sequential_oracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let events: Vec<VisitorEvent> = (0..60)
        .map(|i| VisitorEvent {
            event_id: i,
            category: TagCategory::ALL[(i * 7 % 3) as usize],
            room: RoomId((i % 4) as u32),
            timestamp: i * 1_000,
        })
        .collect();

    let room0: Vec<VisitorEvent> = events.iter().filter(|e| e.room == RoomId(0)).copied().collect();
    println!("room0 mapper output:");
    for c in map_batch(&room0, RoomId(0))? {
        println!("  {} -> {}", c.key, c.count);
    }

    let keys: BTreeSet<CompositeKey> = events.iter().map(|e| CompositeKey::new(e.category, e.room)).collect();
    let plan = partition(&keys, 3)?;
    println!("key placement over 3 reducers:");
    for (k, r) in &plan.assignment {
        println!("  {k} -> reducer {r}");
    }

    let distributed = run_local(&events, 3, 10)?;
    let oracle = sequential_oracle(&events)?;
    println!("pipeline matches sequential tally: {}", distributed == oracle);
    for cat in TagCategory::ALL {
        println!("  {cat}: {}", distributed.0.total(cat));
    }
    Ok(())
}
