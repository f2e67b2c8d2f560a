//! Committed-cycle reports and their terminal/CSV renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::domain::{CompositeKey, Millis, NodeId, RoomId, TagCategory};
use crate::mapreduce::{aggregate_case1, aggregate_case2, Case1Result, Case2Result};
use crate::membership::Term;
use crate::storage::MeasurementRecord;

/// One committed task cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleReport {
    pub cycle_index: u64,
    pub term: Term,
    pub master: NodeId,
    pub case1: Case1Result,
    pub case2: Case2Result,
    pub events_processed: u64,
    pub batches: Vec<String>,
    pub committed_at: Millis,
    /// Digest of the message and fault log up to the commit; zero when the
    /// committing side has no global log.
    pub log_digest: u64,
}

impl CycleReport {
    pub fn from_record(rec: &MeasurementRecord) -> Self {
        Self {
            cycle_index: rec.cycle_index,
            term: rec.term,
            master: rec.master,
            case1: rec.case1.clone(),
            case2: rec.case2.clone(),
            events_processed: rec.events,
            batches: rec.batches.clone(),
            committed_at: rec.ingested_at,
            log_digest: 0,
        }
    }
}

/// Adds zero rows for declared rooms that saw no reads.
pub fn with_rooms(c2: &Case2Result, rooms: u32) -> Case2Result {
    let mut c2 = c2.clone();
    for r in 0..rooms {
        c2.per_room_totals.entry(RoomId(r)).or_insert(0);
        let row = c2.per_room_breakdown.entry(RoomId(r)).or_default();
        for cat in TagCategory::ALL {
            row.entry(cat).or_insert(0);
        }
    }
    c2
}

/// Sums the composite breakdowns of several cycles.
pub fn merge_reports(reports: &[CycleReport]) -> (Case1Result, Case2Result) {
    let mut reduced: BTreeMap<CompositeKey, u64> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.case1.composite_breakdown {
            *reduced.entry(*k).or_insert(0) += v;
        }
    }
    (aggregate_case1(&reduced), aggregate_case2(&reduced))
}

/// `>>Sum: { Man : 157, Woman : 169, Other : 174 }` followed by the
/// composite map on one line.
pub fn render_case1(c1: &Case1Result) -> String {
    let sums: Vec<String> = TagCategory::ALL
        .iter()
        .map(|c| format!("{c} : {}", c1.total(*c)))
        .collect();
    let entries: Vec<String> = c1
        .composite_breakdown
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    let entries = if entries.is_empty() {
        "{ }".to_string()
    } else {
        format!("{{ {} }}", entries.join(", "))
    };
    format!(">>Sum: {{ {} }}\n{entries}\n", sums.join(", "))
}

/// `>>Sum: { Room0 : 86, ... }` followed by one breakdown line per room.
pub fn render_case2(c2: &Case2Result) -> String {
    if c2.per_room_totals.is_empty() {
        return ">>Sum: { }\n".to_string();
    }
    let sums: Vec<String> = c2
        .per_room_totals
        .iter()
        .map(|(r, n)| format!("Room{} : {n}", r.0))
        .collect();
    let mut out = format!(">>Sum: {{ {} }}\n", sums.join(", "));
    for (room, row) in &c2.per_room_breakdown {
        let cells: Vec<String> = TagCategory::ALL
            .iter()
            .map(|c| format!("{c}: {}", row.get(c).copied().unwrap_or(0)))
            .collect();
        let _ = writeln!(out, "{}: {{ {} }}", room.0, cells.join(", "));
    }
    out
}

/// A published figure to cross-check computed totals against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceValue {
    /// `Man`, `Room4`, `Other-room5`, ...
    pub key: String,
    pub value: u64,
}

fn computed_value(key: &str, c1: &Case1Result, c2: &Case2Result) -> Option<u64> {
    if let Ok(cat) = key.parse::<TagCategory>() {
        return Some(c1.total(cat));
    }
    if let Some(idx) = key.strip_prefix("Room") {
        let room = RoomId(idx.parse().ok()?);
        return Some(c2.per_room_totals.get(&room).copied().unwrap_or(0));
    }
    let k: CompositeKey = key.parse().ok()?;
    Some(c1.composite_breakdown.get(&k).copied().unwrap_or(0))
}

/// Compares reference values with the computed aggregates. Mismatches on
/// room totals spell out the room's own breakdown so the discrepancy can be
/// judged at a glance.
pub fn render_reference_check(
    refs: &[ReferenceValue],
    c1: &Case1Result,
    c2: &Case2Result,
) -> String {
    if refs.is_empty() {
        return String::new();
    }
    let mut matched = 0;
    let mut lines = String::new();
    for r in refs {
        match computed_value(&r.key, c1, c2) {
            Some(v) if v == r.value => matched += 1,
            Some(v) => {
                let _ = write!(
                    lines,
                    ">>Deviation: {} reference {} differs from computed {}",
                    r.key, r.value, v
                );
                if let Some(row) = r
                    .key
                    .strip_prefix("Room")
                    .and_then(|i| i.parse().ok())
                    .and_then(|i| c2.per_room_breakdown.get(&RoomId(i)))
                {
                    let parts: Vec<String> = TagCategory::ALL
                        .iter()
                        .map(|c| format!("{c} {}", row.get(c).copied().unwrap_or(0)))
                        .collect();
                    let _ = write!(
                        lines,
                        " ({} = {v}; all rooms = {}, all categories = {})",
                        parts.join(" + "),
                        c2.events(),
                        c1.events()
                    );
                }
                lines.push('\n');
            }
            None => {
                let _ = writeln!(lines, ">>Deviation: {} is not a known total", r.key);
            }
        }
    }
    format!(
        ">>Reference: {matched} of {} values match\n{lines}",
        refs.len()
    )
}

/// Full terminal report: every committed cycle, then the running total when
/// there is more than one, then the reference check. Rooms below `rooms`
/// are listed even when empty.
pub fn render_text(
    scenario_id: &str,
    rooms: u32,
    reports: &[CycleReport],
    refs: &[ReferenceValue],
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {scenario_id}: {} committed cycle(s)",
        reports.len()
    );
    for r in reports {
        let _ = writeln!(
            out,
            "-- cycle {} (term {}, master {}, events {}, committed at {} ms)",
            r.cycle_index, r.term, r.master, r.events_processed, r.committed_at
        );
        out.push_str("Case 1: visitor monitoring\n");
        out.push_str(&render_case1(&r.case1));
        out.push_str("Case 2: room monitoring\n");
        out.push_str(&render_case2(&with_rooms(&r.case2, rooms)));
    }
    let (c1, c2) = merge_reports(reports);
    let c2 = with_rooms(&c2, rooms);
    if reports.len() > 1 {
        let _ = writeln!(out, "-- all cycles (events {})", c1.events());
        out.push_str(&render_case1(&c1));
        out.push_str(&render_case2(&c2));
    }
    out.push_str(&render_reference_check(refs, &c1, &c2));
    out
}

/// `case,key,count` rows for the summed aggregates.
pub fn render_csv(rooms: u32, reports: &[CycleReport]) -> String {
    let (c1, c2) = merge_reports(reports);
    let c2 = with_rooms(&c2, rooms);
    let mut out = String::from("case,key,count\n");
    for cat in TagCategory::ALL {
        let _ = writeln!(out, "case1,{cat},{}", c1.total(cat));
    }
    for (k, v) in &c1.composite_breakdown {
        let _ = writeln!(out, "case1,{k},{v}");
    }
    for (room, n) in &c2.per_room_totals {
        let _ = writeln!(out, "case2,Room{},{n}", room.0);
    }
    for (room, row) in &c2.per_room_breakdown {
        for (cat, n) in row {
            let _ = writeln!(out, "case2,Room{}/{cat},{n}", room.0);
        }
    }
    out
}
