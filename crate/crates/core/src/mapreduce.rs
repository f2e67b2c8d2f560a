//! The counting pipeline: room mappers tally reads into `(category, room)`
//! counts, the master partitions keys across reducers, reducers sum, and the
//! reduced map is folded into the per-category (Case 1) and per-room (Case 2)
//! views.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CompositeKey, RoomId, TagCategory, VisitorEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapReduceError {
    #[error("event {event_id} belongs to {found}, mapper is scanning {expected}")]
    ForeignRoomEvent {
        event_id: u64,
        expected: RoomId,
        found: RoomId,
    },
    #[error("reducer count must be at least 1")]
    ZeroReducers,
    #[error("duplicate event id {0}")]
    DuplicateEventId(u64),
}

/// Map output: a partial count for one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntermediateCount {
    pub key: CompositeKey,
    pub count: u64,
}

impl IntermediateCount {
    pub fn new(key: CompositeKey, count: u64) -> Self {
        Self { key, count }
    }
}

/// Per-category totals plus the full `(category, room)` breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case1Result {
    pub per_category_totals: BTreeMap<TagCategory, u64>,
    pub composite_breakdown: BTreeMap<CompositeKey, u64>,
}

impl Case1Result {
    pub fn total(&self, category: TagCategory) -> u64 {
        self.per_category_totals.get(&category).copied().unwrap_or(0)
    }

    pub fn events(&self) -> u64 {
        self.per_category_totals.values().sum()
    }
}

/// Per-room totals plus each room's category split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case2Result {
    pub per_room_totals: BTreeMap<RoomId, u64>,
    pub per_room_breakdown: BTreeMap<RoomId, BTreeMap<TagCategory, u64>>,
}

impl Case2Result {
    pub fn events(&self) -> u64 {
        self.per_room_totals.values().sum()
    }
}

/// Key → reducer ordinal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub reducer_count: usize,
    pub assignment: BTreeMap<CompositeKey, usize>,
}

impl PartitionPlan {
    pub fn ordinal(&self, key: &CompositeKey) -> usize {
        self.assignment
            .get(key)
            .copied()
            .unwrap_or_else(|| reducer_ordinal(key, self.reducer_count))
    }

    /// Splits map output into one shard per reducer ordinal.
    pub fn shard(&self, counts: &[IntermediateCount]) -> Vec<Vec<IntermediateCount>> {
        let mut shards = vec![Vec::new(); self.reducer_count];
        for c in counts {
            shards[self.ordinal(&c.key)].push(*c);
        }
        shards
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn reducer_ordinal(key: &CompositeKey, reducer_count: usize) -> usize {
    (fnv1a64(key.text().as_bytes()) % reducer_count as u64) as usize
}

/// Tallies one scan of a room. Emits one count per category present, in
/// category order.
pub fn map_batch(
    events: &[VisitorEvent],
    room: RoomId,
) -> Result<Vec<IntermediateCount>, MapReduceError> {
    let mut tally = [0u64; 3];
    for ev in events {
        if ev.room != room {
            return Err(MapReduceError::ForeignRoomEvent {
                event_id: ev.event_id,
                expected: room,
                found: ev.room,
            });
        }
        tally[ev.category.index()] += 1;
    }
    Ok(TagCategory::ALL
        .iter()
        .filter(|c| tally[c.index()] > 0)
        .map(|c| IntermediateCount::new(CompositeKey::new(*c, room), tally[c.index()]))
        .collect())
}

/// Assigns every key to `fnv1a64(key text) mod reducer_count`.
pub fn partition(
    keys: &BTreeSet<CompositeKey>,
    reducer_count: usize,
) -> Result<PartitionPlan, MapReduceError> {
    if reducer_count == 0 {
        return Err(MapReduceError::ZeroReducers);
    }
    let assignment = keys
        .iter()
        .map(|k| (*k, reducer_ordinal(k, reducer_count)))
        .collect();
    Ok(PartitionPlan {
        reducer_count,
        assignment,
    })
}

pub fn reduce_partition(shards: &[IntermediateCount]) -> BTreeMap<CompositeKey, u64> {
    let mut out = BTreeMap::new();
    for c in shards {
        *out.entry(c.key).or_insert(0) += c.count;
    }
    out
}

pub fn aggregate_case1(reduced: &BTreeMap<CompositeKey, u64>) -> Case1Result {
    let mut per_category_totals: BTreeMap<TagCategory, u64> =
        TagCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for (key, count) in reduced {
        *per_category_totals.entry(key.category).or_insert(0) += count;
    }
    Case1Result {
        per_category_totals,
        composite_breakdown: reduced.clone(),
    }
}

pub fn aggregate_case2(reduced: &BTreeMap<CompositeKey, u64>) -> Case2Result {
    let mut out = Case2Result::default();
    for (key, count) in reduced {
        let row = out
            .per_room_breakdown
            .entry(key.room)
            .or_insert_with(|| TagCategory::ALL.iter().map(|c| (*c, 0)).collect());
        *row.entry(key.category).or_insert(0) += count;
        *out.per_room_totals.entry(key.room).or_insert(0) += count;
    }
    out
}

/// Single-pass reference tally. Shares no code with the distributed path.
pub fn sequential_oracle(
    events: &[VisitorEvent],
) -> Result<(Case1Result, Case2Result), MapReduceError> {
    let mut seen = HashSet::with_capacity(events.len());
    let mut categories: BTreeMap<TagCategory, u64> =
        TagCategory::ALL.iter().map(|c| (*c, 0)).collect();
    let mut composite: BTreeMap<CompositeKey, u64> = BTreeMap::new();
    let mut rooms: BTreeMap<RoomId, u64> = BTreeMap::new();
    let mut room_rows: BTreeMap<RoomId, BTreeMap<TagCategory, u64>> = BTreeMap::new();
    for ev in events {
        if !seen.insert(ev.event_id) {
            return Err(MapReduceError::DuplicateEventId(ev.event_id));
        }
        *categories.get_mut(&ev.category).expect("all categories seeded") += 1;
        *composite
            .entry(CompositeKey {
                category: ev.category,
                room: ev.room,
            })
            .or_default() += 1;
        *rooms.entry(ev.room).or_default() += 1;
        let row = room_rows.entry(ev.room).or_insert_with(|| {
            BTreeMap::from([
                (TagCategory::Man, 0),
                (TagCategory::Woman, 0),
                (TagCategory::Other, 0),
            ])
        });
        *row.get_mut(&ev.category).expect("all categories seeded") += 1;
    }
    Ok((
        Case1Result {
            per_category_totals: categories,
            composite_breakdown: composite,
        },
        Case2Result {
            per_room_totals: rooms,
            per_room_breakdown: room_rows,
        },
    ))
}

/// In-process run of the distributed path: each room's stream is cut into
/// scan rounds of `round_len` events, mapped, partitioned over
/// `reducer_count` reducers, reduced shard by shard and merged.
pub fn run_local(
    events: &[VisitorEvent],
    reducer_count: usize,
    round_len: usize,
) -> Result<(Case1Result, Case2Result), MapReduceError> {
    let mut by_room: BTreeMap<RoomId, Vec<VisitorEvent>> = BTreeMap::new();
    let mut seen = HashSet::with_capacity(events.len());
    for ev in events {
        if !seen.insert(ev.event_id) {
            return Err(MapReduceError::DuplicateEventId(ev.event_id));
        }
        by_room.entry(ev.room).or_default().push(*ev);
    }
    let mut intermediate = Vec::new();
    for (room, evs) in &by_room {
        for round in evs.chunks(round_len.max(1)) {
            intermediate.extend(map_batch(round, *room)?);
        }
    }
    let keys = intermediate.iter().map(|c| c.key).collect();
    let plan = partition(&keys, reducer_count)?;
    let mut reduced = BTreeMap::new();
    for shard in plan.shard(&intermediate) {
        reduced.extend(reduce_partition(&shard));
    }
    Ok((aggregate_case1(&reduced), aggregate_case2(&reduced)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TagCategory::{Man, Other, Woman};
    use proptest::prelude::*;

    fn key(c: TagCategory, r: u32) -> CompositeKey {
        CompositeKey::new(c, RoomId(r))
    }

    fn ev(id: u64, c: TagCategory, r: u32) -> VisitorEvent {
        VisitorEvent {
            event_id: id,
            category: c,
            room: RoomId(r),
            timestamp: id,
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"Man-room0"), 0x8961045ef924b9a7);
    }

    #[test]
    fn map_batch_examples() {
        let events: Vec<_> = (0..27).map(|i| ev(i, Man, 0)).collect();
        assert_eq!(
            map_batch(&events, RoomId(0)).unwrap(),
            vec![IntermediateCount::new(key(Man, 0), 27)]
        );
        assert!(map_batch(&[], RoomId(0)).unwrap().is_empty());
        let mixed = [ev(1, Other, 2), ev(2, Woman, 2), ev(3, Other, 2)];
        assert_eq!(
            map_batch(&mixed, RoomId(2)).unwrap(),
            vec![
                IntermediateCount::new(key(Woman, 2), 1),
                IntermediateCount::new(key(Other, 2), 2)
            ]
        );
    }

    #[test]
    fn map_batch_rejects_foreign_room() {
        let err = map_batch(&[ev(1, Man, 0), ev(9, Man, 4)], RoomId(0)).unwrap_err();
        assert_eq!(
            err,
            MapReduceError::ForeignRoomEvent {
                event_id: 9,
                expected: RoomId(0),
                found: RoomId(4)
            }
        );
    }

    #[test]
    fn partition_examples() {
        let keys: BTreeSet<_> = [key(Man, 0), key(Woman, 3)].into();
        let plan = partition(&keys, 1).unwrap();
        assert!(plan.assignment.values().all(|o| *o == 0));

        // FNV-1a("Man-room0") = 0x8961045ef924b9a7, mod 4 = 3
        let plan = partition(&[key(Man, 0)].into(), 4).unwrap();
        assert_eq!(plan.assignment[&key(Man, 0)], 3);

        assert_eq!(
            partition(&keys, 0).unwrap_err(),
            MapReduceError::ZeroReducers
        );
    }

    #[test]
    fn reduce_examples() {
        let out = reduce_partition(&[
            IntermediateCount::new(key(Man, 0), 10),
            IntermediateCount::new(key(Man, 0), 17),
        ]);
        assert_eq!(out, BTreeMap::from([(key(Man, 0), 27)]));
        assert!(reduce_partition(&[]).is_empty());
        let out = reduce_partition(&[
            IntermediateCount::new(key(Other, 2), 16),
            IntermediateCount::new(key(Woman, 2), 36),
        ]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[&key(Other, 2)], 16);
        assert_eq!(out[&key(Woman, 2)], 36);
    }

    #[test]
    fn aggregate_small_examples() {
        let c1 = aggregate_case1(&BTreeMap::new());
        assert_eq!(c1.per_category_totals.len(), 3);
        assert_eq!(c1.events(), 0);
        assert!(aggregate_case2(&BTreeMap::new()).per_room_totals.is_empty());

        let reduced = BTreeMap::from([(key(Man, 1), 22), (key(Man, 0), 27)]);
        let c1 = aggregate_case1(&reduced);
        assert_eq!(
            (c1.total(Man), c1.total(Woman), c1.total(Other)),
            (49, 0, 0)
        );

        let reduced = BTreeMap::from([(key(Man, 0), 27), (key(Woman, 0), 28), (key(Other, 0), 31)]);
        let c2 = aggregate_case2(&reduced);
        assert_eq!(c2.per_room_totals, BTreeMap::from([(RoomId(0), 86)]));
        assert_eq!(
            c2.per_room_breakdown[&RoomId(0)],
            BTreeMap::from([(Man, 27), (Woman, 28), (Other, 31)])
        );
    }

    #[test]
    fn oracle_rejects_duplicate_ids() {
        assert_eq!(
            sequential_oracle(&[ev(4, Man, 0), ev(4, Woman, 1)]).unwrap_err(),
            MapReduceError::DuplicateEventId(4)
        );
        let (c1, c2) = sequential_oracle(&[]).unwrap();
        assert_eq!(c1.events(), 0);
        assert_eq!(c2.events(), 0);
    }

    fn events_strategy() -> impl Strategy<Value = Vec<VisitorEvent>> {
        prop::collection::vec((0usize..3, 0u32..6), 0..300).prop_map(|cells| {
            cells
                .into_iter()
                .enumerate()
                .map(|(i, (c, r))| ev(i as u64, TagCategory::ALL[c], r))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn local_pipeline_matches_oracle(
            events in events_strategy(),
            reducers in 1usize..8,
            round in 1usize..40,
        ) {
            let expected = sequential_oracle(&events).unwrap();
            let got = run_local(&events, reducers, round).unwrap();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn conservation_and_cross_case(events in events_strategy()) {
            let (c1, c2) = run_local(&events, 3, 7).unwrap();
            prop_assert_eq!(c1.events(), events.len() as u64);
            prop_assert_eq!(c2.events(), events.len() as u64);
            for (room, total) in &c2.per_room_totals {
                prop_assert_eq!(*total, c2.per_room_breakdown[room].values().sum::<u64>());
            }
            for cat in TagCategory::ALL {
                let sum: u64 = c1.composite_breakdown.iter()
                    .filter(|(k, _)| k.category == cat).map(|(_, v)| v).sum();
                prop_assert_eq!(sum, c1.total(cat));
            }
        }

        #[test]
        fn reduce_is_order_and_shard_independent(
            counts in prop::collection::vec((0usize..3, 0u32..4, 1u64..50), 0..60),
            cut in 0usize..60,
            seed in any::<u64>(),
        ) {
            let counts: Vec<_> = counts.into_iter()
                .map(|(c, r, n)| IntermediateCount::new(key(TagCategory::ALL[c], r), n))
                .collect();
            let whole = reduce_partition(&counts);
            let mut shuffled = counts.clone();
            // deterministic permutation from the seed
            shuffled.sort_by_key(|c| fnv1a64(&[c.key.text().as_bytes(), &c.count.to_le_bytes(), &seed.to_le_bytes()].concat()));
            prop_assert_eq!(&reduce_partition(&shuffled), &whole);
            let cut = cut.min(counts.len());
            let mut merged = reduce_partition(&counts[..cut]);
            for (k, v) in reduce_partition(&counts[cut..]) {
                *merged.entry(k).or_insert(0) += v;
            }
            prop_assert_eq!(merged, whole);
        }

        #[test]
        fn partition_is_deterministic_and_total(
            cells in prop::collection::btree_set((0usize..3, 0u32..16), 0..48),
            reducers in 1usize..9,
        ) {
            let keys: BTreeSet<_> = cells.into_iter().map(|(c, r)| key(TagCategory::ALL[c], r)).collect();
            let a = partition(&keys, reducers).unwrap();
            let b = partition(&keys, reducers).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.assignment.keys().copied().collect::<BTreeSet<_>>(), keys);
            prop_assert!(a.assignment.values().all(|o| *o < reducers));
        }
    }
}
