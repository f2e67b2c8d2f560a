#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdmr::domain::{CompositeKey, NodeId, RoomId, TagCategory};
use crowdmr::membership::ClusterConfig;
use crowdmr::sim::{FaultEvent, FaultKind, LinkModel, ScenarioSpec, VisitorPlan};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

/// The published visitor matrix, row by row (Man, Woman, Other; rooms 0-5).
pub const TOUR_MATRIX: [(TagCategory, [u64; 6]); 3] = [
    (TagCategory::Man, [27, 22, 28, 30, 22, 28]),
    (TagCategory::Woman, [28, 31, 36, 23, 23, 28]),
    (TagCategory::Other, [31, 31, 16, 31, 37, 28]),
];

pub fn tour_matrix() -> BTreeMap<CompositeKey, u64> {
    TOUR_MATRIX
        .iter()
        .flat_map(|(cat, row)| {
            row.iter()
                .enumerate()
                .map(move |(r, n)| (CompositeKey::new(*cat, RoomId(r as u32)), *n))
        })
        .collect()
}

pub fn short_cluster(nodes: u32, cycle: u64) -> ClusterConfig {
    let mut c = ClusterConfig::with_nodes(nodes);
    c.cycle_period = cycle;
    c
}

/// A fault-free scenario with random size, key skew and a duplicating,
/// reordering link.
pub fn random_counting_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.gen_range(1..=8);
    let rooms = rng.gen_range(1..=16u32);
    let visitors = match rng.gen_range(0..10) {
        0 => 0,
        1..=6 => rng.gen_range(1..=2_000),
        _ => rng.gen_range(2_000..=10_000),
    };
    let plan = if rng.gen_bool(0.5) {
        VisitorPlan::Total(visitors)
    } else {
        // skewed: a few hot cells take most of the visitors
        let mut cells: Vec<CompositeKey> = TagCategory::ALL
            .iter()
            .flat_map(|c| (0..rooms).map(move |r| CompositeKey::new(*c, RoomId(r))))
            .collect();
        cells.shuffle(&mut rng);
        cells.truncate(rng.gen_range(1..=cells.len()));
        let weights: Vec<u64> = cells
            .iter()
            .map(|_| 1u64 << rng.gen_range(0..8))
            .collect();
        let wsum: u64 = weights.iter().sum();
        let mut m: BTreeMap<CompositeKey, u64> = BTreeMap::new();
        let mut left = visitors;
        for (i, (k, w)) in cells.iter().zip(&weights).enumerate() {
            let n = if i + 1 == cells.len() {
                left
            } else {
                (visitors * w / wsum).min(left)
            };
            left -= n;
            m.insert(*k, n);
        }
        VisitorPlan::Matrix(m)
    };
    let mut spec = ScenarioSpec::new(format!("prop{seed}"), nodes, plan);
    spec.seed = seed;
    spec.rooms = rooms;
    spec.reducers = rng.gen_range(1..=8);
    spec.cluster = short_cluster(nodes, 20_000);
    spec.tour = 20_000;
    spec.duration = 30_000;
    spec.link = LinkModel {
        base_delay: rng.gen_range(1..=10),
        jitter: rng.gen_range(0..=80),
        drop_probability: 0.0,
        duplicate_probability: rng.gen_range(0.0..0.5),
    };
    spec
}

/// A six-node run whose initial master crashes at `crash_at`.
pub fn master_crash_scenario(seed: u64, crash_at: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(format!("failover{seed}"), 6, VisitorPlan::Total(600));
    spec.seed = seed;
    spec.cluster = short_cluster(6, 60_000);
    spec.tour = 60_000;
    spec.duration = 90_000;
    spec.link = LinkModel {
        base_delay: 5,
        jitter: 25,
        drop_probability: 0.0,
        duplicate_probability: 0.1,
    };
    spec.faults.push(FaultEvent {
        at: crash_at,
        kind: FaultKind::Crash(NodeId(0)),
    });
    spec
}

fn random_split(rng: &mut ChaCha8Rng, nodes: u32) -> Vec<BTreeSet<NodeId>> {
    let mut ids: Vec<NodeId> = (0..nodes).map(NodeId).collect();
    ids.shuffle(rng);
    let cut = rng.gen_range(1..nodes as usize);
    vec![
        ids[..cut].iter().copied().collect(),
        ids[cut..].iter().copied().collect(),
    ]
}

/// Random partitions, crashes, restarts, drop rates up to 0.3 and heals.
/// With `crashes` false only the network misbehaves.
pub fn chaos_scenario(seed: u64, crashes: bool) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC4A0_5000);
    let nodes = rng.gen_range(3..=8);
    let mut spec = ScenarioSpec::new(
        format!("chaos{seed}"),
        nodes,
        VisitorPlan::Total(rng.gen_range(0..=1_500)),
    );
    spec.seed = seed;
    spec.cluster = short_cluster(nodes, 30_000);
    spec.cluster.check_period = rng.gen_range(5_000..=30_000);
    spec.tour = 90_000;
    spec.duration = 200_000;
    spec.reducers = rng.gen_range(1..=4);
    spec.link = LinkModel {
        base_delay: rng.gen_range(1..=20),
        jitter: rng.gen_range(0..=200),
        drop_probability: rng.gen_range(0.0..0.1),
        duplicate_probability: rng.gen_range(0.0..0.2),
    };
    let mut t = rng.gen_range(2_000..10_000);
    let mut down: BTreeSet<NodeId> = BTreeSet::new();
    while t < 130_000 {
        let kind = match rng.gen_range(0..10) {
            0..=2 => FaultKind::Partition(random_split(&mut rng, nodes)),
            3 | 4 => FaultKind::Heal,
            5 | 6 => FaultKind::DropRate {
                link: None,
                probability: rng.gen_range(0.0..=0.3),
            },
            7 => {
                let a = NodeId(rng.gen_range(0..nodes));
                let b = NodeId(rng.gen_range(0..nodes));
                FaultKind::DropRate {
                    link: Some((a, b)),
                    probability: rng.gen_range(0.0..=0.3),
                }
            }
            _ if crashes => {
                let n = NodeId(rng.gen_range(0..nodes));
                if down.remove(&n) {
                    FaultKind::Recover(n)
                } else {
                    down.insert(n);
                    FaultKind::Crash(n)
                }
            }
            _ => FaultKind::Heal,
        };
        spec.faults.push(FaultEvent { at: t, kind });
        t += rng.gen_range(1_000..20_000);
    }
    spec.faults.push(FaultEvent {
        at: t,
        kind: FaultKind::Heal,
    });
    spec.faults.push(FaultEvent {
        at: t,
        kind: FaultKind::DropRate {
            link: None,
            probability: 0.0,
        },
    });
    for n in down {
        spec.faults.push(FaultEvent {
            at: t,
            kind: FaultKind::Recover(n),
        });
    }
    spec
}
