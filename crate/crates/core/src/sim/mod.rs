//! Deterministic discrete-event harness: one virtual clock, one seeded RNG,
//! a lossy link model and scripted faults driving real [`Node`]s.
//!
//! Everything that happens is folded into a running digest, so two runs of
//! the same scenario can be compared cheaply.

pub mod scenario;
pub mod stream;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Millis, NodeId, RoomId, VisitorEvent};
use crate::membership::{Role, RoleState, Term};
use crate::node::{assign_rooms, tick_interval, Node, NodeSetup, Note, Output};
use crate::report::CycleReport;
use crate::storage::{MemorySink, ReportSink};
use crate::wire::encode;

pub use scenario::{
    parse_duration, parse_scenario, FaultEvent, FaultKind, LinkModel, ScenarioError,
    ScenarioSpec, VisitorPlan,
};
pub use stream::{generate_stream, scale_plan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    DurationReached,
    /// Every node is down and none is scheduled to come back.
    AllNodesDead { at: Millis },
}

/// Two live nodes holding Master for the same term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyViolation {
    pub at: Millis,
    pub term: Term,
    pub masters: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeadershipChange {
    pub at: Millis,
    pub node: NodeId,
    pub term: Term,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageStats {
    pub sent: u64,
    /// Sends of map/reduce traffic (tasks, map and reduce outputs, acks).
    pub data: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub scenario_id: String,
    /// Committed cycles in commit order.
    pub reports: Vec<CycleReport>,
    pub stop: StopReason,
    pub end: Millis,
    pub leadership: Vec<LeadershipChange>,
    pub violations: Vec<SafetyViolation>,
    pub stats: MessageStats,
    /// The generated reads.
    pub events: Vec<VisitorEvent>,
    /// Event ids sealed into each map batch.
    pub sealed: BTreeMap<String, Vec<u64>>,
    /// Nodes that crashed at least once.
    pub crashed: BTreeSet<NodeId>,
    pub room_owners: BTreeMap<RoomId, NodeId>,
    /// Role of every node when the run ended; `None` for nodes that were down.
    pub final_roles: BTreeMap<NodeId, Option<RoleState>>,
    pub log_digest: u64,
}

impl SimOutcome {
    /// Reads that made it into a committed report.
    pub fn committed_events(&self) -> Vec<VisitorEvent> {
        let ids: BTreeSet<u64> = self
            .reports
            .iter()
            .flat_map(|r| &r.batches)
            .filter_map(|b| self.sealed.get(b))
            .flatten()
            .copied()
            .collect();
        self.events
            .iter()
            .filter(|e| ids.contains(&e.event_id))
            .copied()
            .collect()
    }

    /// Reads from rooms whose scanning node never crashed.
    pub fn surviving_room_events(&self) -> Vec<VisitorEvent> {
        self.events
            .iter()
            .filter(|e| !self.crashed.contains(&self.room_owners[&e.room]))
            .copied()
            .collect()
    }

    /// First time after `t` that some node became Master with a term above
    /// `term`.
    pub fn first_master_after(&self, t: Millis, term: Term) -> Option<LeadershipChange> {
        self.leadership
            .iter()
            .find(|l| l.at >= t && l.term > term)
            .copied()
    }
}

#[derive(Debug)]
enum Action {
    Tick { node: NodeId, incarnation: u64 },
    Deliver { to: NodeId, frame: Vec<u8> },
    Fault(FaultKind),
}

#[derive(Debug)]
struct Scheduled {
    at: Millis,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // earliest first out of a max-heap; ties in scheduling order
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Slot {
    node: Option<Node>,
    incarnation: u64,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fold(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

const LINK_SALT: u64 = 0x4c49_4e4b_4d4f_4445;

/// A running simulation. Most callers want [`run_scenario`].
pub struct Simulation<'s> {
    spec: ScenarioSpec,
    sink: &'s mut dyn ReportSink,
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    slots: BTreeMap<NodeId, Slot>,
    room_owners: Arc<BTreeMap<RoomId, NodeId>>,
    cluster: Arc<crate::membership::ClusterConfig>,
    rng: ChaCha8Rng,
    events: Vec<VisitorEvent>,
    next_read: usize,
    partition: Option<Vec<BTreeSet<NodeId>>>,
    drop_all: f64,
    drop_links: BTreeMap<(NodeId, NodeId), f64>,
    pending_recovers: usize,
    digest: u64,
    reports: Vec<CycleReport>,
    leadership: Vec<LeadershipChange>,
    violations: Vec<SafetyViolation>,
    stats: MessageStats,
    sealed: BTreeMap<String, Vec<u64>>,
    crashed: BTreeSet<NodeId>,
}

impl<'s> Simulation<'s> {
    pub fn new(spec: ScenarioSpec, sink: &'s mut dyn ReportSink) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let events = stream::generate_stream(&spec)?;
        let cluster = Arc::new(spec.cluster.clone());
        let room_owners = Arc::new(assign_rooms(spec.rooms, &cluster));
        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ LINK_SALT),
            drop_all: spec.link.drop_probability,
            spec,
            sink,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            slots: BTreeMap::new(),
            room_owners,
            cluster,
            events,
            next_read: 0,
            partition: None,
            drop_links: BTreeMap::new(),
            pending_recovers: 0,
            digest: 0xcbf2_9ce4_8422_2325,
            reports: Vec::new(),
            leadership: Vec::new(),
            violations: Vec::new(),
            stats: MessageStats::default(),
            sealed: BTreeMap::new(),
            crashed: BTreeSet::new(),
        };
        sim.sink
            .open_scenario(&sim.spec.id)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        for f in sim.spec.faults.clone() {
            sim.inject_fault(f)?;
        }
        let ids: Vec<NodeId> = sim.cluster.nodes().collect();
        for id in ids {
            sim.slots.insert(
                id,
                Slot {
                    node: None,
                    incarnation: 0,
                },
            );
            sim.start_node(id, true);
        }
        Ok(sim)
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Schedules a fault. Faults at the same instant apply in the order they
    /// were injected.
    pub fn inject_fault(&mut self, fault: FaultEvent) -> Result<(), ScenarioError> {
        let known = |n: &NodeId| self.cluster.endpoints.contains_key(n);
        let named: Vec<NodeId> = match &fault.kind {
            FaultKind::Crash(n) | FaultKind::Recover(n) => vec![*n],
            FaultKind::Partition(groups) => groups.iter().flatten().copied().collect(),
            FaultKind::DropRate { link: Some((a, b)), .. } => vec![*a, *b],
            _ => vec![],
        };
        if let Some(n) = named.into_iter().find(|n| !known(n)) {
            return Err(ScenarioError::UnknownNode(n));
        }
        if fault.at < self.now {
            return Err(ScenarioError::Invalid(format!(
                "fault at {} ms is in the past (now {} ms)",
                fault.at, self.now
            )));
        }
        if matches!(fault.kind, FaultKind::Recover(_)) {
            self.pending_recovers += 1;
        }
        self.schedule(fault.at, Action::Fault(fault.kind));
        Ok(())
    }

    fn schedule(&mut self, at: Millis, action: Action) {
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            action,
        });
    }

    fn start_node(&mut self, id: NodeId, cold_start: bool) {
        let setup = NodeSetup {
            id,
            cluster: self.cluster.clone(),
            room_owners: self.room_owners.clone(),
            reducers: self.spec.reducers,
            scenario_id: self.spec.id.clone(),
            boot: self.now,
            cold_start,
            seed: self.spec.seed,
        };
        let (node, out) = Node::boot(setup);
        let slot = self.slots.get_mut(&id).expect("known node");
        slot.incarnation += 1;
        slot.node = Some(node);
        let incarnation = slot.incarnation;
        self.dispatch(id, out);
        let first = self.now + tick_interval(&self.cluster);
        self.schedule(
            first,
            Action::Tick {
                node: id,
                incarnation,
            },
        );
    }

    fn alive(&self) -> usize {
        self.slots.values().filter(|s| s.node.is_some()).count()
    }

    fn group_of(&self, n: NodeId) -> usize {
        match &self.partition {
            None => 0,
            Some(groups) => groups
                .iter()
                .position(|g| g.contains(&n))
                .unwrap_or(groups.len()),
        }
    }

    fn drop_rate(&self, a: NodeId, b: NodeId) -> f64 {
        let key = (a.min(b), a.max(b));
        self.drop_links.get(&key).copied().unwrap_or(self.drop_all)
    }

    fn dispatch(&mut self, from: NodeId, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send { to, msg } => {
                    let frame = match encode(&msg) {
                        Ok(f) => f,
                        Err(e) => {
                            debug!("node {from} produced an unsendable frame: {e}");
                            continue;
                        }
                    };
                    self.stats.sent += 1;
                    self.stats.bytes += frame.len() as u64;
                    if msg.kind.is_data() {
                        self.stats.data += 1;
                    }
                    if self.group_of(from) != self.group_of(to) {
                        self.stats.dropped += 1;
                        continue;
                    }
                    let p_drop = self.drop_rate(from, to);
                    if p_drop > 0.0 && self.rng.gen_bool(p_drop) {
                        self.stats.dropped += 1;
                        continue;
                    }
                    let p_dup = self.spec.link.duplicate_probability;
                    let copies = if p_dup > 0.0 && self.rng.gen_bool(p_dup) {
                        self.stats.duplicated += 1;
                        2
                    } else {
                        1
                    };
                    for _ in 0..copies {
                        let delay =
                            self.spec.link.base_delay + self.rng.gen_range(0..=self.spec.link.jitter);
                        self.schedule(
                            self.now + delay,
                            Action::Deliver {
                                to,
                                frame: frame.clone(),
                            },
                        );
                    }
                }
                Output::Note(Note::Committed(mut r)) => {
                    r.log_digest = self.digest;
                    info!(
                        "cycle {} committed by {} (term {}) at {} ms: {} events",
                        r.cycle_index, r.master, r.term, self.now, r.events_processed
                    );
                    self.digest = fold(
                        self.digest,
                        format!("{} commit {} {}", self.now, r.cycle_index, r.master).as_bytes(),
                    );
                    self.reports.push(r);
                }
                Output::Note(Note::Sealed { batch, events, .. }) => {
                    self.sealed.insert(batch, events);
                }
                Output::Note(Note::RoleChanged { role, term }) => {
                    if role == Role::Master {
                        self.leadership.push(LeadershipChange {
                            at: self.now,
                            node: from,
                            term,
                        });
                    }
                }
                Output::Note(_) => {}
            }
        }
    }

    fn feed_reads(&mut self, upto: Millis) {
        while let Some(ev) = self.events.get(self.next_read).copied() {
            if ev.timestamp > upto {
                break;
            }
            self.next_read += 1;
            let owner = self.room_owners[&ev.room];
            if let Some(node) = self.slots.get_mut(&owner).and_then(|s| s.node.as_mut()) {
                node.ingest([ev]);
            }
        }
    }

    fn apply_fault(&mut self, kind: FaultKind) {
        self.digest = fold(self.digest, format!("{} {:?}", self.now, kind).as_bytes());
        info!("{} ms: {:?}", self.now, kind);
        match kind {
            FaultKind::Crash(n) => {
                if let Some(slot) = self.slots.get_mut(&n) {
                    if slot.node.take().is_some() {
                        self.crashed.insert(n);
                    }
                }
            }
            FaultKind::Recover(n) => {
                self.pending_recovers -= 1;
                if self.slots.get(&n).is_some_and(|s| s.node.is_none()) {
                    self.start_node(n, false);
                }
            }
            FaultKind::Partition(groups) => self.partition = Some(groups),
            FaultKind::Heal => self.partition = None,
            FaultKind::DropRate { link: None, probability } => self.drop_all = probability,
            FaultKind::DropRate {
                link: Some((a, b)),
                probability,
            } => {
                self.drop_links.insert((a.min(b), a.max(b)), probability);
            }
        }
    }

    fn check_safety(&mut self) {
        let mut by_term: BTreeMap<Term, Vec<NodeId>> = BTreeMap::new();
        for (id, slot) in &self.slots {
            if let Some(node) = &slot.node {
                if node.role_state().is_master() {
                    by_term.entry(node.role_state().term).or_default().push(*id);
                }
            }
        }
        for (term, masters) in by_term {
            if masters.len() > 1 {
                let seen = self
                    .violations
                    .last()
                    .is_some_and(|v| v.term == term && v.masters == masters);
                if !seen {
                    self.violations.push(SafetyViolation {
                        at: self.now,
                        term,
                        masters,
                    });
                }
            }
        }
    }

    /// Runs to the scenario's duration or until every node is dead.
    pub fn run(mut self) -> SimOutcome {
        let mut stop = StopReason::DurationReached;
        while let Some(next) = self.queue.pop() {
            if next.at > self.spec.duration {
                break;
            }
            self.now = next.at;
            self.feed_reads(self.now);
            match next.action {
                Action::Tick { node, incarnation } => {
                    let slot = self.slots.get_mut(&node).expect("known node");
                    if slot.incarnation != incarnation {
                        continue;
                    }
                    let Some(n) = slot.node.as_mut() else {
                        continue;
                    };
                    let out = n.on_tick(self.now, &mut *self.sink);
                    self.dispatch(node, out);
                    let at = self.now + tick_interval(&self.cluster);
                    self.schedule(at, Action::Tick { node, incarnation });
                }
                Action::Deliver { to, frame } => {
                    let slot = self.slots.get_mut(&to).expect("known node");
                    let Some(n) = slot.node.as_mut() else {
                        self.stats.dropped += 1;
                        continue;
                    };
                    self.stats.delivered += 1;
                    self.digest = fold(self.digest, &frame);
                    let out = n.on_frame(self.now, &frame, &mut *self.sink);
                    self.dispatch(to, out);
                }
                Action::Fault(kind) => {
                    self.apply_fault(kind);
                    if self.alive() == 0 && self.pending_recovers == 0 {
                        stop = StopReason::AllNodesDead { at: self.now };
                        self.check_safety();
                        break;
                    }
                }
            }
            self.check_safety();
        }
        let end = match stop {
            StopReason::AllNodesDead { at } => at,
            StopReason::DurationReached => self.spec.duration,
        };
        SimOutcome {
            scenario_id: self.spec.id.clone(),
            reports: self.reports,
            stop,
            end,
            leadership: self.leadership,
            violations: self.violations,
            stats: self.stats,
            events: self.events,
            sealed: self.sealed,
            crashed: self.crashed,
            room_owners: (*self.room_owners).clone(),
            final_roles: self
                .slots
                .iter()
                .map(|(id, s)| (*id, s.node.as_ref().map(|n| n.role_state().clone())))
                .collect(),
            log_digest: self.digest,
        }
    }
}

/// Runs a scenario against an in-memory store.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<SimOutcome, ScenarioError> {
    let mut sink = MemorySink::new();
    run_scenario_with(spec, &mut sink)
}

/// Runs a scenario, uploading reports to `sink`.
pub fn run_scenario_with(
    spec: &ScenarioSpec,
    sink: &mut dyn ReportSink,
) -> Result<SimOutcome, ScenarioError> {
    Ok(Simulation::new(spec.clone(), sink)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapreduce::sequential_oracle;

    fn small(visitors: u64) -> ScenarioSpec {
        let mut s = ScenarioSpec::new("t", 3, VisitorPlan::Total(visitors));
        s.cluster.cycle_period = 20_000;
        s.tour = 20_000;
        s.duration = 30_000;
        s.seed = 5;
        s
    }

    #[test]
    fn quiet_cluster_commits_the_oracle() {
        let out = run_scenario(&small(200)).unwrap();
        assert_eq!(out.stop, StopReason::DurationReached);
        assert_eq!(out.reports.len(), 1);
        let (c1, c2) = sequential_oracle(&out.events).unwrap();
        assert_eq!(out.reports[0].case1, c1);
        assert_eq!(out.reports[0].case2, c2);
        assert!(out.violations.is_empty());
    }

    #[test]
    fn same_seed_same_digest() {
        let a = run_scenario(&small(50)).unwrap();
        let b = run_scenario(&small(50)).unwrap();
        assert_eq!(a.log_digest, b.log_digest);
        assert_eq!(a.reports, b.reports);
    }

    #[test]
    fn crashing_everyone_stops_the_run() {
        let mut s = small(10);
        for n in 0..3 {
            s.faults.push(FaultEvent { at: 2_000, kind: FaultKind::Crash(NodeId(n)) });
        }
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.stop, StopReason::AllNodesDead { at: 2_000 });
        assert!(out.reports.is_empty());
    }

    #[test]
    fn unknown_fault_target_is_rejected() {
        let mut sink = MemorySink::new();
        let mut sim = Simulation::new(small(0), &mut sink).unwrap();
        let err = sim
            .inject_fault(FaultEvent { at: 1, kind: FaultKind::Crash(NodeId(9)) })
            .unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownNode(NodeId(9))));
    }

    #[test]
    fn total_message_loss_commits_nothing() {
        let mut s = small(30);
        s.faults.push(FaultEvent {
            at: 1_000,
            kind: FaultKind::DropRate { link: None, probability: 1.0 },
        });
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.stop, StopReason::DurationReached);
        assert!(out.reports.is_empty());
    }
}
