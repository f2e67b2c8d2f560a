//! A single room computer. The same state machine runs under the simulator
//! and over real UDP; it never reads a clock or a socket itself. Drivers feed
//! it ticks, datagrams and RFID reads, and forward the [`Output`]s it returns.
//!
//! Every node scans its rooms and answers map and reduce tasks. The node
//! that holds the master role additionally closes task cycles: at each cycle
//! boundary it collects sealed map batches from the room owners, spreads the
//! keys over reducers, folds the reduced counts into a cycle report, uploads
//! it and acknowledges the batches it used. Mappers keep a batch until it is
//! acknowledged, so a batch missed by one cycle is picked up by a later one,
//! and a batch id already present in the store is never counted twice.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use log::{debug, trace, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{CompositeKey, Millis, NodeId, RoomId, VisitorEvent};
use crate::mapreduce::{
    aggregate_case1, aggregate_case2, map_batch, partition, reduce_partition, IntermediateCount,
};
use crate::membership::{
    degree_is_eligible, step_role, ClusterConfig, ConnectivityView, Role, RoleAction, RoleEvent,
    RoleInputs, RoleState, Term,
};
use crate::report::CycleReport;
use crate::storage::{CommitOutcome, MeasurementRecord, ReportSink, StorageError, RECORD_VERSION};
use crate::wire::{chunk_payloads, decode, DedupWindow, Message, MsgType, Payload};

/// Everything a node needs at boot.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub id: NodeId,
    pub cluster: Arc<ClusterConfig>,
    pub room_owners: Arc<BTreeMap<RoomId, NodeId>>,
    /// Upper bound on reducers per cycle.
    pub reducers: usize,
    pub scenario_id: String,
    pub boot: Millis,
    /// True only for the cluster's very first start, when the configured
    /// initial master takes the role without an election.
    pub cold_start: bool,
    pub seed: u64,
}

/// Rooms are dealt to nodes round-robin in id order.
pub fn assign_rooms(rooms: u32, cluster: &ClusterConfig) -> BTreeMap<RoomId, NodeId> {
    let nodes: Vec<NodeId> = cluster.nodes().collect();
    (0..rooms)
        .map(|r| (RoomId(r), nodes[r as usize % nodes.len()]))
        .collect()
}

/// Tick spacing drivers should use.
pub fn tick_interval(cluster: &ClusterConfig) -> Millis {
    (cluster.heartbeat_period / 4).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send { to: NodeId, msg: Message },
    Note(Note),
}

/// Observable side effects, for drivers and test harnesses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Note {
    RoleChanged { role: Role, term: Term },
    Sealed {
        batch: String,
        room: RoomId,
        events: Vec<u64>,
    },
    Committed(CycleReport),
    CommitSkipped { cycle: u64, reason: String },
    SinkError(String),
    Dropped(String),
}

#[derive(Debug)]
struct Claim {
    term: Term,
    started: Millis,
    acks: BTreeSet<NodeId>,
}

#[derive(Debug, Default)]
struct Assembly {
    chunks: usize,
    parts: BTreeMap<usize, Vec<IntermediateCount>>,
}

impl Assembly {
    fn add(&mut self, chunk: usize, chunks: usize, counts: Vec<IntermediateCount>) -> bool {
        self.chunks = chunks;
        self.parts.insert(chunk, counts);
        self.parts.len() == self.chunks
    }

    fn all(&self) -> Vec<IntermediateCount> {
        self.parts.values().flatten().copied().collect()
    }
}

#[derive(Debug, Default)]
struct RoomReply {
    of: usize,
    batches: BTreeMap<String, Vec<IntermediateCount>>,
}

impl RoomReply {
    fn complete(&self) -> bool {
        self.batches.len() >= self.of
    }
}

#[derive(Debug)]
struct ReduceRound {
    id: u64,
    started: Millis,
    assignees: Vec<NodeId>,
    shards: Vec<Vec<IntermediateCount>>,
    results: BTreeMap<usize, BTreeMap<CompositeKey, u64>>,
    inbox: BTreeMap<usize, Assembly>,
    included: Vec<String>,
    acks: BTreeMap<NodeId, Vec<String>>,
    last_commit_attempt: Option<Millis>,
}

#[derive(Debug)]
struct CycleClose {
    cycle: u64,
    started: Millis,
    last_push: Millis,
    rooms: BTreeMap<RoomId, RoomReply>,
    reduce: Option<ReduceRound>,
}

#[derive(Debug, Default)]
struct MasterState {
    ready: bool,
    next_cycle: u64,
    committed: BTreeSet<String>,
    closing: Option<CycleClose>,
    rounds: u64,
}

type ReduceKey = (NodeId, Term, u64, u64, usize);

pub struct Node {
    id: NodeId,
    cluster: Arc<ClusterConfig>,
    room_owners: Arc<BTreeMap<RoomId, NodeId>>,
    my_rooms: Vec<RoomId>,
    reducers: usize,
    scenario_id: String,
    boot: Millis,
    now: Millis,
    rng: ChaCha8Rng,
    next_seq: u64,
    dedup: DedupWindow,
    out: Vec<Output>,
    loopback: VecDeque<Message>,

    role: RoleState,
    view: ConnectivityView,
    peer_degree: BTreeMap<NodeId, usize>,
    master_contact: Option<(NodeId, Millis)>,
    silent_since: Millis,
    claim: Option<Claim>,
    retry_after: Millis,
    quarantine_until: Millis,
    reclaim: bool,
    next_heartbeat: Millis,
    next_check: Millis,

    open: BTreeMap<RoomId, BTreeMap<u64, Vec<VisitorEvent>>>,
    outstanding: BTreeMap<RoomId, BTreeMap<String, Vec<IntermediateCount>>>,
    seen_events: HashSet<u64>,
    batch_seq: u64,

    reduce_inbox: BTreeMap<ReduceKey, Assembly>,
    master: Option<MasterState>,
}

const REDUCE_INBOX_LIMIT: usize = 64;

fn counts_from(payload: &Payload) -> Vec<IntermediateCount> {
    payload
        .entries()
        .iter()
        .filter_map(|(k, v)| {
            let key: CompositeKey = k.parse().ok()?;
            Some(IntermediateCount::new(key, v.parse().ok()?))
        })
        .collect()
}

fn count_entries<'a>(counts: impl IntoIterator<Item = (&'a CompositeKey, &'a u64)>) -> Vec<(String, String)> {
    counts
        .into_iter()
        .map(|(k, v)| (k.text(), v.to_string()))
        .collect()
}

impl Node {
    pub fn boot(setup: NodeSetup) -> (Node, Vec<Output>) {
        let NodeSetup {
            id,
            cluster,
            room_owners,
            reducers,
            scenario_id,
            boot,
            cold_start,
            seed,
        } = setup;
        let role = if cold_start {
            if id == cluster.initial_master {
                RoleState::master(id, Term(0))
            } else {
                RoleState::worker(id, Term(0), Some(cluster.initial_master))
            }
        } else {
            RoleState::worker(id, Term(0), None)
        };
        let my_rooms = room_owners
            .iter()
            .filter(|(_, o)| **o == id)
            .map(|(r, _)| *r)
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(
            seed ^ (u64::from(id.0) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ boot.rotate_left(17),
        );
        let mut node = Node {
            id,
            view: ConnectivityView::new(id, cluster.heartbeat_timeout).at(boot),
            master_contact: if cold_start {
                Some((cluster.initial_master, boot))
            } else {
                None
            },
            quarantine_until: if cold_start {
                boot
            } else {
                boot + 2 * cluster.heartbeat_timeout
            },
            next_check: boot + cluster.check_period,
            cluster,
            room_owners,
            my_rooms,
            reducers: reducers.max(1),
            scenario_id,
            boot,
            now: boot,
            rng,
            // a restarted node must not reuse sequence numbers from an
            // earlier incarnation
            next_seq: boot << 20,
            dedup: DedupWindow::new(),
            out: Vec::new(),
            loopback: VecDeque::new(),
            role,
            peer_degree: BTreeMap::new(),
            silent_since: boot,
            claim: None,
            retry_after: boot,
            reclaim: false,
            next_heartbeat: boot,
            open: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            seen_events: HashSet::new(),
            batch_seq: 0,
            reduce_inbox: BTreeMap::new(),
            master: None,
        };
        if node.role.is_master() {
            node.master = Some(MasterState::default());
        }
        node.broadcast(MsgType::Hello, Payload::new());
        let out = std::mem::take(&mut node.out);
        (node, out)
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role_state(&self) -> &RoleState {
        &self.role
    }

    pub fn view(&self) -> &ConnectivityView {
        &self.view
    }

    pub fn rooms(&self) -> &[RoomId] {
        &self.my_rooms
    }

    pub fn boot_time(&self) -> Millis {
        self.boot
    }

    /// Unacknowledged sealed batches, by room.
    pub fn outstanding_batches(&self) -> usize {
        self.outstanding.values().map(BTreeMap::len).sum()
    }

    /// RFID reads from this node's readers. Reads for rooms it does not scan
    /// and repeated event ids are ignored.
    pub fn ingest(&mut self, events: impl IntoIterator<Item = VisitorEvent>) {
        let period = self.cluster.cycle_period;
        for ev in events {
            if !self.my_rooms.contains(&ev.room) {
                debug!("node {} ignoring read for foreign {}", self.id, ev.room);
                continue;
            }
            if !self.seen_events.insert(ev.event_id) {
                continue;
            }
            self.open
                .entry(ev.room)
                .or_default()
                .entry(ev.timestamp / period)
                .or_default()
                .push(ev);
        }
    }

    pub fn on_tick(&mut self, now: Millis, sink: &mut dyn ReportSink) -> Vec<Output> {
        self.enter(now);
        if now >= self.next_heartbeat {
            self.send_heartbeats();
            while self.next_heartbeat <= now {
                self.next_heartbeat += self.cluster.heartbeat_period;
            }
        }
        match self.role.role {
            Role::Worker => self.maybe_claim(sink),
            Role::Candidate => {
                let expired = self.claim.as_ref().is_none_or(|c| {
                    now.saturating_sub(c.started) > self.cluster.heartbeat_timeout
                });
                if expired {
                    let term = self.role.term;
                    self.apply(RoleEvent::ClaimExpired { term }, sink);
                    let backoff = self.rng.gen_range(0..self.cluster.heartbeat_timeout);
                    self.retry_after = now + backoff;
                }
            }
            Role::Master => {
                if now >= self.next_check {
                    while self.next_check <= now {
                        self.next_check += self.cluster.check_period;
                    }
                    self.apply(RoleEvent::ConnectivityCheckDue, sink);
                }
            }
        }
        self.settle(sink, true);
        std::mem::take(&mut self.out)
    }

    /// Handles one received datagram. Malformed frames and duplicates are
    /// dropped.
    pub fn on_frame(&mut self, now: Millis, frame: &[u8], sink: &mut dyn ReportSink) -> Vec<Output> {
        self.enter(now);
        match decode(frame) {
            Ok(msg) => {
                if self.dedup.check_duplicate(msg.sender, msg.seq) {
                    self.handle(msg, sink);
                } else {
                    trace!("node {} dropping duplicate {} from {}", self.id, msg.seq, msg.sender);
                }
            }
            Err(e) => {
                debug!("node {} dropping malformed frame: {e}", self.id);
                self.out.push(Output::Note(Note::Dropped(e.to_string())));
            }
        }
        self.settle(sink, false);
        std::mem::take(&mut self.out)
    }

    fn enter(&mut self, now: Millis) {
        self.now = self.now.max(now);
        self.view.advance(self.now);
    }

    fn settle(&mut self, sink: &mut dyn ReportSink, tick: bool) {
        let mut tick = tick;
        loop {
            while let Some(msg) = self.loopback.pop_front() {
                self.handle(msg, sink);
            }
            if self.role.is_master() {
                self.drive_master(sink, tick);
                tick = false;
            }
            if self.loopback.is_empty() {
                break;
            }
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn make(&mut self, kind: MsgType, payload: Payload) -> Message {
        Message {
            kind,
            sender: self.id,
            term: self.role.term,
            seq: self.next_seq(),
            payload,
        }
    }

    fn send(&mut self, to: NodeId, kind: MsgType, payload: Payload) {
        let msg = self.make(kind, payload);
        if to == self.id {
            self.loopback.push_back(msg);
        } else {
            self.out.push(Output::Send { to, msg });
        }
    }

    fn broadcast(&mut self, kind: MsgType, payload: Payload) {
        let peers: Vec<NodeId> = self.cluster.nodes().filter(|n| *n != self.id).collect();
        for p in peers {
            self.send(p, kind, payload.clone());
        }
    }

    fn note(&mut self, note: Note) {
        self.out.push(Output::Note(note));
    }

    fn status_payload(&self) -> Payload {
        let role = match self.role.role {
            Role::Master => "M",
            Role::Worker => "W",
            Role::Candidate => "C",
        };
        Payload::new()
            .with("role", role)
            .with("deg", self.view.degree())
    }

    fn send_heartbeats(&mut self) {
        let p = self.status_payload();
        self.broadcast(MsgType::Hb, p);
    }

    fn self_eligible(&self) -> bool {
        degree_is_eligible(self.view.degree(), self.cluster.node_count())
    }

    fn role_inputs(&self) -> RoleInputs {
        let incumbent = if self.role.is_master() {
            Some((self.id, self.view.degree()))
        } else {
            // only a master heard from within half a timeout is worth defending
            self.master_contact
                .filter(|(m, t)| {
                    *m != self.id && self.now.saturating_sub(*t) <= self.cluster.heartbeat_timeout / 2
                })
                .map(|(m, _)| (m, self.peer_degree.get(&m).copied().unwrap_or(0)))
        };
        RoleInputs {
            node_count: self.cluster.node_count(),
            self_degree: self.view.degree(),
            incumbent,
            may_vote: self.now >= self.quarantine_until,
        }
    }

    fn apply(&mut self, event: RoleEvent, sink: &mut dyn ReportSink) {
        let inputs = self.role_inputs();
        let before = self.role.clone();
        let (next, actions) = match step_role(&self.role, &event, &inputs) {
            Ok(r) => r,
            Err(e) => {
                trace!("node {}: {e}", self.id);
                return;
            }
        };
        self.role = next;
        if self.role.known_master.is_none() && (before.known_master.is_some() || self.role.term > before.term)
        {
            self.silent_since = self.now;
        }
        if self.role.role != Role::Candidate {
            self.claim = None;
        }
        for action in actions {
            match action {
                RoleAction::BroadcastClaim { term, degree } => {
                    self.claim = Some(Claim {
                        term,
                        started: self.now,
                        acks: BTreeSet::from([self.id]),
                    });
                    self.broadcast(MsgType::LeaderClaim, Payload::new().with("deg", degree));
                }
                RoleAction::SendAck { to, term } => {
                    let msg = Message {
                        term,
                        ..self.make(MsgType::LeaderAck, Payload::new())
                    };
                    self.out.push(Output::Send { to, msg });
                }
                RoleAction::BroadcastAnnounce { .. } => {
                    self.broadcast(MsgType::LeaderAnnounce, Payload::new());
                }
                RoleAction::BroadcastAbdicate { .. } => {
                    self.broadcast(MsgType::Abdicate, Payload::new());
                }
            }
        }
        if before.role != self.role.role || before.term != self.role.term {
            debug!(
                "node {} {:?}@{} -> {:?}@{} at {}",
                self.id, before.role, before.term, self.role.role, self.role.term, self.now
            );
            self.note(Note::RoleChanged {
                role: self.role.role,
                term: self.role.term,
            });
        }
        if before.role == Role::Master && self.role.role != Role::Master {
            self.master = None;
            // deposed by a bare term bump while still fit to lead: win it back
            self.reclaim = self.role.known_master.is_none()
                && !matches!(event, RoleEvent::ConnectivityCheckDue)
                && self.self_eligible();
        }
        if before.role != Role::Master && self.role.role == Role::Master {
            self.become_master(sink);
        }
        self.check_quorum(sink);
    }

    fn check_quorum(&mut self, sink: &mut dyn ReportSink) {
        let reached = match (&self.claim, self.role.role) {
            (Some(c), Role::Candidate) => c.acks.len() >= self.cluster.quorum(),
            _ => false,
        };
        if reached {
            let term = self.role.term;
            self.apply(RoleEvent::LeaderAckQuorum { term }, sink);
        }
    }

    fn maybe_claim(&mut self, sink: &mut dyn ReportSink) {
        if self.now < self.quarantine_until || self.now < self.retry_after {
            return;
        }
        if std::mem::take(&mut self.reclaim) {
            self.apply(RoleEvent::HeartbeatTimeoutOnMaster, sink);
            return;
        }
        let anchor = match (self.role.known_master, self.master_contact) {
            (Some(m), Some((c, t))) if c == m => t,
            _ => self.silent_since,
        };
        // lower ids among the live nodes go first
        let rank = self
            .view
            .live_nodes()
            .iter()
            .filter(|n| Some(**n) != self.role.known_master)
            .position(|n| *n == self.id)
            .unwrap_or(0) as u64;
        let stagger = rank * (self.cluster.heartbeat_period / 2);
        if self.now.saturating_sub(anchor) > self.cluster.heartbeat_timeout + stagger {
            self.apply(RoleEvent::HeartbeatTimeoutOnMaster, sink);
        }
    }

    /// Applies a message from whoever claims to lead `msg.term`. Returns
    /// whether this node now follows the sender.
    fn accept_leader(&mut self, msg: &Message, sink: &mut dyn ReportSink) -> bool {
        if msg.sender == self.id {
            return self.role.is_master() && msg.term == self.role.term;
        }
        if msg.term < self.role.term {
            return false;
        }
        if self.role.is_master() && msg.term == self.role.term {
            warn!(
                "node {} is master of term {} but {} also leads it",
                self.id, msg.term, msg.sender
            );
            return false;
        }
        self.apply(
            RoleEvent::HigherTermObserved {
                term: msg.term,
                leader: Some(msg.sender),
            },
            sink,
        );
        if self.role.known_master == Some(msg.sender) && self.role.term == msg.term {
            self.master_contact = Some((msg.sender, self.now));
            true
        } else {
            false
        }
    }

    fn handle(&mut self, msg: Message, sink: &mut dyn ReportSink) {
        if msg.sender != self.id {
            let _ = self.view.record_heartbeat(msg.sender, self.now);
        }
        match msg.kind {
            MsgType::Hello => {
                let p = self.status_payload();
                self.send(msg.sender, MsgType::HbAck, p);
            }
            MsgType::Hb | MsgType::HbAck => {
                if let Some(d) = msg.payload.get_parsed::<usize>("deg") {
                    self.peer_degree.insert(msg.sender, d);
                }
                if msg.payload.get("role") == Some("M") {
                    self.accept_leader(&msg, sink);
                } else {
                    self.observe_term(&msg, sink);
                }
            }
            MsgType::LeaderClaim => {
                let degree = msg.payload.get_parsed("deg").unwrap_or(0);
                self.peer_degree.insert(msg.sender, degree);
                self.apply(
                    RoleEvent::LeaderClaimReceived {
                        term: msg.term,
                        from: msg.sender,
                        degree,
                    },
                    sink,
                );
            }
            MsgType::LeaderAck => {
                if let Some(c) = self.claim.as_mut() {
                    if c.term == msg.term {
                        c.acks.insert(msg.sender);
                    }
                }
                self.check_quorum(sink);
            }
            MsgType::LeaderAnnounce => {
                self.accept_leader(&msg, sink);
            }
            MsgType::Abdicate => {
                if self.role.known_master == Some(msg.sender) && self.role.term == msg.term {
                    self.master_contact = None;
                    self.silent_since = self.now.saturating_sub(self.cluster.heartbeat_timeout);
                }
            }
            MsgType::Task => {
                if self.accept_leader(&msg, sink) {
                    match msg.payload.get("phase") {
                        Some("map") => self.on_map_task(&msg),
                        Some("reduce") => self.on_reduce_task(&msg),
                        _ => self.note(Note::Dropped("task without phase".into())),
                    }
                }
            }
            MsgType::CycleDone => {
                if self.accept_leader(&msg, sink) {
                    self.on_cycle_done(&msg);
                }
            }
            MsgType::MapOut | MsgType::RedOut => {
                self.observe_term(&msg, sink);
                if self.role.is_master() && msg.term == self.role.term {
                    if msg.kind == MsgType::MapOut {
                        self.on_map_out(&msg);
                    } else {
                        self.on_red_out(&msg);
                    }
                }
            }
        }
    }

    fn observe_term(&mut self, msg: &Message, sink: &mut dyn ReportSink) {
        if msg.term > self.role.term {
            self.apply(
                RoleEvent::HigherTermObserved {
                    term: msg.term,
                    leader: None,
                },
                sink,
            );
        }
    }

    // ---- mapper / reducer side ----

    fn seal_through(&mut self, cycle: u64) {
        for room in self.my_rooms.clone() {
            let Some(by_cycle) = self.open.get_mut(&room) else {
                continue;
            };
            let later = by_cycle.split_off(&(cycle + 1));
            let due = std::mem::replace(by_cycle, later);
            let events: Vec<VisitorEvent> = due.into_values().flatten().collect();
            if events.is_empty() {
                continue;
            }
            let counts = map_batch(&events, room).expect("open buckets hold only own-room reads");
            let id = format!("{}.{}.{}", room.0, self.boot, self.batch_seq);
            self.batch_seq += 1;
            self.outstanding
                .entry(room)
                .or_default()
                .insert(id.clone(), counts);
            self.note(Note::Sealed {
                batch: id,
                room,
                events: events.iter().map(|e| e.event_id).collect(),
            });
        }
    }

    fn on_map_task(&mut self, msg: &Message) {
        let Some(cycle) = msg.payload.get_parsed::<u64>("cycle") else {
            return;
        };
        self.seal_through(cycle);
        for room in self.my_rooms.clone() {
            let batches: Vec<(String, Vec<IntermediateCount>)> = self
                .outstanding
                .get(&room)
                .map(|b| b.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                .unwrap_or_default();
            let base = Payload::new().with("cycle", cycle).with("room", room.0);
            if batches.is_empty() {
                self.send(msg.sender, MsgType::MapOut, base.with("of", 0));
                continue;
            }
            let of = batches.len();
            for (idx, (id, counts)) in batches.into_iter().enumerate() {
                let mut p = base
                    .clone()
                    .with("batch", id)
                    .with("idx", idx)
                    .with("of", of);
                for c in counts {
                    p.push(c.key.text(), c.count);
                }
                self.send(msg.sender, MsgType::MapOut, p);
            }
        }
    }

    fn on_reduce_task(&mut self, msg: &Message) {
        let p = &msg.payload;
        let (Some(cycle), Some(round), Some(part), Some(chunk), Some(chunks)) = (
            p.get_parsed::<u64>("cycle"),
            p.get_parsed::<u64>("round"),
            p.get_parsed::<usize>("part"),
            p.get_parsed::<usize>("chunk"),
            p.get_parsed::<usize>("chunks"),
        ) else {
            self.note(Note::Dropped("reduce task missing fields".into()));
            return;
        };
        let key = (msg.sender, msg.term, cycle, round, part);
        let asm = self.reduce_inbox.entry(key).or_default();
        if !asm.add(chunk, chunks, counts_from(p)) {
            return;
        }
        let reduced = reduce_partition(&asm.all());
        while self.reduce_inbox.len() > REDUCE_INBOX_LIMIT {
            self.reduce_inbox.pop_first();
        }
        let fixed = [
            ("cycle".to_string(), cycle.to_string()),
            ("round".to_string(), round.to_string()),
            ("part".to_string(), part.to_string()),
        ];
        match chunk_payloads(MsgType::RedOut, &fixed, &count_entries(&reduced)) {
            Ok(payloads) => {
                for p in payloads {
                    self.send(msg.sender, MsgType::RedOut, p);
                }
            }
            Err(e) => warn!("node {} cannot frame reduce output: {e}", self.id),
        }
    }

    fn on_cycle_done(&mut self, msg: &Message) {
        for (k, id) in msg.payload.entries() {
            if k == "ack" {
                for batches in self.outstanding.values_mut() {
                    batches.remove(id);
                }
            }
        }
    }

    // ---- master side ----

    fn become_master(&mut self, sink: &mut dyn ReportSink) {
        self.master = Some(MasterState::default());
        self.master_contact = Some((self.id, self.now));
        self.next_check = self.now + self.cluster.check_period;
        self.load_progress(sink);
        self.send_heartbeats();
    }

    fn load_progress(&mut self, sink: &mut dyn ReportSink) {
        let scenario = self.scenario_id.clone();
        let loaded = (|| -> Result<(Option<u64>, BTreeSet<String>), StorageError> {
            match sink.last_cycle(&scenario) {
                Ok(last) => Ok((last, sink.committed_batches(&scenario)?)),
                Err(StorageError::UnknownScenario(_)) => {
                    sink.open_scenario(&scenario)?;
                    Ok((None, BTreeSet::new()))
                }
                Err(e) => Err(e),
            }
        })();
        let Some(ms) = self.master.as_mut() else {
            return;
        };
        match loaded {
            Ok((last, committed)) => {
                ms.ready = true;
                ms.next_cycle = last.map_or(0, |c| c + 1).max(ms.next_cycle);
                ms.committed = committed;
            }
            Err(e) => self.note(Note::SinkError(e.to_string())),
        }
    }

    fn live(&self, node: NodeId) -> bool {
        self.view.is_live(node)
    }

    fn drive_master(&mut self, sink: &mut dyn ReportSink, tick: bool) {
        let Some(ms) = self.master.as_ref() else {
            return;
        };
        if !ms.ready {
            if tick {
                self.load_progress(sink);
            }
            return;
        }
        let period = self.cluster.cycle_period;
        let due = ms.closing.is_none() && self.now >= (ms.next_cycle + 1) * period;
        if due {
            let cycle = ms.next_cycle;
            self.start_close(cycle);
        }
        let Some(mut close) = self.master.as_mut().and_then(|m| m.closing.take()) else {
            return;
        };
        let keep = match close.reduce {
            None => self.drive_map_phase(&mut close),
            Some(_) => self.drive_reduce_phase(&mut close, sink, tick),
        };
        if keep {
            if let Some(ms) = self.master.as_mut() {
                ms.closing = Some(close);
            }
        }
    }

    fn start_close(&mut self, cycle: u64) {
        debug!("node {} closing cycle {cycle} at {}", self.id, self.now);
        if let Some(ms) = self.master.as_mut() {
            ms.closing = Some(CycleClose {
                cycle,
                started: self.now,
                last_push: self.now,
                rooms: BTreeMap::new(),
                reduce: None,
            });
        }
        let owners: BTreeSet<NodeId> = self
            .room_owners
            .values()
            .copied()
            .filter(|o| self.live(*o))
            .collect();
        for o in owners {
            self.send_map_task(o, cycle);
        }
    }

    fn send_map_task(&mut self, to: NodeId, cycle: u64) {
        let p = Payload::new().with("phase", "map").with("cycle", cycle);
        self.send(to, MsgType::Task, p);
    }

    fn on_map_out(&mut self, msg: &Message) {
        let p = &msg.payload;
        let (Some(cycle), Some(room), Some(of)) = (
            p.get_parsed::<u64>("cycle"),
            p.get_parsed::<u32>("room"),
            p.get_parsed::<usize>("of"),
        ) else {
            self.note(Note::Dropped("map output missing fields".into()));
            return;
        };
        let room = RoomId(room);
        if self.room_owners.get(&room) != Some(&msg.sender) {
            self.note(Note::Dropped(format!("{room} is not scanned by {}", msg.sender)));
            return;
        }
        let Some(close) = self.master.as_mut().and_then(|m| m.closing.as_mut()) else {
            return;
        };
        if close.cycle != cycle || close.reduce.is_some() {
            return;
        }
        let reply = close.rooms.entry(room).or_default();
        reply.of = of;
        if let Some(id) = p.get("batch") {
            reply.batches.insert(id.to_string(), counts_from(p));
        }
    }

    fn waiting_rooms(&self, close: &CycleClose) -> Vec<RoomId> {
        self.room_owners
            .iter()
            .filter(|(_, o)| self.live(**o))
            .map(|(r, _)| *r)
            .filter(|r| !close.rooms.get(r).is_some_and(RoomReply::complete))
            .collect()
    }

    fn drive_map_phase(&mut self, close: &mut CycleClose) -> bool {
        let waiting = self.waiting_rooms(close);
        let timed_out = self.now >= close.started + self.cluster.heartbeat_timeout;
        if waiting.is_empty() || timed_out {
            if !waiting.is_empty() {
                debug!(
                    "node {} closing cycle {} without {} room(s)",
                    self.id,
                    close.cycle,
                    waiting.len()
                );
            }
            self.start_reduce(close);
            return true;
        }
        if self.now >= close.last_push + self.cluster.heartbeat_period {
            close.last_push = self.now;
            let owners: BTreeSet<NodeId> = waiting.iter().map(|r| self.room_owners[r]).collect();
            for o in owners {
                self.send_map_task(o, close.cycle);
            }
        }
        true
    }

    fn start_reduce(&mut self, close: &mut CycleClose) {
        let committed = self
            .master
            .as_ref()
            .map(|m| m.committed.clone())
            .unwrap_or_default();
        let mut fresh = Vec::new();
        let mut included = Vec::new();
        let mut acks: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
        for (room, reply) in &close.rooms {
            let owner = self.room_owners[room];
            for (id, counts) in &reply.batches {
                acks.entry(owner).or_default().push(id.clone());
                if !committed.contains(id) {
                    included.push(id.clone());
                    fresh.extend(counts.iter().copied());
                }
            }
        }
        let live: Vec<NodeId> = self.view.live_nodes();
        let others: Vec<NodeId> = live.iter().copied().filter(|n| *n != self.id).collect();
        let candidates = if others.is_empty() { vec![self.id] } else { others };
        let keys: BTreeSet<CompositeKey> = fresh.iter().map(|c| c.key).collect();
        let (assignees, shards) = if keys.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let r = self.reducers.min(candidates.len()).max(1);
            let plan = partition(&keys, r).expect("r >= 1");
            (candidates[..r].to_vec(), plan.shard(&fresh))
        };
        let round_id = self.master.as_mut().map_or(0, |m| {
            m.rounds += 1;
            m.rounds
        });
        close.reduce = Some(ReduceRound {
            id: round_id,
            started: self.now,
            assignees,
            shards,
            results: BTreeMap::new(),
            inbox: BTreeMap::new(),
            included,
            acks,
            last_commit_attempt: None,
        });
        close.last_push = self.now;
        let parts = close.reduce.as_ref().map_or(0, |r| r.shards.len());
        for part in 0..parts {
            self.send_reduce_task(close, part);
        }
    }

    fn send_reduce_task(&mut self, close: &CycleClose, part: usize) {
        let Some(round) = close.reduce.as_ref() else {
            return;
        };
        let to = round.assignees[part];
        let fixed = [
            ("phase".to_string(), "reduce".to_string()),
            ("cycle".to_string(), close.cycle.to_string()),
            ("round".to_string(), round.id.to_string()),
            ("part".to_string(), part.to_string()),
        ];
        let entries: Vec<(String, String)> = round.shards[part]
            .iter()
            .map(|c| (c.key.text(), c.count.to_string()))
            .collect();
        match chunk_payloads(MsgType::Task, &fixed, &entries) {
            Ok(payloads) => {
                for p in payloads {
                    self.send(to, MsgType::Task, p);
                }
            }
            Err(e) => warn!("node {} cannot frame reduce task: {e}", self.id),
        }
    }

    fn on_red_out(&mut self, msg: &Message) {
        let p = &msg.payload;
        let (Some(cycle), Some(round_id), Some(part), Some(chunk), Some(chunks)) = (
            p.get_parsed::<u64>("cycle"),
            p.get_parsed::<u64>("round"),
            p.get_parsed::<usize>("part"),
            p.get_parsed::<usize>("chunk"),
            p.get_parsed::<usize>("chunks"),
        ) else {
            self.note(Note::Dropped("reduce output missing fields".into()));
            return;
        };
        let Some(close) = self.master.as_mut().and_then(|m| m.closing.as_mut()) else {
            return;
        };
        let Some(round) = close.reduce.as_mut() else {
            return;
        };
        if close.cycle != cycle || round.id != round_id || part >= round.shards.len() {
            return;
        }
        if round.results.contains_key(&part) || round.assignees[part] != msg.sender {
            return;
        }
        let asm = round.inbox.entry(part).or_default();
        if asm.add(chunk, chunks, counts_from(p)) {
            let reduced = reduce_partition(&asm.all());
            round.results.insert(part, reduced);
            round.inbox.remove(&part);
        }
    }

    fn drive_reduce_phase(
        &mut self,
        close: &mut CycleClose,
        sink: &mut dyn ReportSink,
        tick: bool,
    ) -> bool {
        let now = self.now;
        let timeout = self.cluster.heartbeat_timeout;
        let Some(round) = close.reduce.as_mut() else {
            return true;
        };
        let missing: Vec<usize> = (0..round.shards.len())
            .filter(|p| !round.results.contains_key(p))
            .collect();
        if !missing.is_empty() {
            if now >= round.started + timeout {
                // reducers went quiet: do their share here
                for p in missing {
                    let local = reduce_partition(&round.shards[p]);
                    round.results.insert(p, local);
                }
            } else {
                if now >= close.last_push + self.cluster.heartbeat_period {
                    close.last_push = now;
                    for p in missing {
                        self.send_reduce_task(close, p);
                    }
                }
                return true;
            }
        }
        let Some(round) = close.reduce.as_mut() else {
            return true;
        };
        if let Some(at) = round.last_commit_attempt {
            if !tick || now < at + self.cluster.heartbeat_period {
                return true;
            }
        }
        round.last_commit_attempt = Some(now);
        self.try_commit(close, sink)
    }

    /// Returns whether the close is still in progress.
    fn try_commit(&mut self, close: &mut CycleClose, sink: &mut dyn ReportSink) -> bool {
        if !self.self_eligible() {
            return true;
        }
        let Some(round) = close.reduce.as_ref() else {
            return true;
        };
        let mut reduced: BTreeMap<CompositeKey, u64> = BTreeMap::new();
        for part in round.results.values() {
            for (k, v) in part {
                *reduced.entry(*k).or_insert(0) += v;
            }
        }
        let case1 = aggregate_case1(&reduced);
        let case2 = aggregate_case2(&reduced);
        let events = case1.events();
        let mut batches = round.included.clone();
        batches.sort();
        let record = MeasurementRecord {
            v: RECORD_VERSION,
            scenario_id: self.scenario_id.clone(),
            cycle_index: close.cycle,
            term: self.role.term,
            master: self.id,
            ingested_at: self.now,
            events,
            case1,
            case2,
            batches,
        };
        let outcome = sink.try_commit(&record);
        let acks = round.acks.clone();
        match outcome {
            Ok(CommitOutcome::Committed) => {
                if let Some(ms) = self.master.as_mut() {
                    ms.committed.extend(record.batches.iter().cloned());
                    ms.next_cycle = close.cycle + 1;
                }
                self.send_acks(close.cycle, &acks);
                self.note(Note::Committed(CycleReport::from_record(&record)));
                false
            }
            Ok(CommitOutcome::CycleExists) => {
                self.note(Note::CommitSkipped {
                    cycle: close.cycle,
                    reason: "cycle already uploaded".into(),
                });
                self.load_progress(sink);
                let committed = self
                    .master
                    .as_ref()
                    .map(|m| m.committed.clone())
                    .unwrap_or_default();
                let acks = acks
                    .into_iter()
                    .map(|(o, ids)| (o, ids.into_iter().filter(|i| committed.contains(i)).collect()))
                    .collect();
                self.send_acks(close.cycle, &acks);
                false
            }
            Ok(CommitOutcome::BatchesTaken(taken)) => {
                self.note(Note::CommitSkipped {
                    cycle: close.cycle,
                    reason: format!("{} batch(es) already uploaded, redoing the cycle", taken.len()),
                });
                self.load_progress(sink);
                false
            }
            Err(e) => {
                self.note(Note::SinkError(e.to_string()));
                true
            }
        }
    }

    fn send_acks(&mut self, cycle: u64, acks: &BTreeMap<NodeId, Vec<String>>) {
        for (owner, ids) in acks {
            if ids.is_empty() {
                continue;
            }
            let entries: Vec<(String, String)> =
                ids.iter().map(|i| ("ack".to_string(), i.clone())).collect();
            let fixed = [("cycle".to_string(), cycle.to_string())];
            match chunk_payloads(MsgType::CycleDone, &fixed, &entries) {
                Ok(payloads) => {
                    for p in payloads {
                        self.send(*owner, MsgType::CycleDone, p);
                    }
                }
                Err(e) => warn!("node {} cannot frame cycle ack: {e}", self.id),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TagCategory;
    use crate::storage::MemorySink;
    use crate::wire::encode;

    fn cluster(n: u32) -> Arc<ClusterConfig> {
        let mut c = ClusterConfig::with_nodes(n);
        c.cycle_period = 20_000;
        Arc::new(c)
    }

    fn setup(id: u32, c: &Arc<ClusterConfig>, rooms: u32, cold: bool) -> NodeSetup {
        NodeSetup {
            id: NodeId(id),
            cluster: c.clone(),
            room_owners: Arc::new(assign_rooms(rooms, c)),
            reducers: 2,
            scenario_id: "unit".into(),
            boot: 0,
            cold_start: cold,
            seed: 1,
        }
    }

    fn sent(out: &[Output]) -> Vec<(NodeId, MsgType)> {
        out.iter()
            .filter_map(|o| match o {
                Output::Send { to, msg } => Some((*to, msg.kind)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn boot_says_hello_to_every_peer() {
        let c = cluster(3);
        let (node, out) = Node::boot(setup(1, &c, 3, true));
        assert_eq!(
            sent(&out),
            vec![(NodeId(0), MsgType::Hello), (NodeId(2), MsgType::Hello)]
        );
        assert_eq!(node.role_state().known_master, Some(NodeId(0)));
        assert_eq!(node.rooms(), &[RoomId(1)]);
    }

    #[test]
    fn single_node_cluster_counts_alone() {
        let c = cluster(1);
        let (mut node, _) = Node::boot(setup(0, &c, 2, true));
        let mut sink = MemorySink::new();
        node.ingest((0..5).map(|i| VisitorEvent {
            event_id: i,
            category: TagCategory::Woman,
            room: RoomId((i % 2) as u32),
            timestamp: i * 1000,
        }));
        let mut reports = Vec::new();
        let mut t = 0;
        while t <= 25_000 {
            for o in node.on_tick(t, &mut sink) {
                if let Output::Note(Note::Committed(r)) = o {
                    reports.push(r);
                }
            }
            t += 250;
        }
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].events_processed, 5);
        assert_eq!(reports[0].case1.total(TagCategory::Woman), 5);
        assert_eq!(node.outstanding_batches(), 0);
        assert_eq!(sink.export("unit").unwrap().len(), 1);
    }

    #[test]
    fn malformed_and_duplicate_frames_are_dropped() {
        let c = cluster(3);
        let (mut node, _) = Node::boot(setup(1, &c, 3, true));
        let mut sink = MemorySink::new();
        let out = node.on_frame(10, b"garbage\n", &mut sink);
        assert!(matches!(out.as_slice(), [Output::Note(Note::Dropped(_))]));
        let hello = Message {
            kind: MsgType::Hello,
            sender: NodeId(2),
            term: Term(0),
            seq: 5,
            payload: Payload::new(),
        };
        let frame = encode(&hello).unwrap();
        assert_eq!(sent(&node.on_frame(20, &frame, &mut sink)), vec![(NodeId(2), MsgType::HbAck)]);
        assert!(sent(&node.on_frame(30, &frame, &mut sink)).is_empty());
    }

    #[test]
    fn worker_claims_after_master_silence() {
        let c = cluster(3);
        let (mut node, _) = Node::boot(setup(1, &c, 3, true));
        let mut sink = MemorySink::new();
        let hb = |seq, sender: u32| Message {
            kind: MsgType::Hb,
            sender: NodeId(sender),
            term: Term(0),
            seq,
            payload: Payload::new().with("role", "W").with("deg", 2),
        };
        let mut claimed_at = None;
        let mut t = 0;
        let mut seq = 0;
        while t <= 10_000 && claimed_at.is_none() {
            // node 2 keeps talking, node 0 (master) is silent
            if t % 1000 == 0 {
                seq += 1;
                node.on_frame(t, &encode(&hb(seq, 2)).unwrap(), &mut sink);
            }
            let out = node.on_tick(t, &mut sink);
            if sent(&out).iter().any(|(_, k)| *k == MsgType::LeaderClaim) {
                claimed_at = Some(t);
            }
            t += 250;
        }
        let at = claimed_at.expect("a claim");
        assert!(at > 5_000 && at <= 6_000, "claimed at {at}");
        assert_eq!(node.role_state().role, Role::Candidate);
        assert_eq!(node.role_state().term, Term(1));
        let ack = Message {
            kind: MsgType::LeaderAck,
            sender: NodeId(2),
            term: Term(1),
            seq: 99,
            payload: Payload::new(),
        };
        let out = node.on_frame(at + 10, &encode(&ack).unwrap(), &mut sink);
        assert_eq!(node.role_state().role, Role::Master);
        assert!(sent(&out).contains(&(NodeId(2), MsgType::LeaderAnnounce)));
    }
}
