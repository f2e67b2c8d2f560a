//! Runs a scenario over real UDP sockets in real time, one thread per node.
//! Node logic is the same as in the simulator; only the clock and the
//! transport differ. Link faults are applied on the sending side.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Millis, NodeId, VisitorEvent};
use crate::membership::{Role, Term};
use crate::node::{assign_rooms, tick_interval, Node, NodeSetup, Note, Output};
use crate::report::CycleReport;
use crate::sim::{generate_stream, FaultKind, ScenarioSpec};
use crate::storage::ReportSink;
use crate::wire::{encode, MAX_FRAME};

#[derive(Debug, Clone, Default)]
pub struct LiveOutcome {
    pub reports: Vec<CycleReport>,
    pub events: Vec<VisitorEvent>,
    /// (time, node, term) each time a node became Master.
    pub leadership: Vec<(Millis, NodeId, Term)>,
    pub sent: u64,
}

#[derive(Debug, Default)]
struct Shared {
    reports: Vec<CycleReport>,
    leadership: Vec<(Millis, NodeId, Term)>,
    sent: u64,
}

type LinkState = (Option<Vec<BTreeSet<NodeId>>>, f64, BTreeMap<(NodeId, NodeId), f64>);

/// Link conditions in force at `now`, replayed from the fault script.
fn link_state(spec: &ScenarioSpec, now: Millis) -> LinkState {
    let mut partition = None;
    let mut drop_all = spec.link.drop_probability;
    let mut links = BTreeMap::new();
    for f in spec.faults.iter().filter(|f| f.at <= now) {
        match &f.kind {
            FaultKind::Partition(g) => partition = Some(g.clone()),
            FaultKind::Heal => partition = None,
            FaultKind::DropRate { link: None, probability } => drop_all = *probability,
            FaultKind::DropRate {
                link: Some((a, b)),
                probability,
            } => {
                links.insert((*a.min(b), *a.max(b)), *probability);
            }
            _ => {}
        }
    }
    (partition, drop_all, links)
}

fn is_up(spec: &ScenarioSpec, node: NodeId, now: Millis) -> bool {
    let mut up = true;
    for f in spec.faults.iter().filter(|f| f.at <= now) {
        match f.kind {
            FaultKind::Crash(n) if n == node => up = false,
            FaultKind::Recover(n) if n == node => up = true,
            _ => {}
        }
    }
    up
}

fn reachable(spec: &ScenarioSpec, rng: &mut ChaCha8Rng, now: Millis, a: NodeId, b: NodeId) -> bool {
    let (partition, drop_all, links) = link_state(spec, now);
    if let Some(groups) = partition {
        let side = |n| groups.iter().position(|g| g.contains(&n)).unwrap_or(groups.len());
        if side(a) != side(b) {
            return false;
        }
    }
    let p = links.get(&(a.min(b), a.max(b))).copied().unwrap_or(drop_all);
    !(p > 0.0 && rng.gen_bool(p))
}

struct Worker<S> {
    id: NodeId,
    spec: Arc<ScenarioSpec>,
    socket: UdpSocket,
    peers: Arc<BTreeMap<NodeId, SocketAddr>>,
    setup: NodeSetup,
    reads: Vec<VisitorEvent>,
    sink: Arc<Mutex<S>>,
    shared: Arc<Mutex<Shared>>,
    start: Arc<Barrier>,
}

impl<S: ReportSink + Send + 'static> Worker<S> {
    fn run(mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ u64::from(self.id.0));
        let tick = tick_interval(&self.spec.cluster);
        let mut buf = [0u8; MAX_FRAME * 2];
        self.start.wait();
        let t0 = Instant::now();
        let clock = || t0.elapsed().as_millis() as Millis;
        let mut node: Option<Node> = None;
        let mut next_read = 0;
        let mut next_tick = 0;
        let mut booted_once = false;
        loop {
            let now = clock();
            if now >= self.spec.duration {
                break;
            }
            let up = is_up(&self.spec, self.id, now);
            let mut out = Vec::new();
            match (&node, up) {
                (None, true) => {
                    let mut setup = self.setup.clone();
                    setup.boot = now;
                    setup.cold_start = !booted_once;
                    booted_once = true;
                    let (n, o) = Node::boot(setup);
                    node = Some(n);
                    out = o;
                    next_tick = now + tick;
                }
                (Some(_), false) => {
                    debug!("live node {} going down at {now}", self.id);
                    node = None;
                }
                _ => {}
            }
            while next_read < self.reads.len() && self.reads[next_read].timestamp <= now {
                if let Some(n) = node.as_mut() {
                    n.ingest([self.reads[next_read]]);
                }
                next_read += 1;
            }
            if let Some(n) = node.as_mut() {
                if now >= next_tick {
                    let mut sink = self.sink.lock().expect("sink lock");
                    out.extend(n.on_tick(now, &mut *sink));
                    next_tick = now + tick;
                }
            }
            self.flush(&mut rng, now, out);
            let wait = next_tick.saturating_sub(clock()).clamp(1, tick);
            let _ = self.socket.set_read_timeout(Some(Duration::from_millis(wait)));
            match self.socket.recv_from(&mut buf) {
                Ok((len, _)) => {
                    if let Some(n) = node.as_mut() {
                        let now = clock();
                        let out = {
                            let mut sink = self.sink.lock().expect("sink lock");
                            n.on_frame(now, &buf[..len], &mut *sink)
                        };
                        self.flush(&mut rng, now, out);
                    }
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(e) => warn!("live node {} receive error: {e}", self.id),
            }
        }
    }

    fn flush(&mut self, rng: &mut ChaCha8Rng, now: Millis, out: Vec<Output>) {
        for o in out {
            match o {
                Output::Send { to, msg } => {
                    let Ok(frame) = encode(&msg) else { continue };
                    self.shared.lock().expect("shared lock").sent += 1;
                    if !reachable(&self.spec, rng, now, self.id, to) {
                        continue;
                    }
                    if let Err(e) = self.socket.send_to(&frame, self.peers[&to]) {
                        debug!("live node {} send to {to} failed: {e}", self.id);
                    }
                }
                Output::Note(Note::Committed(r)) => {
                    self.shared.lock().expect("shared lock").reports.push(r);
                }
                Output::Note(Note::RoleChanged { role: Role::Master, term }) => {
                    self.shared
                        .lock()
                        .expect("shared lock")
                        .leadership
                        .push((now, self.id, term));
                }
                Output::Note(_) => {}
            }
        }
    }
}

/// Runs `spec` for its duration in real time. With `ephemeral_ports` every
/// node binds an OS-chosen localhost port instead of its configured
/// endpoint.
pub fn run_live<S: ReportSink + Send + 'static>(
    spec: &ScenarioSpec,
    sink: S,
    ephemeral_ports: bool,
) -> io::Result<LiveOutcome> {
    let invalid = |e: String| io::Error::new(io::ErrorKind::InvalidInput, e);
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    let events = generate_stream(spec).map_err(|e| invalid(e.to_string()))?;
    let cluster = Arc::new(spec.cluster.clone());
    let owners = Arc::new(assign_rooms(spec.rooms, &cluster));

    let mut sockets = BTreeMap::new();
    let mut peers = BTreeMap::new();
    for (id, addr) in &cluster.endpoints {
        let bind: SocketAddr = if ephemeral_ports {
            SocketAddr::from(([127, 0, 0, 1], 0))
        } else {
            *addr
        };
        let socket = UdpSocket::bind(bind)?;
        peers.insert(*id, socket.local_addr()?);
        sockets.insert(*id, socket);
    }
    let peers = Arc::new(peers);
    let sink = Arc::new(Mutex::new(sink));
    sink.lock()
        .expect("sink lock")
        .open_scenario(&spec.id)
        .map_err(|e| io::Error::other(e.to_string()))?;
    let shared = Arc::new(Mutex::new(Shared::default()));
    let start = Arc::new(Barrier::new(sockets.len()));
    let spec_arc = Arc::new(spec.clone());

    let mut handles = Vec::new();
    for (id, socket) in sockets {
        let reads = events
            .iter()
            .filter(|e| owners[&e.room] == id)
            .copied()
            .collect();
        let worker = Worker {
            id,
            spec: spec_arc.clone(),
            socket,
            peers: peers.clone(),
            setup: NodeSetup {
                id,
                cluster: cluster.clone(),
                room_owners: owners.clone(),
                reducers: spec.reducers,
                scenario_id: spec.id.clone(),
                boot: 0,
                cold_start: true,
                seed: spec.seed,
            },
            reads,
            sink: sink.clone(),
            shared: shared.clone(),
            start: start.clone(),
        };
        handles.push(thread::spawn(move || worker.run()));
    }
    for h in handles {
        h.join()
            .map_err(|_| io::Error::other("a node thread panicked"))?;
    }
    let mut shared = std::mem::take(&mut *shared.lock().expect("shared lock"));
    shared.reports.sort_by_key(|r| (r.cycle_index, r.term));
    shared.leadership.sort();
    Ok(LiveOutcome {
        reports: shared.reports,
        events,
        leadership: shared.leadership,
        sent: shared.sent,
    })
}
