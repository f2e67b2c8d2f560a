//! Failure detection and role exchange.
//!
//! A node is eligible to lead when it has recently heard from at least
//! two thirds of the cluster (itself included). Leadership tenures are
//! stamped with a [`Term`]; a claim for a new term needs acknowledgements
//! from the same two-thirds quorum, and every node acknowledges at most one
//! claim per term, so two masters can never share a term. An incumbent that
//! is still eligible keeps its role: voters that can hear a live, eligible
//! master refuse to back anyone else.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Millis, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("a node cannot record a heartbeat from itself")]
    SelfHeartbeat,
    #[error("event for term {event} is older than current term {current}")]
    StaleEvent { event: Term, current: Term },
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
}

/// Leadership epoch. Never decreases at a node.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Term(pub u64);

impl Term {
    pub fn next(self) -> Term {
        Term(self.0 + 1)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const DEFAULT_HEARTBEAT_PERIOD: Millis = 1_000;
pub const DEFAULT_HEARTBEAT_TIMEOUT: Millis = 5_000;
pub const DEFAULT_CHECK_PERIOD: Millis = 60_000;
pub const DEFAULT_CYCLE_PERIOD: Millis = 300_000;
pub const DEFAULT_BASE_PORT: u16 = 7400;

/// Static cluster layout, fixed at first start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    pub endpoints: BTreeMap<NodeId, SocketAddr>,
    pub initial_master: NodeId,
    pub heartbeat_period: Millis,
    pub heartbeat_timeout: Millis,
    /// How often a master re-checks its own eligibility.
    pub check_period: Millis,
    pub cycle_period: Millis,
}

impl ClusterConfig {
    /// `n` nodes on consecutive localhost ports, node 0 as initial master,
    /// default timings.
    pub fn with_nodes(n: u32) -> Self {
        let endpoints = (0..n)
            .map(|i| {
                let port = DEFAULT_BASE_PORT.wrapping_add(i as u16);
                (
                    NodeId(i),
                    SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::LOCALHOST, port)),
                )
            })
            .collect();
        Self {
            endpoints,
            initial_master: NodeId(0),
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD,
            heartbeat_timeout: DEFAULT_HEARTBEAT_TIMEOUT,
            check_period: DEFAULT_CHECK_PERIOD,
            cycle_period: DEFAULT_CYCLE_PERIOD,
        }
    }

    pub fn node_count(&self) -> usize {
        self.endpoints.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.endpoints.keys().copied()
    }

    pub fn quorum(&self) -> usize {
        quorum(self.node_count())
    }

    pub fn validate(&self) -> Result<(), MembershipError> {
        let bad = |m: &str| Err(MembershipError::InvalidConfig(m.to_string()));
        if self.endpoints.is_empty() {
            return bad("cluster needs at least one node");
        }
        if !self.endpoints.contains_key(&self.initial_master) {
            return bad("initial master is not a cluster member");
        }
        if self.heartbeat_period == 0 {
            return bad("heartbeat period must be positive");
        }
        if self.heartbeat_timeout <= self.heartbeat_period {
            return bad("heartbeat timeout must exceed heartbeat period");
        }
        if self.cycle_period <= self.heartbeat_timeout {
            return bad("cycle period must exceed heartbeat timeout");
        }
        if self.check_period == 0 {
            return bad("connectivity check period must be positive");
        }
        Ok(())
    }
}

/// `ceil(2n / 3)`: the degree needed to lead and the ack quorum for a claim.
pub fn quorum(node_count: usize) -> usize {
    (2 * node_count).div_ceil(3)
}

/// One node's record of when it last heard from each peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityView {
    pub observer: NodeId,
    pub last_heard: BTreeMap<NodeId, Millis>,
    pub now: Millis,
    pub timeout: Millis,
}

impl ConnectivityView {
    pub fn new(observer: NodeId, timeout: Millis) -> Self {
        Self {
            observer,
            last_heard: BTreeMap::new(),
            now: 0,
            timeout,
        }
    }

    pub fn at(mut self, now: Millis) -> Self {
        self.now = now;
        self
    }

    pub fn advance(&mut self, now: Millis) {
        self.now = self.now.max(now);
    }

    pub fn record_heartbeat(&mut self, peer: NodeId, at: Millis) -> Result<(), MembershipError> {
        if peer == self.observer {
            return Err(MembershipError::SelfHeartbeat);
        }
        let slot = self.last_heard.entry(peer).or_insert(at);
        *slot = (*slot).max(at);
        Ok(())
    }

    pub fn is_live(&self, peer: NodeId) -> bool {
        peer == self.observer
            || self
                .last_heard
                .get(&peer)
                .is_some_and(|t| self.now.saturating_sub(*t) <= self.timeout)
    }

    /// Live nodes in id order, observer included.
    pub fn live_nodes(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .last_heard
            .keys()
            .copied()
            .filter(|p| self.is_live(*p))
            .collect();
        out.push(self.observer);
        out.sort();
        out
    }

    pub fn degree(&self) -> usize {
        1 + self
            .last_heard
            .keys()
            .filter(|p| self.is_live(**p))
            .count()
    }

    pub fn forget(&mut self, peer: NodeId) {
        self.last_heard.remove(&peer);
    }
}

pub fn is_eligible(view: &ConnectivityView, node_count: usize) -> bool {
    degree_is_eligible(view.degree(), node_count)
}

pub fn degree_is_eligible(degree: usize, node_count: usize) -> bool {
    degree >= quorum(node_count)
}

/// Keeps the current leader whenever it is eligible; otherwise picks the
/// lowest-numbered eligible candidate.
pub fn select_leader(
    candidates: &[(NodeId, usize)],
    current_leader: Option<NodeId>,
    node_count: usize,
) -> Option<NodeId> {
    let eligible = || {
        candidates
            .iter()
            .filter(|(_, d)| degree_is_eligible(*d, node_count))
            .map(|(id, _)| *id)
    };
    match current_leader {
        Some(cur) if eligible().any(|id| id == cur) => Some(cur),
        _ => eligible().min(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Master,
    Worker,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleState {
    pub node: NodeId,
    pub role: Role,
    pub term: Term,
    pub known_master: Option<NodeId>,
    /// The claim this node backed, at most one per term.
    pub voted_for: Option<(Term, NodeId)>,
    /// Highest term seen in any claim or vote; a node backs only claims above it.
    pub highest_seen: Term,
}

impl RoleState {
    pub fn worker(node: NodeId, term: Term, known_master: Option<NodeId>) -> Self {
        Self {
            node,
            role: Role::Worker,
            term,
            known_master,
            voted_for: None,
            highest_seen: term,
        }
    }

    pub fn master(node: NodeId, term: Term) -> Self {
        Self {
            role: Role::Master,
            known_master: Some(node),
            ..Self::worker(node, term, None)
        }
    }

    pub fn is_master(&self) -> bool {
        self.role == Role::Master
    }

    fn demote(&mut self, term: Term, leader: Option<NodeId>) {
        if term > self.term {
            self.term = term;
        }
        self.role = Role::Worker;
        self.known_master = leader;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleEvent {
    /// The known master (or any master) has been silent past the timeout.
    HeartbeatTimeoutOnMaster,
    LeaderClaimReceived {
        term: Term,
        from: NodeId,
        degree: usize,
    },
    /// Enough acks for the claim in `term`.
    LeaderAckQuorum { term: Term },
    /// A message stamped with `term`; `leader` is set when it came from that
    /// term's master.
    HigherTermObserved { term: Term, leader: Option<NodeId> },
    ConnectivityCheckDue,
    /// The claim for `term` gathered no quorum in time.
    ClaimExpired { term: Term },
}

impl RoleEvent {
    fn term(&self) -> Option<Term> {
        match self {
            RoleEvent::LeaderClaimReceived { term, .. }
            | RoleEvent::LeaderAckQuorum { term }
            | RoleEvent::HigherTermObserved { term, .. }
            | RoleEvent::ClaimExpired { term } => Some(*term),
            RoleEvent::HeartbeatTimeoutOnMaster | RoleEvent::ConnectivityCheckDue => None,
        }
    }
}

/// What the node knows at the moment an event is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleInputs {
    pub node_count: usize,
    pub self_degree: usize,
    /// The master this node would rather keep, with its advertised degree,
    /// if that master is currently live.
    pub incumbent: Option<(NodeId, usize)>,
    /// False while a freshly restarted node has not yet relearned the terms
    /// in use.
    pub may_vote: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleAction {
    BroadcastClaim { term: Term, degree: usize },
    SendAck { to: NodeId, term: Term },
    BroadcastAnnounce { term: Term },
    BroadcastAbdicate { term: Term },
}

/// Pure role transition. Events stamped below the current term are rejected
/// with [`MembershipError::StaleEvent`] and change nothing.
pub fn step_role(
    state: &RoleState,
    event: &RoleEvent,
    inputs: &RoleInputs,
) -> Result<(RoleState, Vec<RoleAction>), MembershipError> {
    if let Some(t) = event.term() {
        if t < state.term {
            return Err(MembershipError::StaleEvent {
                event: t,
                current: state.term,
            });
        }
    }
    let mut next = state.clone();
    let mut actions = Vec::new();
    let self_eligible = degree_is_eligible(inputs.self_degree, inputs.node_count);
    match *event {
        RoleEvent::HeartbeatTimeoutOnMaster => {
            if state.role == Role::Worker {
                if self_eligible {
                    let term = state.term.max(state.highest_seen).next();
                    next.role = Role::Candidate;
                    next.term = term;
                    next.highest_seen = term;
                    next.known_master = None;
                    next.voted_for = Some((term, state.node));
                    actions.push(RoleAction::BroadcastClaim {
                        term,
                        degree: inputs.self_degree,
                    });
                } else {
                    next.known_master = None;
                }
            }
        }
        RoleEvent::LeaderClaimReceived { term, from, degree } => {
            if from == state.node {
                return Ok((next, actions));
            }
            if state.voted_for == Some((term, from)) {
                actions.push(RoleAction::SendAck { to: from, term });
                return Ok((next, actions));
            }
            let mut candidates = vec![(from, degree)];
            if let Some((inc, inc_degree)) = inputs.incumbent {
                if inc != from {
                    candidates.push((inc, inc_degree));
                }
            }
            let preferred = inputs.incumbent.map(|(id, _)| id);
            let grant = inputs.may_vote
                && term > state.highest_seen
                && select_leader(&candidates, preferred, inputs.node_count) == Some(from);
            if term > state.term {
                next.demote(term, None);
                next.voted_for = None;
            }
            if grant {
                next.voted_for = Some((term, from));
                next.highest_seen = term;
                actions.push(RoleAction::SendAck { to: from, term });
            }
        }
        RoleEvent::LeaderAckQuorum { term } => {
            if state.role == Role::Candidate && term == state.term {
                next.role = Role::Master;
                next.known_master = Some(state.node);
                actions.push(RoleAction::BroadcastAnnounce { term });
            }
        }
        RoleEvent::HigherTermObserved { term, leader } => {
            if term > state.term {
                next.demote(term, leader);
                next.voted_for = None;
            } else if let Some(l) = leader {
                // same term: learn who won, unless we are that term's master
                if state.role != Role::Master && l != state.node {
                    next.demote(term, Some(l));
                }
            }
        }
        RoleEvent::ConnectivityCheckDue => {
            if state.role == Role::Master && !self_eligible {
                next.demote(state.term, None);
                actions.push(RoleAction::BroadcastAbdicate { term: state.term });
            }
        }
        RoleEvent::ClaimExpired { term } => {
            if state.role == Role::Candidate && term == state.term {
                next.demote(term, None);
            }
        }
    }
    Ok((next, actions))
}
