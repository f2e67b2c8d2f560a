//! Scenario descriptions and their text format.
//!
//! ```text
//! # comments start with '#'
//! [scenario]
//! id = table1
//! seed = 42
//! duration = 330s
//!
//! [cluster]
//! nodes = 6
//! initial_master = 0
//! heartbeat_period = 1s
//! heartbeat_timeout = 5s
//! check_period = 60s
//! cycle_period = 5m
//! reducers = 3
//! endpoint.0 = 127.0.0.1:7400     # optional, used by live mode
//!
//! [visitors]
//! rooms = 6
//! tour = 5m                       # reads are spread over [0, tour)
//! total = 500                     # and/or one line per matrix cell:
//! Man.room0 = 27
//!
//! [link]
//! base_delay = 5ms
//! jitter = 10ms
//! drop = 0.0
//! duplicate = 0.0
//!
//! [faults]
//! at=30s crash=0
//! at=45s recover=0
//! at=60s partition=0,1|2,3,4,5
//! at=90s heal
//! at=100s drop=all:0.3
//! at=120s drop=1-2:0.5
//!
//! [reference]
//! Man = 157
//! Room4 = 92
//! ```
//!
//! Durations take `ms`, `s` or `m` suffixes; a bare number is milliseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::Path;

use thiserror::Error;

use crate::domain::{CompositeKey, Millis, NodeId};
use crate::membership::ClusterConfig;
use crate::report::ReferenceValue;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: field `{field}`: {reason}")]
    Field {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("visitor matrix totals {matrix} but visitors = {declared}")]
    MatrixMismatch { matrix: u64, declared: u64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisitorPlan {
    /// Category and room drawn uniformly per visitor.
    Total(u64),
    /// Exact count per (category, room).
    Matrix(BTreeMap<CompositeKey, u64>),
}

impl VisitorPlan {
    pub fn total(&self) -> u64 {
        match self {
            VisitorPlan::Total(n) => *n,
            VisitorPlan::Matrix(m) => m.values().sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub base_delay: Millis,
    pub jitter: Millis,
    pub drop_probability: f64,
    pub duplicate_probability: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            base_delay: 5,
            jitter: 5,
            drop_probability: 0.0,
            duplicate_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    Crash(NodeId),
    Recover(NodeId),
    /// Nodes in different groups cannot reach each other; nodes missing from
    /// every group form one more group.
    Partition(Vec<BTreeSet<NodeId>>),
    Heal,
    /// `None` sets the rate for every link; otherwise for one undirected link.
    DropRate {
        link: Option<(NodeId, NodeId)>,
        probability: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultEvent {
    pub at: Millis,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub reducers: usize,
    pub rooms: u32,
    pub visitors: VisitorPlan,
    /// Reads are timestamped within `[0, tour)`.
    pub tour: Millis,
    pub duration: Millis,
    pub faults: Vec<FaultEvent>,
    pub link: LinkModel,
    pub reference: Vec<ReferenceValue>,
}

impl ScenarioSpec {
    /// `nodes` nodes scanning `nodes` rooms, default timings, one cycle of
    /// reads plus a little headroom.
    pub fn new(id: impl Into<String>, nodes: u32, visitors: VisitorPlan) -> Self {
        let cluster = ClusterConfig::with_nodes(nodes);
        let cycle = cluster.cycle_period;
        Self {
            id: id.into(),
            seed: 0,
            reducers: 3,
            rooms: nodes,
            visitors,
            tour: cycle,
            duration: cycle + 30_000,
            faults: Vec::new(),
            link: LinkModel::default(),
            reference: Vec::new(),
            cluster,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        self.cluster
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad(format!("scenario id {:?} must be [A-Za-z0-9_-]+", self.id));
        }
        if self.rooms == 0 {
            return bad("at least one room is needed".into());
        }
        if self.reducers == 0 {
            return bad("at least one reducer is needed".into());
        }
        if self.tour == 0 {
            return bad("tour must be positive".into());
        }
        for p in [self.link.drop_probability, self.link.duplicate_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if let VisitorPlan::Matrix(m) = &self.visitors {
            if let Some(k) = m.keys().find(|k| k.room.0 >= self.rooms) {
                return bad(format!("{k} names a room beyond the {} declared", self.rooms));
            }
        }
        for f in &self.faults {
            let known = |n: &NodeId| self.cluster.endpoints.contains_key(n);
            match &f.kind {
                FaultKind::Crash(n) | FaultKind::Recover(n) if !known(n) => {
                    return Err(ScenarioError::UnknownNode(*n))
                }
                FaultKind::Partition(groups) => {
                    if let Some(n) = groups.iter().flatten().find(|n| !known(n)) {
                        return Err(ScenarioError::UnknownNode(*n));
                    }
                }
                FaultKind::DropRate { link, probability } => {
                    if !(0.0..=1.0).contains(probability) {
                        return bad(format!("probability {probability} outside [0, 1]"));
                    }
                    if let Some((a, b)) = link {
                        for n in [a, b] {
                            if !known(n) {
                                return Err(ScenarioError::UnknownNode(*n));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        parse_scenario(&std::fs::read_to_string(path)?)
    }
}

/// Parses `30s`, `5m`, `250ms` or `250`.
pub fn parse_duration(text: &str) -> Option<Millis> {
    let t = text.trim();
    let (num, scale) = if let Some(n) = t.strip_suffix("ms") {
        (n, 1)
    } else if let Some(n) = t.strip_suffix('s') {
        (n, 1_000)
    } else if let Some(n) = t.strip_suffix('m') {
        (n, 60_000)
    } else {
        (t, 1)
    };
    num.trim().parse::<u64>().ok()?.checked_mul(scale)
}

struct Cursor {
    line: usize,
}

impl Cursor {
    fn field<T>(&self, field: &str, reason: impl Into<String>) -> Result<T, ScenarioError> {
        Err(ScenarioError::Field {
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        })
    }

    fn num<T: std::str::FromStr>(&self, field: &str, v: &str) -> Result<T, ScenarioError> {
        v.parse()
            .or_else(|_| self.field(field, format!("`{v}` is not a valid number")))
    }

    fn duration(&self, field: &str, v: &str) -> Result<Millis, ScenarioError> {
        parse_duration(v).map_or_else(|| self.field(field, format!("`{v}` is not a duration")), Ok)
    }

    fn prob(&self, field: &str, v: &str) -> Result<f64, ScenarioError> {
        let p: f64 = self.num(field, v)?;
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            self.field(field, format!("{p} is outside [0, 1]"))
        }
    }

    fn node(&self, field: &str, v: &str) -> Result<NodeId, ScenarioError> {
        Ok(NodeId(self.num(field, v.trim())?))
    }
}

fn parse_fault(c: &Cursor, text: &str) -> Result<FaultEvent, ScenarioError> {
    let mut at = None;
    let mut kind = None;
    for token in text.split_whitespace() {
        let (k, v) = token.split_once('=').unwrap_or((token, ""));
        let k = k.trim();
        let parsed = match k {
            "at" => {
                at = Some(c.duration("at", v)?);
                continue;
            }
            "crash" => FaultKind::Crash(c.node(k, v)?),
            "recover" => FaultKind::Recover(c.node(k, v)?),
            "heal" => FaultKind::Heal,
            "partition" => {
                let mut groups = Vec::new();
                for side in v.split('|') {
                    let group = side
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|n| c.node(k, n))
                        .collect::<Result<BTreeSet<_>, _>>()?;
                    if group.is_empty() {
                        return c.field(k, "empty partition side");
                    }
                    groups.push(group);
                }
                if groups.len() < 2 {
                    return c.field(k, "expected `a,b|c,d`");
                }
                FaultKind::Partition(groups)
            }
            "drop" => {
                let Some((target, p)) = v.split_once(':') else {
                    return c.field(k, "expected `all:<p>` or `<a>-<b>:<p>`");
                };
                let link = if target == "all" {
                    None
                } else {
                    let Some((a, b)) = target.split_once('-') else {
                        return c.field(k, format!("`{target}` is neither `all` nor `a-b`"));
                    };
                    Some((c.node(k, a)?, c.node(k, b)?))
                };
                FaultKind::DropRate {
                    link,
                    probability: c.prob(k, p)?,
                }
            }
            other => return c.field(other, "unknown fault"),
        };
        if kind.replace(parsed).is_some() {
            return c.field(k, "one fault per line");
        }
    }
    match (at, kind) {
        (Some(at), Some(kind)) => Ok(FaultEvent { at, kind }),
        (None, _) => c.field("at", "missing"),
        (_, None) => Err(ScenarioError::Syntax {
            line: c.line,
            reason: "fault line names no fault".into(),
        }),
    }
}

/// Parses the scenario text format described in the module docs.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let mut spec = ScenarioSpec::new("scenario", 1, VisitorPlan::Total(0));
    let mut nodes: Option<u32> = None;
    let mut endpoints: BTreeMap<NodeId, SocketAddr> = BTreeMap::new();
    let mut total: Option<u64> = None;
    let mut matrix: BTreeMap<CompositeKey, u64> = BTreeMap::new();
    let mut rooms: Option<u32> = None;
    let mut tour: Option<Millis> = None;
    let mut duration: Option<Millis> = None;
    let mut section = String::new();

    for (idx, raw) in text.lines().enumerate() {
        let c = Cursor { line: idx + 1 };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(ScenarioError::Syntax {
                    line: c.line,
                    reason: format!("unterminated section header `{line}`"),
                });
            };
            section = name.trim().to_string();
            if !["scenario", "cluster", "visitors", "link", "faults", "reference"]
                .contains(&section.as_str())
            {
                return Err(ScenarioError::Syntax {
                    line: c.line,
                    reason: format!("unknown section [{section}]"),
                });
            }
            continue;
        }
        if section == "faults" {
            spec.faults.push(parse_fault(&c, line)?);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ScenarioError::Syntax {
                line: c.line,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (key, v) = (key.trim(), value.trim());
        match (section.as_str(), key) {
            ("", _) => {
                return Err(ScenarioError::Syntax {
                    line: c.line,
                    reason: "setting outside any section".into(),
                })
            }
            ("scenario", "id") => spec.id = v.to_string(),
            ("scenario", "seed") => spec.seed = c.num(key, v)?,
            ("scenario", "duration") => duration = Some(c.duration(key, v)?),
            ("cluster", "nodes") => {
                let n: u32 = c.num(key, v)?;
                if n == 0 {
                    return c.field(key, "at least one node");
                }
                nodes = Some(n);
            }
            ("cluster", "initial_master") => spec.cluster.initial_master = c.node(key, v)?,
            ("cluster", "heartbeat_period") => spec.cluster.heartbeat_period = c.duration(key, v)?,
            ("cluster", "heartbeat_timeout") => {
                spec.cluster.heartbeat_timeout = c.duration(key, v)?
            }
            ("cluster", "check_period") => spec.cluster.check_period = c.duration(key, v)?,
            ("cluster", "cycle_period") => spec.cluster.cycle_period = c.duration(key, v)?,
            ("cluster", "reducers") => spec.reducers = c.num(key, v)?,
            ("cluster", k) if k.starts_with("endpoint.") => {
                let id = c.node(k, &k["endpoint.".len()..])?;
                let addr = v
                    .parse()
                    .or_else(|_| c.field(k, format!("`{v}` is not host:port")))?;
                endpoints.insert(id, addr);
            }
            ("visitors", "rooms") => rooms = Some(c.num(key, v)?),
            ("visitors", "tour") => tour = Some(c.duration(key, v)?),
            ("visitors", "total") => total = Some(c.num(key, v)?),
            ("visitors", k) => {
                let ck: CompositeKey = k
                    .replacen('.', "-", 1)
                    .parse()
                    .or_else(|_| c.field(k, "expected `<Category>.room<i>`"))?;
                let n: u64 = c.num(k, v)?;
                if matrix.insert(ck, n).is_some() {
                    return c.field(k, "given twice");
                }
            }
            ("link", "base_delay") => spec.link.base_delay = c.duration(key, v)?,
            ("link", "jitter") => spec.link.jitter = c.duration(key, v)?,
            ("link", "drop") => spec.link.drop_probability = c.prob(key, v)?,
            ("link", "duplicate") => spec.link.duplicate_probability = c.prob(key, v)?,
            ("reference", k) => spec.reference.push(ReferenceValue {
                key: k.to_string(),
                value: c.num(k, v)?,
            }),
            (s, k) => return c.field(k, format!("unknown key in [{s}]")),
        }
    }

    let template = ClusterConfig::with_nodes(nodes.unwrap_or(1));
    let mut cluster = spec.cluster.clone();
    cluster.endpoints = template.endpoints;
    for (id, addr) in endpoints {
        if !cluster.endpoints.contains_key(&id) {
            return Err(ScenarioError::UnknownNode(id));
        }
        cluster.endpoints.insert(id, addr);
    }
    spec.cluster = cluster;
    spec.rooms = rooms.unwrap_or(nodes.unwrap_or(1));
    spec.tour = tour.unwrap_or(spec.cluster.cycle_period);
    spec.duration = duration.unwrap_or(spec.tour + 30_000);
    spec.visitors = if matrix.is_empty() {
        VisitorPlan::Total(total.unwrap_or(0))
    } else {
        let sum: u64 = matrix.values().sum();
        if let Some(t) = total {
            if t != sum {
                return Err(ScenarioError::MatrixMismatch {
                    matrix: sum,
                    declared: t,
                });
            }
        }
        VisitorPlan::Matrix(matrix)
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RoomId, TagCategory};

    const SAMPLE: &str = "\
[scenario]
id = demo
seed = 9
duration = 40s
[cluster]
nodes = 3
heartbeat_timeout = 3s
cycle_period = 30s
reducers = 2
[visitors]
rooms = 2
total = 5
Man.room0 = 2   # trailing comment
Other.room1 = 3
[link]
jitter = 20ms
duplicate = 0.5
[faults]
at=10s crash=0
at=12s partition=0,1|2
at=15s heal
at=16s drop=all:0.3
at=17s drop=1-2:1
at=20s recover=0
[reference]
Man = 2
Room1 = 3
";

    #[test]
    fn parses_every_section() {
        let s = parse_scenario(SAMPLE).unwrap();
        assert_eq!(s.id, "demo");
        assert_eq!(s.seed, 9);
        assert_eq!(s.duration, 40_000);
        assert_eq!(s.cluster.node_count(), 3);
        assert_eq!(s.cluster.heartbeat_timeout, 3_000);
        assert_eq!(s.tour, 30_000);
        assert_eq!(s.reducers, 2);
        assert_eq!(s.rooms, 2);
        assert_eq!(s.visitors.total(), 5);
        let VisitorPlan::Matrix(m) = &s.visitors else { panic!() };
        assert_eq!(m[&CompositeKey::new(TagCategory::Other, RoomId(1))], 3);
        assert_eq!(s.link.jitter, 20);
        assert_eq!(s.link.duplicate_probability, 0.5);
        assert_eq!(s.faults.len(), 6);
        assert_eq!(s.faults[0], FaultEvent { at: 10_000, kind: FaultKind::Crash(NodeId(0)) });
        assert_eq!(
            s.faults[1].kind,
            FaultKind::Partition(vec![
                BTreeSet::from([NodeId(0), NodeId(1)]),
                BTreeSet::from([NodeId(2)])
            ])
        );
        assert_eq!(
            s.faults[4].kind,
            FaultKind::DropRate { link: Some((NodeId(1), NodeId(2))), probability: 1.0 }
        );
        assert_eq!(s.reference.len(), 2);
    }

    #[test]
    fn errors_name_line_and_field() {
        let err = parse_scenario("[cluster]\nnodes = 3\nheartbeat_period = soon\n").unwrap_err();
        assert_eq!(err.to_string(), "line 3: field `heartbeat_period`: `soon` is not a duration");
        let err = parse_scenario("[visitors]\nChild.room0 = 3\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2: field `Child.room0`"));
        let err = parse_scenario("[bogus]\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Syntax { line: 1, .. }));
        let err = parse_scenario("[link]\ndrop = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"));
        let err = parse_scenario("[faults]\nat=1s explode=3\n").unwrap_err();
        assert!(err.to_string().contains("explode"));
    }

    #[test]
    fn matrix_must_match_total() {
        let err = parse_scenario("[visitors]\ntotal = 4\nMan.room0 = 3\n").unwrap_err();
        assert!(matches!(err, ScenarioError::MatrixMismatch { matrix: 3, declared: 4 }));
    }

    #[test]
    fn faults_must_name_known_nodes() {
        let err = parse_scenario("[cluster]\nnodes = 2\n[faults]\nat=1s crash=5\n").unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownNode(NodeId(5))));
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("250"), Some(250));
        assert_eq!(parse_duration("250ms"), Some(250));
        assert_eq!(parse_duration("3s"), Some(3_000));
        assert_eq!(parse_duration("5m"), Some(300_000));
        assert_eq!(parse_duration("x"), None);
    }
}
