//! Datagram framing between nodes.
//!
//! Every frame is a single UTF-8 line:
//!
//! ```text
//! CMR1 <TYPE> <sender> <term> <seq> <k=v;k=v...>\n
//! ```
//!
//! An empty payload is written as `-`. Inside keys and values the bytes
//! space, tab, CR, LF, `%`, `;` and `=` are percent-escaped (`%20`, `%3B`,
//! ...). Frames are capped at [`MAX_FRAME`] bytes so they fit one datagram;
//! larger key/value sets are split with [`chunk_payloads`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::NodeId;
use crate::membership::Term;

pub const MAGIC: &str = "CMR1";
/// Single-datagram budget in bytes, newline included.
pub const MAX_FRAME: usize = 1200;
/// Per-sender duplicate suppression window.
pub const DEDUP_WINDOW: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic, expected {MAGIC}")]
    BadMagic,
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("malformed field `{0}`")]
    MalformedField(&'static str),
    #[error("encoded frame is {0} bytes, budget is {MAX_FRAME}")]
    OversizeMessage(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgType {
    Hello,
    Hb,
    HbAck,
    LeaderClaim,
    LeaderAck,
    LeaderAnnounce,
    Abdicate,
    Task,
    MapOut,
    RedOut,
    CycleDone,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Hello,
        MsgType::Hb,
        MsgType::HbAck,
        MsgType::LeaderClaim,
        MsgType::LeaderAck,
        MsgType::LeaderAnnounce,
        MsgType::Abdicate,
        MsgType::Task,
        MsgType::MapOut,
        MsgType::RedOut,
        MsgType::CycleDone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::Hb => "HB",
            MsgType::HbAck => "HB_ACK",
            MsgType::LeaderClaim => "LEADER_CLAIM",
            MsgType::LeaderAck => "LEADER_ACK",
            MsgType::LeaderAnnounce => "LEADER_ANNOUNCE",
            MsgType::Abdicate => "ABDICATE",
            MsgType::Task => "TASK",
            MsgType::MapOut => "MAP_OUT",
            MsgType::RedOut => "RED_OUT",
            MsgType::CycleDone => "CYCLE_DONE",
        }
    }

    /// Messages that move counting data rather than membership chatter.
    pub fn is_data(self) -> bool {
        matches!(
            self,
            MsgType::Task | MsgType::MapOut | MsgType::RedOut | MsgType::CycleDone
        )
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::UnknownType(s.to_string()))
    }
}

/// Ordered key/value pairs. Keys may repeat.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Payload(pub Vec<(String, String)>);

impl Payload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MsgType,
    pub sender: NodeId,
    pub term: Term,
    pub seq: u64,
    pub payload: Payload,
}

impl Message {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode(self)
    }
}

fn needs_escape(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n' | b'%' | b';' | b'=')
}

fn escape_into(out: &mut String, s: &str) {
    for ch in s.chars() {
        if ch.is_ascii() && needs_escape(ch as u8) {
            out.push_str(&format!("%{:02X}", ch as u8));
        } else {
            out.push(ch);
        }
    }
}

fn escaped_len(s: &str) -> usize {
    s.bytes().map(|b| if needs_escape(b) { 3 } else { 1 }).sum()
}

fn unescape(s: &str) -> Result<String, WireError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = bytes
                .get(i + 1..i + 3)
                .and_then(|h| std::str::from_utf8(h).ok())
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or(WireError::MalformedField("payload"))?;
            out.push(hex);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| WireError::MalformedField("payload"))
}

fn render_payload(payload: &Payload) -> String {
    if payload.is_empty() {
        return "-".to_string();
    }
    let mut out = String::new();
    for (i, (k, v)) in payload.0.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        escape_into(&mut out, k);
        out.push('=');
        escape_into(&mut out, v);
    }
    out
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let line = format!(
        "{MAGIC} {} {} {} {} {}\n",
        msg.kind,
        msg.sender.0,
        msg.term.0,
        msg.seq,
        render_payload(&msg.payload)
    );
    if line.len() > MAX_FRAME {
        return Err(WireError::OversizeMessage(line.len()));
    }
    Ok(line.into_bytes())
}

fn parse_num<T: FromStr>(s: &str, field: &'static str) -> Result<T, WireError> {
    // u64::from_str accepts a leading '+'; the grammar does not
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(WireError::MalformedField(field));
    }
    s.parse().map_err(|_| WireError::MalformedField(field))
}

pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(frame).map_err(|_| WireError::MalformedField("frame"))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let mut parts = text.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(WireError::BadMagic);
    }
    let kind: MsgType = parts
        .next()
        .ok_or(WireError::MalformedField("type"))?
        .parse()?;
    let sender = NodeId(parse_num(parts.next().unwrap_or(""), "sender")?);
    let term = Term(parse_num(parts.next().unwrap_or(""), "term")?);
    let seq = parse_num(parts.next().unwrap_or(""), "seq")?;
    let raw = parts.next().ok_or(WireError::MalformedField("payload"))?;
    if parts.next().is_some() {
        return Err(WireError::MalformedField("frame"));
    }
    let mut payload = Payload::new();
    if raw != "-" {
        for pair in raw.split(';') {
            let (k, v) = pair
                .split_once('=')
                .ok_or(WireError::MalformedField("payload"))?;
            payload.0.push((unescape(k)?, unescape(v)?));
        }
    }
    Ok(Message {
        kind,
        sender,
        term,
        seq,
        payload,
    })
}

/// Worst-case header bytes for a frame of `kind`: magic, type, three
/// maximal numbers, separators and the trailing newline.
fn header_budget(kind: MsgType) -> usize {
    MAGIC.len() + 1 + kind.as_str().len() + 1 + 10 + 1 + 20 + 1 + 20 + 1 + 1
}

/// Splits `entries` over as many payloads as needed so each frame of `kind`
/// stays within [`MAX_FRAME`]. Every payload starts with `fixed`, followed by
/// `chunk=<i>;chunks=<n>`, then its share of entries. An empty entry list
/// still yields one payload.
pub fn chunk_payloads(
    kind: MsgType,
    fixed: &[(String, String)],
    entries: &[(String, String)],
) -> Result<Vec<Payload>, WireError> {
    let digits = entries.len().max(1).to_string().len();
    let fixed_len: usize = fixed
        .iter()
        .map(|(k, v)| escaped_len(k) + 1 + escaped_len(v) + 1)
        .sum::<usize>()
        + "chunk=".len()
        + digits
        + ";chunks=".len()
        + digits;
    let budget = MAX_FRAME.saturating_sub(header_budget(kind) + fixed_len);
    let mut groups: Vec<Vec<(String, String)>> = vec![Vec::new()];
    let mut used = 0;
    for (k, v) in entries {
        let len = 1 + escaped_len(k) + 1 + escaped_len(v);
        if len > budget {
            return Err(WireError::OversizeMessage(header_budget(kind) + fixed_len + len));
        }
        if used + len > budget {
            groups.push(Vec::new());
            used = 0;
        }
        used += len;
        groups.last_mut().expect("non-empty").push((k.clone(), v.clone()));
    }
    let n = groups.len();
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, group)| {
            let mut p = Payload(fixed.to_vec());
            p.push("chunk", i);
            p.push("chunks", n);
            p.0.extend(group);
            p
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
struct SenderWindow {
    high: u64,
    seen: BTreeSet<u64>,
}

/// Tracks `(sender, seq)` pairs seen recently. For each sender it keeps the
/// highest sequence number and the set of numbers seen in the
/// `DEDUP_WINDOW` below it. Anything older than the window is reported as a
/// duplicate, since it can no longer be told apart from one.
#[derive(Debug, Clone, Default)]
pub struct DedupWindow {
    senders: HashMap<NodeId, SenderWindow>,
}

impl DedupWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` the first time `(sender, seq)` is seen.
    pub fn check_duplicate(&mut self, sender: NodeId, seq: u64) -> bool {
        let Some(w) = self.senders.get_mut(&sender) else {
            self.senders.insert(
                sender,
                SenderWindow {
                    high: seq,
                    seen: BTreeSet::from([seq]),
                },
            );
            return true;
        };
        if seq > w.high {
            w.high = seq;
            w.seen.insert(seq);
            let floor = seq.saturating_sub(DEDUP_WINDOW - 1);
            w.seen = w.seen.split_off(&floor);
            true
        } else if w.high - seq >= DEDUP_WINDOW {
            false
        } else {
            w.seen.insert(seq)
        }
    }

    /// Forgets a sender, e.g. after it was declared crashed.
    pub fn forget(&mut self, sender: NodeId) {
        self.senders.remove(&sender);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MsgType, sender: u32, term: u64, seq: u64, payload: Payload) -> Message {
        Message {
            kind,
            sender: NodeId(sender),
            term: Term(term),
            seq,
            payload,
        }
    }

    #[test]
    fn heartbeat_frame() {
        let m = msg(MsgType::Hb, 2, 1, 7, Payload::new());
        assert_eq!(encode(&m).unwrap(), b"CMR1 HB 2 1 7 -\n");
        assert_eq!(decode(b"CMR1 HB 2 1 7 -\n").unwrap(), m);
    }

    #[test]
    fn map_out_frame() {
        let m = msg(
            MsgType::MapOut,
            3,
            1,
            12,
            Payload::new().with("Man-room3", 30),
        );
        assert_eq!(encode(&m).unwrap(), b"CMR1 MAP_OUT 3 1 12 Man-room3=30\n");
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode(b"XXX1 HB 2 1 7 -\n"), Err(WireError::BadMagic));
        assert_eq!(
            decode(b"CMR1 HB 2 1 notanum -\n"),
            Err(WireError::MalformedField("seq"))
        );
        assert_eq!(
            decode(b"CMR1 PING 2 1 7 -\n"),
            Err(WireError::UnknownType("PING".into()))
        );
        assert_eq!(
            decode(b"CMR1 HB x 1 7 -\n"),
            Err(WireError::MalformedField("sender"))
        );
        assert_eq!(
            decode(b"CMR1 HB 2 -1 7 -\n"),
            Err(WireError::MalformedField("term"))
        );
        assert_eq!(
            decode(b"CMR1 HB 2 1 7 a=b extra\n"),
            Err(WireError::MalformedField("frame"))
        );
        assert_eq!(
            decode(b"CMR1 HB 2 1 7 nokey\n"),
            Err(WireError::MalformedField("payload"))
        );
        assert_eq!(
            decode(b"CMR1 HB 2 1 7 a=%G1\n"),
            Err(WireError::MalformedField("payload"))
        );
        assert_eq!(decode(b""), Err(WireError::BadMagic));
        assert_eq!(
            decode(b"CMR1 HB 2 1 7\n"),
            Err(WireError::MalformedField("payload"))
        );
    }

    #[test]
    fn escapes_separators() {
        let m = msg(
            MsgType::Task,
            0,
            0,
            1,
            Payload::new().with("a b", "x;y=z%\n"),
        );
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes, b"CMR1 TASK 0 0 1 a%20b=x%3By%3Dz%25%0A\n");
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn oversize_rejected() {
        let m = msg(
            MsgType::Task,
            0,
            0,
            1,
            Payload::new().with("k", "v".repeat(1200)),
        );
        assert!(matches!(encode(&m), Err(WireError::OversizeMessage(_))));
    }

    #[test]
    fn chunking_respects_budget() {
        let entries: Vec<_> = (0..200)
            .map(|i| (format!("Other-room{i}"), "123456789".to_string()))
            .collect();
        let fixed = vec![("cycle".to_string(), "4".to_string())];
        let chunks = chunk_payloads(MsgType::RedOut, &fixed, &entries).unwrap();
        assert!(chunks.len() > 1);
        let mut back = Vec::new();
        for (i, p) in chunks.iter().enumerate() {
            let m = msg(MsgType::RedOut, u32::MAX, u64::MAX, u64::MAX, p.clone());
            assert!(encode(&m).unwrap().len() <= MAX_FRAME);
            assert_eq!(p.get("chunk"), Some(i.to_string().as_str()));
            assert_eq!(p.get_parsed::<usize>("chunks"), Some(chunks.len()));
            back.extend(p.0[3..].iter().cloned());
        }
        assert_eq!(back, entries);

        let empty = chunk_payloads(MsgType::RedOut, &fixed, &[]).unwrap();
        assert_eq!(empty.len(), 1);
    }

    #[test]
    fn dedup_examples() {
        let mut w = DedupWindow::new();
        assert!(w.check_duplicate(NodeId(2), 7));
        assert!(!w.check_duplicate(NodeId(2), 7));
        assert!(w.check_duplicate(NodeId(2), 9));
        assert!(w.check_duplicate(NodeId(2), 8));
        assert!(!w.check_duplicate(NodeId(2), 8));
        assert!(w.check_duplicate(NodeId(3), 7));
    }

    #[test]
    fn dedup_window_is_bounded() {
        let mut w = DedupWindow::new();
        for s in 0..5000 {
            assert!(w.check_duplicate(NodeId(1), s));
        }
        assert!(w.senders[&NodeId(1)].seen.len() <= DEDUP_WINDOW as usize);
        // far behind the window: indistinguishable from a replay
        assert!(!w.check_duplicate(NodeId(1), 10));
        // a restarted sender jumps ahead and is accepted
        assert!(w.check_duplicate(NodeId(1), 1 << 40));
    }
}
