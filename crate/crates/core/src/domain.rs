//! Value types shared across the counting pipeline, the membership layer and
//! the simulation harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated or wall-clock milliseconds.
pub type Millis = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("unknown tag category `{0}`")]
    UnknownCategory(String),
    #[error("malformed composite key `{0}`")]
    MalformedKey(String),
}

/// The three RFID wristband kinds handed out at the entrance. Service
/// animals are tagged `Other`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum TagCategory {
    Man,
    Woman,
    Other,
}

impl TagCategory {
    pub const ALL: [TagCategory; 3] = [TagCategory::Man, TagCategory::Woman, TagCategory::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            TagCategory::Man => "Man",
            TagCategory::Woman => "Woman",
            TagCategory::Other => "Other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TagCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Case-insensitive match against `man`, `woman` and `other`.
pub fn parse_category(label: &str) -> Result<TagCategory, DomainError> {
    if label.eq_ignore_ascii_case("man") {
        Ok(TagCategory::Man)
    } else if label.eq_ignore_ascii_case("woman") {
        Ok(TagCategory::Woman)
    } else if label.eq_ignore_ascii_case("other") {
        Ok(TagCategory::Other)
    } else {
        Err(DomainError::UnknownCategory(label.to_string()))
    }
}

impl FromStr for TagCategory {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_category(s)
    }
}

/// Node number, unique within a cluster. Ordering is used for tie-breaks.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Zero-based room index.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RoomId(pub u32);

impl fmt::Display for RoomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "room{}", self.0)
    }
}

/// One RFID read: a tagged visitor seen in a room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VisitorEvent {
    /// Generator-assigned, unique per scenario. Used to suppress re-reads.
    pub event_id: u64,
    pub category: TagCategory,
    pub room: RoomId,
    pub timestamp: Millis,
}

/// `(category, room)` counting key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompositeKey {
    pub category: TagCategory,
    pub room: RoomId,
}

impl CompositeKey {
    pub fn new(category: TagCategory, room: RoomId) -> Self {
        Self { category, room }
    }

    /// Canonical `<Category>-room<index>` form, e.g. `Other-room5`.
    pub fn text(&self) -> String {
        composite_key_text(*self)
    }
}

pub fn composite_key_text(key: CompositeKey) -> String {
    format!("{}-room{}", key.category.as_str(), key.room.0)
}

impl fmt::Display for CompositeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-room{}", self.category.as_str(), self.room.0)
    }
}

impl FromStr for CompositeKey {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || DomainError::MalformedKey(s.to_string());
        let (cat, room) = s.split_once("-room").ok_or_else(malformed)?;
        if room.is_empty() || !room.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        // reject non-canonical spellings like "room007" so the text form stays injective
        if room.len() > 1 && room.starts_with('0') {
            return Err(malformed());
        }
        let category = match cat {
            "Man" => TagCategory::Man,
            "Woman" => TagCategory::Woman,
            "Other" => TagCategory::Other,
            _ => return Err(malformed()),
        };
        let index = room.parse::<u32>().map_err(|_| malformed())?;
        Ok(CompositeKey::new(category, RoomId(index)))
    }
}

impl Serialize for CompositeKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CompositeKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_categories() {
        assert_eq!(parse_category("Man"), Ok(TagCategory::Man));
        assert_eq!(parse_category("other"), Ok(TagCategory::Other));
        assert_eq!(parse_category("WOMAN"), Ok(TagCategory::Woman));
        assert_eq!(
            parse_category("child"),
            Err(DomainError::UnknownCategory("child".into()))
        );
        assert!(parse_category("").is_err());
    }

    #[test]
    fn composite_key_rendering() {
        let k = |c, r| composite_key_text(CompositeKey::new(c, RoomId(r)));
        assert_eq!(k(TagCategory::Woman, 0), "Woman-room0");
        assert_eq!(k(TagCategory::Other, 5), "Other-room5");
        assert_eq!(k(TagCategory::Man, 3), "Man-room3");
    }

    #[test]
    fn composite_key_rejects_garbage() {
        for bad in ["Man", "Man-room", "man-room1", "Man-room01", "Man-roomx", "Kid-room1"] {
            assert!(bad.parse::<CompositeKey>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn composite_key_round_trips(cat in 0usize..3, room in any::<u32>()) {
            let key = CompositeKey::new(TagCategory::ALL[cat], RoomId(room));
            let parsed: CompositeKey = key.text().parse().unwrap();
            prop_assert_eq!(parsed, key);
        }
    }
}
