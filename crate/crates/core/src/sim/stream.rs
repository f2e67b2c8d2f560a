//! Simulated RFID reads for a guided tour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{RoomId, TagCategory, VisitorEvent};

use super::scenario::{ScenarioError, ScenarioSpec, VisitorPlan};

/// Salt so the stream and the link model draw from unrelated sequences.
const STREAM_SALT: u64 = 0x5749_5349_544f_5253;

/// Reads for the scenario's visitors, timestamped uniformly over the tour
/// and sorted by time. Event ids are `1..=n` in time order.
pub fn generate_stream(spec: &ScenarioSpec) -> Result<Vec<VisitorEvent>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ STREAM_SALT);
    let mut cells: Vec<(TagCategory, RoomId)> = Vec::new();
    match &spec.visitors {
        VisitorPlan::Total(n) => {
            for _ in 0..*n {
                let cat = TagCategory::ALL[rng.gen_range(0..3)];
                cells.push((cat, RoomId(rng.gen_range(0..spec.rooms))));
            }
        }
        VisitorPlan::Matrix(m) => {
            if let Some(k) = m.keys().find(|k| k.room.0 >= spec.rooms) {
                return Err(ScenarioError::Invalid(format!(
                    "{k} names a room beyond the {} declared",
                    spec.rooms
                )));
            }
            for (k, n) in m {
                cells.extend(std::iter::repeat_n((k.category, k.room), *n as usize));
            }
        }
    }
    let mut stamped: Vec<(u64, usize)> = (0..cells.len())
        .map(|i| (rng.gen_range(0..spec.tour), i))
        .collect();
    stamped.sort_unstable();
    Ok(stamped
        .into_iter()
        .enumerate()
        .map(|(n, (ts, i))| VisitorEvent {
            event_id: n as u64 + 1,
            category: cells[i].0,
            room: cells[i].1,
            timestamp: ts,
        })
        .collect())
}

/// Scales a matrix to `target` visitors, rounding by largest remainder so
/// the result sums exactly to `target`.
pub fn scale_plan(plan: &VisitorPlan, target: u64) -> VisitorPlan {
    let VisitorPlan::Matrix(m) = plan else {
        return VisitorPlan::Total(target);
    };
    let sum: u64 = m.values().sum();
    if sum == 0 {
        return VisitorPlan::Total(target);
    }
    let mut scaled: Vec<_> = m
        .iter()
        .map(|(k, v)| {
            let exact = u128::from(*v) * u128::from(target);
            let q = (exact / u128::from(sum)) as u64;
            let rem = exact % u128::from(sum);
            (*k, q, rem)
        })
        .collect();
    let assigned: u64 = scaled.iter().map(|(_, q, _)| q).sum();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|a, b| scaled[*b].2.cmp(&scaled[*a].2).then(a.cmp(b)));
    for i in order.into_iter().take((target - assigned) as usize) {
        scaled[i].1 += 1;
    }
    VisitorPlan::Matrix(scaled.into_iter().map(|(k, q, _)| (k, q)).collect())
}
