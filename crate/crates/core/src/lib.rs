//! Crowd counting on a small cluster of room computers.
//!
//! Each room computer tallies RFID reads for its rooms (map), a subset of
//! nodes sum the tallies by key (reduce), and a master node closes a task
//! cycle every few minutes by uploading per-category and per-room totals.
//! The master role moves on failure: any node that hears from at least
//! two-thirds of the cluster may claim it, terms fence off stale masters,
//! and an eligible incumbent keeps its role.
//!
//! [`node::Node`] is a pure state machine. [`sim`] drives a cluster of them
//! on a virtual clock with a lossy, partitionable network; [`live`] runs the
//! same nodes over UDP.
//!
//! ```
//! use crowdmr::sim::{run_scenario, ScenarioSpec, VisitorPlan};
//!
//! let mut spec = ScenarioSpec::new("doc", 3, VisitorPlan::Total(90));
//! spec.cluster.cycle_period = 20_000;
//! spec.tour = 20_000;
//! spec.duration = 25_000;
//! let out = run_scenario(&spec).unwrap();
//! assert_eq!(out.reports[0].events_processed, 90);
//! ```

pub mod cli;
pub mod domain;
pub mod live;
pub mod mapreduce;
pub mod membership;
pub mod node;
pub mod report;
pub mod sim;
pub mod storage;
pub mod wire;

pub use domain::{CompositeKey, Millis, NodeId, RoomId, TagCategory, VisitorEvent};
pub use mapreduce::{sequential_oracle, Case1Result, Case2Result};
pub use report::CycleReport;
