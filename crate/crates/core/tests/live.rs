mod common;

use common::short_cluster;
use crowdmr::domain::NodeId;
use crowdmr::live::run_live;
use crowdmr::mapreduce::sequential_oracle;
use crowdmr::report::merge_reports;
use crowdmr::sim::{FaultEvent, FaultKind, ScenarioSpec, VisitorPlan};
use crowdmr::storage::{MemorySink, ReportSink};

fn fast(id: &str, nodes: u32, visitors: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(id, nodes, VisitorPlan::Total(visitors));
    spec.cluster = short_cluster(nodes, 1_500);
    spec.cluster.heartbeat_period = 50;
    spec.cluster.heartbeat_timeout = 400;
    spec.tour = 1_500;
    spec.duration = 2_500;
    spec
}

#[test]
fn udp_cluster_counts_like_the_oracle() {
    let spec = fast("live", 3, 150);
    let out = run_live(&spec, MemorySink::new(), true).unwrap();
    assert_eq!(out.reports.len(), 1, "{:?}", out.reports);
    let (c1, c2) = sequential_oracle(&out.events).unwrap();
    assert_eq!(merge_reports(&out.reports), (c1, c2));
}

#[test]
fn udp_cluster_replaces_a_crashed_master() {
    let mut spec = fast("live-failover", 4, 0);
    spec.faults.push(FaultEvent { at: 300, kind: FaultKind::Crash(NodeId(0)) });
    spec.duration = 2_000;
    let out = run_live(&spec, MemorySink::new(), true).unwrap();
    assert!(
        out.leadership.iter().any(|(_, n, _)| *n != NodeId(0)),
        "{:?}",
        out.leadership
    );
}

#[test]
fn reports_reach_the_shared_store() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fast("live-store", 2, 40);
    let out = run_live(&spec, crowdmr::storage::FileSink::new(dir.path()).unwrap(), true).unwrap();
    let stored = crowdmr::storage::FileSink::new(dir.path())
        .unwrap()
        .export("live-store")
        .unwrap();
    assert_eq!(stored.len(), out.reports.len());
}
