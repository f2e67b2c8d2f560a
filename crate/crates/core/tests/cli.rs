mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::scenario_path;

fn crowdmr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdmr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn run_prints_totals_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("table1.scn");
    let o = crowdmr(&["run", scn.to_str().unwrap(), "--out", "res"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains(">>Sum: { Man : 157, Woman : 169, Other : 174 }"));
    let res = dir.path().join("res");
    assert_eq!(fs::read_to_string(res.join("table1.report.txt")).unwrap(), text);
    assert!(fs::read_to_string(res.join("table1.csv")).unwrap().starts_with("case,key,count\n"));
    assert_eq!(fs::read_to_string(res.join("table1.log")).unwrap().lines().count(), 1);
}

#[test]
fn formats_select_what_goes_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("empty.scn");
    let csv = stdout(&crowdmr(&["run", scn.to_str().unwrap(), "--format", "csv"], dir.path()));
    assert!(csv.starts_with("case,key,count\ncase1,Man,0\n"));
    assert!(csv.contains("case2,Room2,0\n"));
    let both = stdout(&crowdmr(&["run", scn.to_str().unwrap(), "--format", "both"], dir.path()));
    assert!(both.contains(">>Sum: { Man : 0, Woman : 0, Other : 0 }"));
    assert!(both.contains(">>Sum: { Room0 : 0, Room1 : 0, Room2 : 0 }"));
    assert!(both.ends_with(&csv));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("table1.scn");
    let args = ["run", scn.to_str().unwrap(), "--seed", "7", "--format", "both"];
    let a = crowdmr(&args, dir.path());
    let b = crowdmr(&args, dir.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bad_scenario_exits_2_naming_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("bad.scn");
    fs::write(&scn, "[cluster]\nnodes = 3\ncycle_period = often\n").unwrap();
    let o = crowdmr(&["run", scn.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3: field `cycle_period`"), "{}", stderr(&o));
}

#[test]
fn all_nodes_dead_before_first_cycle_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("doom.scn");
    fs::write(
        &scn,
        "[scenario]\nid = doom\n[cluster]\nnodes = 2\ncycle_period = 60s\n[visitors]\ntotal = 10\n\
         [faults]\nat=5s crash=0\nat=6s crash=1\n",
    )
    .unwrap();
    let o = crowdmr(&["run", scn.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("all nodes dead at 6000 ms"));
}

#[test]
fn report_renders_from_the_storage_log() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("failover.scn");
    let run = crowdmr(&["run", scn.to_str().unwrap(), "--format", "csv"], dir.path());
    let rep = crowdmr(&["report", scn.to_str().unwrap(), "--format", "csv"], dir.path());
    assert_eq!(rep.status.code(), Some(0));
    assert_eq!(run.stdout, rep.stdout);
    let missing = crowdmr(&["report", scenario_path("partition.scn").to_str().unwrap()], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("partition.scn");
    crowdmr(&["run", scn.to_str().unwrap()], dir.path());
    let ok = crowdmr(&["replay", scn.to_str().unwrap()], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("storage log: identical"));
    let csv = dir.path().join("out/partition.csv");
    let edited = fs::read_to_string(&csv).unwrap().replace("case1,Man,", "case1,Man,1");
    fs::write(&csv, edited).unwrap();
    let bad = crowdmr(&["replay", scn.to_str().unwrap()], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("csv: differs from line 2"));
}

#[test]
fn bench_prints_one_row_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenario_path("table1.scn");
    let o = crowdmr(&["bench", scn.to_str().unwrap(), "--visitors", "50,500"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "visitors,cycle_completion_ms,messages_sent,data_messages,oracle_match");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("50,") && lines[1].ends_with(",true"));
    assert!(lines[2].starts_with("500,"));
    let single = crowdmr(&["bench", scn.to_str().unwrap(), "--visitors", "500"], dir.path());
    assert_eq!(stdout(&single).lines().count(), 2);
    let zero = crowdmr(&["bench", scn.to_str().unwrap(), "--visitors", "0"], dir.path());
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = crowdmr(&["run", "x.scn", "--fast"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("--fast"));
}
