//! Command-line front end: `run`, `replay`, `report` and `bench`.
//!
//! Exit codes: 0 success, 1 runtime failure or replay mismatch, 2 unusable
//! scenario file or arguments, 3 every node died before the first cycle
//! committed.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::mapreduce::sequential_oracle;
use crate::report::{render_csv, render_text, CycleReport};
use crate::sim::{run_scenario_with, scale_plan, ScenarioSpec, SimOutcome, StopReason};
use crate::storage::{FileSink, ReportSink, StorageError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BAD_SCENARIO: i32 = 2;
pub const EXIT_ALL_DEAD: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crowdmr", version, about = "Crowd counting over a fault-tolerant map-reduce cluster")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write its report, CSV and storage log.
    Run(RunArgs),
    /// Re-run a scenario and compare against the artifacts of an earlier run.
    Replay(RunArgs),
    /// Render the report for a scenario from its storage log.
    Report(ReportArgs),
    /// Sweep visitor counts and print message and timing figures as CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Both,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also print wall-clock time on stderr.
    #[arg(long)]
    pub wall: bool,
    /// Run over real UDP sockets in real time instead of simulating.
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub scenario: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub scenario: PathBuf,
    /// Visitor counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50u64, 250, 500, 1000])]
    pub visitors: Vec<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub wall: bool,
}

/// Artifacts of one run, as written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub text: String,
    pub csv: String,
    pub log: String,
    pub exit: i32,
}

pub fn report_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}.report.txt"))
}

pub fn csv_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}.csv"))
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioSpec, String> {
    let mut spec =
        ScenarioSpec::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn leadership_line(out: &SimOutcome) -> String {
    let masters: Vec<String> = out
        .leadership
        .iter()
        .map(|l| format!("{} at {} ms (term {})", l.node, l.at, l.term))
        .collect();
    if masters.is_empty() {
        "no elections".to_string()
    } else {
        format!("elected {}", masters.join(", "))
    }
}

/// The terminal report followed by a short account of the run.
pub fn render_run(spec: &ScenarioSpec, out: &SimOutcome) -> String {
    let mut text = render_text(&spec.id, spec.rooms, &out.reports, &spec.reference);
    let stop = match out.stop {
        StopReason::DurationReached => format!("ran {} ms", out.end),
        StopReason::AllNodesDead { at } => format!("all nodes dead at {at} ms"),
    };
    let _ = writeln!(
        text,
        "-- run: {stop}; {} reads; {} messages ({} data, {} dropped); {}",
        out.events.len(),
        out.stats.sent,
        out.stats.data,
        out.stats.dropped,
        leadership_line(out)
    );
    for v in &out.violations {
        let _ = writeln!(
            text,
            "!! safety violation at {} ms: {:?} all master for term {}",
            v.at, v.masters, v.term
        );
    }
    text
}

fn exit_for(out: &SimOutcome) -> i32 {
    if !out.violations.is_empty() {
        EXIT_FAILURE
    } else if matches!(out.stop, StopReason::AllNodesDead { .. }) && out.reports.is_empty() {
        EXIT_ALL_DEAD
    } else {
        EXIT_OK
    }
}

/// Simulates `spec` with its storage log in `out`, replacing any earlier
/// log, and writes the report and CSV next to it.
pub fn run_to_dir(spec: &ScenarioSpec, out: &Path) -> Result<RunArtifacts, String> {
    let mut sink = FileSink::new(out).map_err(|e| e.to_string())?;
    let log_path = sink.log_path(&spec.id);
    match fs::remove_file(&log_path) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(format!("{}: {e}", log_path.display())),
    }
    let outcome = run_scenario_with(spec, &mut sink).map_err(|e| e.to_string())?;
    let text = render_run(spec, &outcome);
    let csv = render_csv(spec.rooms, &outcome.reports);
    let write = |p: PathBuf, s: &str| fs::write(&p, s).map_err(|e| format!("{}: {e}", p.display()));
    write(report_path(out, &spec.id), &text)?;
    write(csv_path(out, &spec.id), &csv)?;
    let log = fs::read_to_string(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?;
    Ok(RunArtifacts {
        text,
        csv,
        log,
        exit: exit_for(&outcome),
    })
}

fn emit(stdout: &mut dyn Write, format: Format, text: &str, csv: &str) -> io::Result<()> {
    if format != Format::Csv {
        stdout.write_all(text.as_bytes())?;
    }
    if format != Format::Text {
        stdout.write_all(csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> io::Result<i32> {
    let spec = match load(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_BAD_SCENARIO);
        }
    };
    let started = Instant::now();
    if args.live {
        return cmd_run_live(&spec, args, stdout, stderr);
    }
    match run_to_dir(&spec, &args.out) {
        Ok(a) => {
            emit(stdout, args.format, &a.text, &a.csv)?;
            if args.wall {
                writeln!(stderr, "wall: {} ms", started.elapsed().as_millis())?;
            }
            if a.exit == EXIT_ALL_DEAD {
                writeln!(stderr, "error: all nodes died before the first cycle completed")?;
            }
            Ok(a.exit)
        }
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            Ok(EXIT_FAILURE)
        }
    }
}

fn cmd_run_live(
    spec: &ScenarioSpec,
    args: &RunArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> io::Result<i32> {
    let started = Instant::now();
    let sink = match FileSink::new(&args.out) {
        Ok(s) => s,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let _ = fs::remove_file(sink.log_path(&spec.id));
    let outcome = match crate::live::run_live(spec, sink, false) {
        Ok(o) => o,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let text = render_text(&spec.id, spec.rooms, &outcome.reports, &spec.reference);
    let csv = render_csv(spec.rooms, &outcome.reports);
    let _ = fs::write(report_path(&args.out, &spec.id), &text);
    let _ = fs::write(csv_path(&args.out, &spec.id), &csv);
    emit(stdout, args.format, &text, &csv)?;
    if args.wall {
        writeln!(stderr, "wall: {} ms", started.elapsed().as_millis())?;
    }
    Ok(EXIT_OK)
}

fn cmd_replay(args: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> io::Result<i32> {
    let spec = match load(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_BAD_SCENARIO);
        }
    };
    let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()));
    let earlier = (|| -> Result<(String, String, String), String> {
        Ok((
            read(report_path(&args.out, &spec.id))?,
            read(csv_path(&args.out, &spec.id))?,
            read(args.out.join(format!("{}.log", spec.id)))?,
        ))
    })();
    let (text, csv, log) = match earlier {
        Ok(t) => t,
        Err(e) => {
            writeln!(stderr, "error: nothing to replay against: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let scratch = args.out.join(format!(".replay-{}", spec.id));
    let fresh = run_to_dir(&spec, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    let fresh = match fresh {
        Ok(a) => a,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let mut same = true;
    for (name, old, new) in [
        ("report", &text, &fresh.text),
        ("csv", &csv, &fresh.csv),
        ("storage log", &log, &fresh.log),
    ] {
        if old == new {
            writeln!(stdout, "{name}: identical ({} bytes)", new.len())?;
        } else {
            same = false;
            let line = old
                .lines()
                .zip(new.lines())
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| old.lines().count().min(new.lines().count()));
            writeln!(stdout, "{name}: differs from line {}", line + 1)?;
        }
    }
    Ok(if same { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> io::Result<i32> {
    let spec = match load(&args.scenario, None) {
        Ok(s) => s,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_BAD_SCENARIO);
        }
    };
    let records = FileSink::new(&args.out).and_then(|s| s.export(&spec.id));
    let records = match records {
        Ok(r) => r,
        Err(StorageError::UnknownScenario(id)) => {
            writeln!(stderr, "error: no storage log for `{id}` in {}", args.out.display())?;
            return Ok(EXIT_FAILURE);
        }
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let reports: Vec<CycleReport> = records.iter().map(CycleReport::from_record).collect();
    let text = render_text(&spec.id, spec.rooms, &reports, &spec.reference);
    emit(stdout, args.format, &text, &render_csv(spec.rooms, &reports))?;
    Ok(EXIT_OK)
}

/// One row of `bench` output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub visitors: u64,
    /// Simulated time from the first cycle boundary to its commit.
    pub cycle_completion_ms: Option<u64>,
    pub messages_sent: u64,
    pub data_messages: u64,
    pub oracle_match: bool,
}

pub const BENCH_HEADER: &str = "visitors,cycle_completion_ms,messages_sent,data_messages,oracle_match";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.visitors,
            self.cycle_completion_ms
                .map_or_else(|| "-".to_string(), |v| v.to_string()),
            self.messages_sent,
            self.data_messages,
            self.oracle_match
        )
    }
}

/// Runs `spec` once per visitor count. A matrix is scaled to each count
/// keeping its proportions.
pub fn bench(spec: &ScenarioSpec, counts: &[u64]) -> Result<Vec<BenchRow>, String> {
    let mut rows = Vec::new();
    for &n in counts {
        let mut s = spec.clone();
        s.visitors = scale_plan(&spec.visitors, n);
        let mut sink = crate::storage::MemorySink::new();
        let out = run_scenario_with(&s, &mut sink).map_err(|e| e.to_string())?;
        let first = out.reports.first();
        let cycle_completion_ms = first.map(|r| {
            r.committed_at
                .saturating_sub((r.cycle_index + 1) * s.cluster.cycle_period)
        });
        let (c1, c2) = sequential_oracle(&out.events).map_err(|e| e.to_string())?;
        let (m1, m2) = crate::report::merge_reports(&out.reports);
        rows.push(BenchRow {
            visitors: n,
            cycle_completion_ms,
            messages_sent: out.stats.sent,
            data_messages: out.stats.data,
            oracle_match: m1 == c1 && m2 == c2,
        });
    }
    Ok(rows)
}

fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> io::Result<i32> {
    let spec = match load(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_BAD_SCENARIO);
        }
    };
    if args.visitors.is_empty() || args.visitors.contains(&0) {
        writeln!(stderr, "error: visitor counts must be positive")?;
        return Ok(EXIT_BAD_SCENARIO);
    }
    let started = Instant::now();
    let rows = match bench(&spec, &args.visitors) {
        Ok(r) => r,
        Err(e) => {
            writeln!(stderr, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    stdout.write_all(csv.as_bytes())?;
    let path = args.out.join(format!("{}.bench.csv", spec.id));
    if let Err(e) = fs::create_dir_all(&args.out).and_then(|_| fs::write(&path, &csv)) {
        writeln!(stderr, "error: {}: {e}", path.display())?;
        return Ok(EXIT_FAILURE);
    }
    if args.wall {
        writeln!(stderr, "wall: {} ms", started.elapsed().as_millis())?;
    }
    Ok(EXIT_OK)
}

/// Runs a parsed invocation and returns the process exit code.
pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, stdout, stderr),
        Command::Replay(a) => cmd_replay(a, stdout, stderr),
        Command::Report(a) => cmd_report(a, stdout, stderr),
        Command::Bench(a) => cmd_bench(a, stdout, stderr),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(stderr, "error: {e}");
        EXIT_FAILURE
    })
}
