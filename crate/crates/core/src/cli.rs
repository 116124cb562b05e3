//! The `detnet5g` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{
    AdmissionError, AdmissionOptions, FlowAssignment, FlowResponse, FlowSpec, NetworkState,
};
use crate::scenario::{load_topology, read_json, NwttBlock, Scenario, ScenarioError};
use crate::sim::{self, RunOptions, RunReport, SimError, SimOutput};
use crate::topology::{NodeId, TopologyError, TreeEnumeration};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_REJECTED: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "detnet5g",
    version,
    about = "DetNet admission control and simulation over a 5G transit segment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DejitterMode {
    On,
    Off,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate the spanning trees of a topology.
    Trees {
        topology: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Stop after this many trees.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Admit a list of flow requests in order.
    Admit {
        topology: PathBuf,
        flows: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Never move admitted flows to make room.
        #[arg(long)]
        no_reconfig: bool,
    },
    /// Admit a scenario's flows and simulate it.
    Run {
        scenario: PathBuf,
        #[arg(long, env = "DETNET5G_OUT", default_value = ".")]
        out: PathBuf,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range, `a..b` or `a..=b`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, value_enum, default_value = "on")]
        dejitter: DejitterMode,
        #[arg(long, value_enum)]
        background: Option<OnOff>,
    },
    /// Summarize a packet trace.
    Report {
        trace: PathBuf,
        /// Run report whose bounds the latencies are checked against.
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Admission(#[from] AdmissionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Sim(SimError::AdmissionMissing { .. }) => EXIT_REJECTED,
            _ => EXIT_USAGE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn schema_version() -> u32 {
    1
}

fn yes() -> bool {
    true
}

/// Input of `admit`: requests in arrival order, plus the NW-TT settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmitFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub flows: Vec<AdmitEntry>,
    #[serde(default)]
    pub nwtt: NwttBlock,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmitEntry {
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "rate_Bps")]
    pub rate_bps: u64,
    #[serde(rename = "burst_B")]
    pub burst_bytes: u64,
    #[serde(rename = "max_pkt_B")]
    pub max_pkt_bytes: u64,
    pub deadline_us: u64,
    #[serde(default)]
    pub dejitter: bool,
    /// A rejected critical flow makes `admit` exit with status 2.
    #[serde(default = "yes")]
    pub critical: bool,
}

impl AdmitEntry {
    pub fn spec(&self) -> FlowSpec {
        FlowSpec {
            flow_id: self.flow_id.clone(),
            src: self.src.clone(),
            dst: self.dst.clone(),
            rate_bps: self.rate_bps,
            burst_bytes: self.burst_bytes,
            max_pkt_bytes: self.max_pkt_bytes,
            deadline_us: self.deadline_us,
            dejitter: self.dejitter,
        }
    }
}

#[derive(Debug, Serialize)]
struct AdmitOutput<'a> {
    schema_version: u32,
    responses: &'a [FlowResponse],
    assignments: Vec<&'a FlowAssignment>,
}

/// Parses `a..b` (half open) or `a..=b`.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad seed range `{s}`, expected a..b or a..=b"));
    let (lo, hi, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive {
        (lo..=hi).collect()
    } else {
        (lo..hi).collect()
    };
    if seeds.is_empty() {
        return Err(CliError::Usage(format!("seed range `{s}` is empty")));
    }
    Ok(seeds)
}

/// Executes a parsed command, writing human output to `out`. Returns the
/// process exit status.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Trees {
            topology,
            format,
            cap,
        } => cmd_trees(&topology, format, cap, out),
        Command::Admit {
            topology,
            flows,
            format,
            no_reconfig,
        } => cmd_admit(&topology, &flows, format, !no_reconfig, out),
        Command::Run {
            scenario,
            out: dir,
            seed,
            seeds,
            dejitter,
            background,
        } => {
            let seeds = match (seed, seeds) {
                (Some(s), _) => vec![Some(s)],
                (None, Some(r)) => parse_seed_range(&r)?.into_iter().map(Some).collect(),
                (None, None) => vec![None],
            };
            cmd_run(&scenario, &dir, &seeds, dejitter, background, out)
        }
        Command::Report {
            trace,
            bounds,
            format,
        } => cmd_report(&trace, bounds.as_deref(), format, out),
    }
}

fn w(out: &mut dyn Write, path: &str, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(text).map_err(io_err(Path::new(path)))
}

pub fn cmd_trees(
    path: &Path,
    format: Format,
    cap: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let topo = load_topology(path)?;
    let en: TreeEnumeration = match cap {
        Some(c) => topo.enumerate_spanning_trees_with(crate::topology::DEFAULT_VLAN_BASE, c)?,
        None => topo.enumerate_spanning_trees()?,
    };
    match format {
        Format::Json => {
            let text = serde_json::to_string_pretty(&en).expect("trees serialize");
            w(out, "stdout", format_args!("{text}\n"))?;
        }
        Format::Text => {
            let more = if en.truncated { " (truncated)" } else { "" };
            w(
                out,
                "stdout",
                format_args!("{} spanning trees{more}\n", en.trees.len()),
            )?;
            for t in &en.trees {
                let edges: Vec<String> = t.edges.iter().map(ToString::to_string).collect();
                w(
                    out,
                    "stdout",
                    format_args!("VLAN {}: {}\n", t.vlan_id, edges.join(" ")),
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_admit(
    topo_path: &Path,
    flows_path: &Path,
    format: Format,
    reconfiguration: bool,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let topo = load_topology(topo_path)?;
    let file: AdmitFile = read_json(flows_path)?;
    if file.schema_version != 1 {
        return Err(CliError::Usage(format!(
            "{}: unsupported schema_version {}",
            flows_path.display(),
            file.schema_version
        )));
    }
    let opts = AdmissionOptions {
        reconfiguration,
        regulator: file.nwtt.dejitter,
        ..AdmissionOptions::default()
    };
    let mut state = NetworkState::new(topo, opts)?;
    let mut responses = Vec::new();
    let mut critical_rejected = false;
    for entry in &file.flows {
        let resp = state.respond(entry.spec());
        critical_rejected |= entry.critical && !resp.accepted;
        responses.push(resp);
    }
    let assignments: Vec<&FlowAssignment> = state.flows().map(|f| &f.assignment).collect();
    match format {
        Format::Json => {
            let doc = AdmitOutput {
                schema_version: 1,
                responses: &responses,
                assignments,
            };
            let text = serde_json::to_string_pretty(&doc).expect("responses serialize");
            w(out, "stdout", format_args!("{text}\n"))?;
        }
        Format::Text => {
            for r in &responses {
                if r.accepted {
                    let moved = if r.reconfigured.is_empty() {
                        String::new()
                    } else {
                        format!(" (moved {})", r.reconfigured.join(", "))
                    };
                    w(
                        out,
                        "stdout",
                        format_args!(
                            "{}: accepted VLAN {} PCP {} bound {} us{moved}\n",
                            r.flow_id,
                            r.vlan_id.unwrap_or_default(),
                            r.pcp.unwrap_or_default(),
                            r.e2e_bound_us.unwrap_or_default()
                        ),
                    )?;
                } else {
                    w(
                        out,
                        "stdout",
                        format_args!(
                            "{}: rejected {}: {}\n",
                            r.flow_id,
                            r.reason.map(|x| x.to_string()).unwrap_or_default(),
                            r.detail.as_deref().unwrap_or("")
                        ),
                    )?;
                }
            }
            w(out, "stdout", format_args!("final assignments:\n"))?;
            for a in assignments {
                let hops: Vec<String> = a.hop_ports.iter().map(ToString::to_string).collect();
                w(
                    out,
                    "stdout",
                    format_args!(
                        "  {} VLAN {} PCP {} hops [{}] per-hop {:?} transit {} regulator {} e2e {} us\n",
                        a.flow_id,
                        a.vlan_id,
                        a.priority_class,
                        hops.join(" "),
                        a.per_hop_bounds_us,
                        a.transit_bound_us,
                        a.regulator_bound_us,
                        a.e2e_bound_us
                    ),
                )?;
            }
        }
    }
    Ok(if critical_rejected {
        EXIT_REJECTED
    } else {
        EXIT_OK
    })
}

#[derive(Debug, Serialize)]
struct DejitterSummary {
    schema_version: u32,
    seed: u64,
    flows: Vec<DejitterRow>,
}

#[derive(Debug, Serialize)]
struct DejitterRow {
    flow_id: String,
    jitter_off_us: f64,
    jitter_on_us: f64,
    min_latency_off_us: f64,
    min_latency_on_us: f64,
    max_latency_off_us: f64,
    max_latency_on_us: f64,
}

fn dejitter_summary(off: &RunReport, on: &RunReport) -> DejitterSummary {
    let flows = on
        .flows
        .iter()
        .filter(|f| f.critical)
        .filter_map(|f_on| {
            let f_off = off.flow(&f_on.flow_id)?;
            let (a, b) = (f_off.latency?, f_on.latency?);
            Some(DejitterRow {
                flow_id: f_on.flow_id.clone(),
                jitter_off_us: a.jitter_us,
                jitter_on_us: b.jitter_us,
                min_latency_off_us: a.min_us,
                min_latency_on_us: b.min_us,
                max_latency_off_us: a.max_us,
                max_latency_on_us: b.max_us,
            })
        })
        .collect();
    DejitterSummary {
        schema_version: 1,
        seed: on.seed,
        flows,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn cmd_run(
    scenario_path: &Path,
    dir: &Path,
    seeds: &[Option<u64>],
    dejitter: DejitterMode,
    background: Option<OnOff>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let scenario = Scenario::load(scenario_path)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let modes: &[bool] = match dejitter {
        DejitterMode::On => &[true],
        DejitterMode::Off => &[false],
        DejitterMode::Both => &[false, true],
    };
    let background = background.is_none_or(|b| b == OnOff::On);
    let jobs: Vec<(Option<u64>, bool)> = seeds
        .iter()
        .flat_map(|&s| modes.iter().map(move |&m| (s, m)))
        .collect();
    let results: Vec<Result<SimOutput, SimError>> = jobs
        .par_iter()
        .map(|&(seed, dj)| {
            sim::run(
                &scenario,
                &RunOptions {
                    seed,
                    dejitter: dj,
                    background,
                },
            )
        })
        .collect();

    let mut violations = 0;
    let mut by_seed: Vec<(Option<u64>, Vec<RunReport>)> = Vec::new();
    for ((seed, dj), res) in jobs.iter().zip(results) {
        let output = res?;
        let tag = if *dj { "on" } else { "off" };
        let suffix = match seed {
            Some(s) if seeds.len() > 1 => format!("{tag}_seed{s}"),
            _ => tag.to_owned(),
        };
        let trace_path = dir.join(format!("trace_{suffix}.csv"));
        let mut buf = Vec::new();
        sim::write_trace(&mut buf, &output.trace).map_err(|source| CliError::Csv {
            path: trace_path.clone(),
            source,
        })?;
        write_file(&trace_path, &buf)?;
        let report_path = dir.join(format!("report_{suffix}.json"));
        write_file(&report_path, output.report.to_json().as_bytes())?;

        let r = &output.report;
        violations += r.total_violations;
        w(
            out,
            "stdout",
            format_args!(
                "seed {} dejitter {tag}: {} violations, conservation {}\n",
                r.seed,
                r.total_violations,
                if r.conservation_ok { "ok" } else { "BROKEN" }
            ),
        )?;
        for f in &r.flows {
            let lat = f.latency.map_or_else(
                || "no packets delivered".to_owned(),
                |l| {
                    format!(
                        "min {:.3} max {:.3} jitter {:.3} us",
                        l.min_us, l.max_us, l.jitter_us
                    )
                },
            );
            let bound = f
                .bound_us
                .map(|b| format!(" bound {b} us"))
                .unwrap_or_default();
            w(
                out,
                "stdout",
                format_args!(
                    "  {:<20} sent {:>6} recv {:>6} drop {:>5}  {lat}{bound}\n",
                    f.flow_id, f.emitted, f.received, f.dropped
                ),
            )?;
        }
        if !r.conservation_ok {
            violations += 1;
        }
        match by_seed.last_mut() {
            Some((s, reps)) if s == seed => reps.push(output.report),
            _ => by_seed.push((*seed, vec![output.report])),
        }
    }

    if dejitter == DejitterMode::Both {
        for (seed, reps) in &by_seed {
            let summary = dejitter_summary(&reps[0], &reps[1]);
            let name = match seed {
                Some(s) if seeds.len() > 1 => format!("dejitter_summary_seed{s}.json"),
                _ => "dejitter_summary.json".to_owned(),
            };
            let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            text.push('\n');
            write_file(&dir.join(name), text.as_bytes())?;
            for row in &summary.flows {
                w(
                    out,
                    "stdout",
                    format_args!(
                        "{} jitter {:.3} -> {:.3} us, min latency {:.3} -> {:.3} us\n",
                        row.flow_id,
                        row.jitter_off_us,
                        row.jitter_on_us,
                        row.min_latency_off_us,
                        row.min_latency_on_us
                    ),
                )?;
            }
        }
    }
    Ok(if violations > 0 {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    })
}

pub fn cmd_report(
    trace_path: &Path,
    bounds: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let file = fs::File::open(trace_path).map_err(io_err(trace_path))?;
    let records = sim::read_trace(file).map_err(|source| CliError::Csv {
        path: trace_path.to_owned(),
        source,
    })?;
    let report: Option<RunReport> = bounds.map(read_json).transpose()?;
    let summary = sim::summarize_trace(&records, report.as_ref());
    let over: u64 = summary.iter().map(|s| s.over_bound).sum();
    match format {
        Format::Json => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            w(out, "stdout", format_args!("{text}\n"))?;
        }
        Format::Text => {
            for s in &summary {
                let lat = s.latency.map_or_else(
                    || "no packets delivered".to_owned(),
                    |l| {
                        format!(
                            "min {:.3} mean {:.3} p99 {:.3} max {:.3} jitter {:.3} us",
                            l.min_us, l.mean_us, l.p99_us, l.max_us, l.jitter_us
                        )
                    },
                );
                let bound = s
                    .bound_us
                    .map(|b| format!(" bound {b} us, {} over", s.over_bound))
                    .unwrap_or_default();
                w(
                    out,
                    "stdout",
                    format_args!(
                        "{:<20} pkts {:>6} recv {:>6} drop {:>5}  {lat}{bound}\n",
                        s.flow_id, s.packets, s.received, s.dropped
                    ),
                )?;
            }
        }
    }
    Ok(if over > 0 { EXIT_VIOLATION } else { EXIT_OK })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("1..4").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seed_range("2..=3").unwrap(), vec![2, 3]);
        assert!(parse_seed_range("3..3").is_err());
        assert!(parse_seed_range("x").is_err());
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "detnet5g",
            "run",
            "s.json",
            "--dejitter",
            "both",
            "--seeds",
            "1..3",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::Run {
                dejitter: DejitterMode::Both,
                ..
            }
        ));
        assert!(Cli::try_parse_from([
            "detnet5g", "run", "s.json", "--seed", "1", "--seeds", "1..2"
        ])
        .is_err());
    }
}
