//! `rlsched`: plan search, cost estimation, scenario synthesis and plan
//! comparison for RL workflows on heterogeneous GPU pools.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rlsched::report::{breakdown_text, RunReport};
use rlsched::search::parse_knobs;
use rlsched::topology::{parse_inventory, ScenarioOptions};
use rlsched::{
    generate_scenario, load_topology, load_workflow, nested_sha_search, parse_plan, serialize_plan, CostBreakdown,
    CostModel, DeviceTopology, Error, Plan, SearchKnobs, WorkflowGraph,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "rlsched",
    version,
    about = "Execution planner for RL post-training workflows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a low-cost execution plan.
    Plan {
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        /// Cost-model evaluations the search may spend.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file of search knobs; flags take precedence.
        #[arg(long)]
        knobs: Option<PathBuf>,
        /// Plan file destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report destination; standard error when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Print the cost breakdown of an existing plan.
    Estimate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Synthesize a topology file for one of the four network scenarios.
    Scenario {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
        id: u32,
        /// Inventory such as "24xA100,24xL40S,16xL4".
        #[arg(long, default_value = "24xA100,24xL40S,16xL4")]
        gpus: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        gpus_per_node: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank plans by estimated end-to-end cost.
    Compare {
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(required = true, num_args = 2..)]
        plans: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(Error::Infeasible) => 4,
            Failure::Core(
                Error::Invalid(_)
                | Error::Schema(_)
                | Error::UnknownDevice(_)
                | Error::UnresolvedLink(..)
                | Error::Layout { .. }
                | Error::Unassigned { .. }
                | Error::SpaceTooLarge { .. }
                | Error::Json(_)
                | Error::Io(_),
            ) => 3,
            Failure::Core(Error::Misuse { .. }) => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => format!("usage error: {m}"),
            Failure::Core(Error::Infeasible) => format!("infeasible: {}", Error::Infeasible),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Core(Error::Invalid(format!("{}: {e}", path.display()))))
}

fn write_or_print(path: Option<&Path>, content: &str, to_stderr: bool) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, content).map_err(|e| Failure::Core(Error::Io(e))),
        None if to_stderr => {
            eprint!("{content}");
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn inputs(workflow: &Path, topology: &Path) -> CliResult<(WorkflowGraph, DeviceTopology)> {
    Ok((load_workflow(workflow)?, load_topology(topology)?))
}

/// Reads a plan file and checks it against the workflow and topology.
fn load_plan(path: &Path, workflow: &WorkflowGraph, topology: &DeviceTopology) -> CliResult<Plan> {
    let plan = parse_plan(&read(path)?)?.resolve(topology)?;
    plan.validate(workflow, topology)?;
    Ok(plan)
}

/// Knobs from the file, then flags. A seed given nowhere is drawn at random.
fn resolve_knobs(path: Option<&Path>, budget: Option<u64>, seed: Option<u64>) -> CliResult<(SearchKnobs, bool)> {
    let (mut knobs, file_seed) = match path {
        Some(p) => {
            let text = read(p)?;
            let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
            (parse_knobs(&text)?, raw.get("seed").is_some())
        }
        None => (SearchKnobs::default(), false),
    };
    if let Some(b) = budget {
        knobs.budget = b;
    }
    if knobs.budget == 0 {
        return Err(Failure::Usage("budget must be >= 1".into()));
    }
    let drawn = seed.is_none() && !file_seed;
    if let Some(s) = seed {
        knobs.seed = s;
    } else if drawn {
        knobs.seed = rand::random();
    }
    Ok((knobs, drawn))
}

#[allow(clippy::too_many_arguments)]
fn cmd_plan(
    workflow: &Path,
    topology: &Path,
    budget: Option<u64>,
    seed: Option<u64>,
    knobs: Option<&Path>,
    out: Option<&Path>,
    report: Option<&Path>,
    format: Format,
) -> CliResult<()> {
    let (knobs, drawn) = resolve_knobs(knobs, budget, seed)?;
    if drawn {
        eprintln!("seed {}", knobs.seed);
    }
    let (wf, topo) = inputs(workflow, topology)?;
    let start = Instant::now();
    let outcome = nested_sha_search(&wf, &topo, &knobs)?;
    let wall = start.elapsed().as_secs_f64();
    let mut plan_json = serialize_plan(&outcome.plan, &topo, Some(&outcome.breakdown))?;
    plan_json.push('\n');
    write_or_print(out, &plan_json, false)?;
    let run = RunReport::new(&outcome.plan, &outcome.breakdown, &outcome.state, wall);
    let text = match format {
        Format::Json => to_json(&run)?,
        Format::Text => run.to_text(),
    };
    write_or_print(report, &text, out.is_none())
}

fn cmd_estimate(plan: &Path, workflow: &Path, topology: &Path, format: Format) -> CliResult<()> {
    let (wf, topo) = inputs(workflow, topology)?;
    let plan = load_plan(plan, &wf, &topo)?;
    let breakdown = CostModel::new(&wf, &topo).evaluate(&plan)?;
    let text = match format {
        Format::Json => to_json(&breakdown)?,
        Format::Text => breakdown_text(&breakdown),
    };
    write_or_print(None, &text, false)
}

fn cmd_scenario(id: u32, gpus: &str, seed: Option<u64>, gpus_per_node: usize, out: Option<&Path>) -> CliResult<()> {
    let seed = seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("seed {s}");
        s
    });
    let inventory = parse_inventory(gpus)?;
    let opts = ScenarioOptions {
        gpus_per_node,
        ..ScenarioOptions::default()
    };
    let topo = generate_scenario(id, &inventory, seed, &opts)?;
    let mut json = topo.to_json()?;
    json.push('\n');
    write_or_print(out, &json, false)
}

#[derive(Serialize)]
struct Ranked {
    rank: usize,
    plan: String,
    end_to_end: f64,
    /// Cost above the best plan.
    delta: f64,
    /// Per-task total minus the best plan's, by task id.
    task_deltas: Vec<(u8, f64)>,
    reshard_delta: f64,
    sync_delta: f64,
    memory_feasible: bool,
}

fn rank(named: Vec<(String, CostBreakdown)>) -> Vec<Ranked> {
    let mut order: Vec<usize> = (0..named.len()).collect();
    // stable: equal costs keep input order
    order.sort_by(|&a, &b| named[a].1.end_to_end.total_cmp(&named[b].1.end_to_end));
    let best = &named[order[0]].1;
    order
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let (name, b) = &named[i];
            Ranked {
                rank: r + 1,
                plan: name.clone(),
                end_to_end: b.end_to_end,
                delta: b.end_to_end - best.end_to_end,
                task_deltas: b
                    .tasks
                    .iter()
                    .map(|t| (t.task, t.total - best.task(t.task).map_or(0.0, |x| x.total)))
                    .collect(),
                reshard_delta: b.reshard - best.reshard,
                sync_delta: b.sync - best.sync,
                memory_feasible: b.memory_feasible,
            }
        })
        .collect()
}

fn ranked_text(rows: &[Ranked]) -> String {
    let width = rows.iter().map(|r| r.plan.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<4} {:<width$} {:>14} {:>14} {:>8}\n",
        "rank", "plan", "end_to_end", "delta", "memory"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<4} {:<width$} {:>14.6} {:>14.6} {:>8}\n",
            r.rank,
            r.plan,
            r.end_to_end,
            r.delta,
            if r.memory_feasible { "ok" } else { "over" }
        ));
    }
    s
}

fn cmd_compare(workflow: &Path, topology: &Path, plans: &[PathBuf], format: Format) -> CliResult<()> {
    let (wf, topo) = inputs(workflow, topology)?;
    let model = CostModel::new(&wf, &topo);
    let mut named = Vec::new();
    for p in plans {
        let plan = load_plan(p, &wf, &topo)?;
        named.push((p.display().to_string(), model.evaluate(&plan)?));
    }
    let rows = rank(named);
    let text = match format {
        Format::Json => to_json(&rows)?,
        Format::Text => ranked_text(&rows),
    };
    write_or_print(None, &text, false)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Plan {
            workflow,
            topology,
            budget,
            seed,
            knobs,
            out,
            report,
            format,
        } => cmd_plan(
            &workflow,
            &topology,
            budget,
            seed,
            knobs.as_deref(),
            out.as_deref(),
            report.as_deref(),
            format,
        ),
        Command::Estimate {
            plan,
            workflow,
            topology,
            format,
        } => cmd_estimate(&plan, &workflow, &topology, format),
        Command::Scenario {
            id,
            gpus,
            seed,
            gpus_per_node,
            out,
        } => cmd_scenario(id, &gpus, seed, gpus_per_node, out.as_deref()),
        Command::Compare {
            workflow,
            topology,
            plans,
            format,
        } => cmd_compare(&workflow, &topology, &plans, format),
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rlsched: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
