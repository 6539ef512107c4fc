#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use cloudmpc::controller::{solve, CnmpcProblem, ReferenceWindow, SolverConfig};
use cloudmpc::dynamics::{hover_input, AgentState};
use cloudmpc::harness::{run, sweep_cpu, verify, Scenario};
use cloudmpc::schedmech::SchedulingMode;
use nalgebra::Vector3;
use serde::Deserialize;

/// Cloud-hosted multi-agent NMPC simulator.
#[derive(Debug, Parser)]
#[command(name = "cloudmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario in virtual time and write metrics and logs.
    Run {
        /// Scenario file or bundled scenario name.
        scenario: String,
        /// Output directory; defaults to `out/<scenario name>`.
        #[arg(long, env = "CLOUDMPC_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scenario and print one PASS/FAIL line per property.
    Verify {
        scenario: String,
        /// Check this metrics file against the schema instead of the rendered one.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Tabulate processing time and closed-loop round trip against CPU utilization.
    SweepCpu {
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,0.99")]
        points: Vec<f64>,
        /// Scenario used for the closed-loop runs.
        #[arg(long, default_value = "delay_circle")]
        scenario: String,
        /// Virtual seconds per closed-loop run.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Solve one NMPC problem from a JSON file and print the solution.
    SolveOnce { problem: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Scheduled,
    Baseline,
}

impl From<Mode> for SchedulingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Scheduled => SchedulingMode::Scheduled,
            Mode::Baseline => SchedulingMode::Baseline,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveOnceFile {
    #[serde(default)]
    problem: Option<CnmpcProblem>,
    #[serde(default)]
    solver: SolverConfig,
    agents: Vec<SolveOnceAgent>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveOnceAgent {
    position: [f64; 3],
    #[serde(default)]
    velocity: [f64; 3],
    target: [f64; 3],
}

enum Failure {
    Input(anyhow::Error),
    Invariant(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn load(scenario: &str) -> Result<Scenario, Failure> {
    Scenario::load(scenario).map_err(|e| Failure::Input(e.into()))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { scenario, out, mode, seed } => {
            let mut s = load(&scenario)?;
            if let Some(m) = mode {
                s.set_mode(m.into());
            }
            if let Some(seed) = seed {
                s.set_seed(seed);
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from("out").join(&s.name));
            let output = run(&s)?;
            output
                .write_to(&out_dir)
                .with_context(|| format!("writing {}", out_dir.display()))?;
            println!(
                "{}: {} rows, {} actions, {} migrations, {} solves -> {}",
                s.name,
                output.rows.len(),
                output.actions.len(),
                output.migrations.len(),
                output.solves,
                out_dir.display()
            );
            for m in &output.monitors {
                if m.fired {
                    let note = if m.expected { "expected" } else { "FAILED" };
                    println!("monitor {} fired ({note}): {}", m.monitor.name(), m.detail);
                }
            }
            if !output.passed() {
                return Err(Failure::Invariant("an invariant monitor fired".into()));
            }
        }
        Command::Verify { scenario, metrics, json } => {
            let s = load(&scenario)?;
            let text = match metrics {
                Some(p) => Some(std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let report = verify(&s, text.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            if !report.passed() {
                return Err(Failure::Invariant("a property failed".into()));
            }
        }
        Command::SweepCpu { points, scenario, seconds } => {
            if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                bail_input(format!("load point {p} is outside [0, 1]"))?;
            }
            if !(seconds > 0.0) {
                bail_input(format!("--seconds must be positive, got {seconds}"))?;
            }
            let s = load(&scenario)?;
            let [lo, hi] = s.load.target_band;
            println!("# target band [{lo}, {hi}], tau_max {}", s.controller.tau_max);
            println!("utilization,tau_p,tau_rrt,in_band,deadline_ok");
            for p in sweep_cpu(&s, &points, seconds)? {
                let rtt = p.tau_rrt.map(|r| format!("{r:.6}")).unwrap_or_default();
                println!("{:.4},{:.6},{rtt},{},{}", p.utilization, p.tau_p, p.in_band, p.deadline_ok);
            }
        }
        Command::SolveOnce { problem } => {
            let text = std::fs::read_to_string(&problem).with_context(|| format!("reading {}", problem.display()))?;
            let file: SolveOnceFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", problem.display()))?;
            if file.agents.is_empty() {
                bail_input("at least one agent is required".into())?;
            }
            let mut p = file.problem.unwrap_or_default();
            p.agent_count = file.agents.len();
            let current: Vec<AgentState> = file
                .agents
                .iter()
                .map(|a| {
                    let mut s = AgentState::at_rest(Vector3::from(a.position));
                    s.velocity = Vector3::from(a.velocity);
                    s
                })
                .collect();
            let targets: Vec<AgentState> =
                file.agents.iter().map(|a| AgentState::at_rest(Vector3::from(a.target))).collect();
            let refs = ReferenceWindow::hold(&targets, p.horizon_steps);
            let previous = vec![hover_input(&p.model); p.agent_count];
            let solution = solve(&p, &current, &refs, &previous, None, &file.solver)?;
            println!("{}", serde_json::to_string_pretty(&solution)?);
        }
    }
    Ok(())
}

fn bail_input(msg: String) -> anyhow::Result<()> {
    bail!(msg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
