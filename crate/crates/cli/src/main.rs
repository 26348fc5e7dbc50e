//! Operator entry point: run scenarios, fuzz across seeds, check traces, and
//! query the exact oracle.
//!
//! Exit status: 0 on success, 1 on a verdict failure or non-convergence,
//! 2 on usage or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use steinersim_core::checkers::{self, Verdict, Violation};
use steinersim_core::oracle;
use steinersim_core::simulator::{run, RunOutput, Trace};
use steinersim_core::{Adversary, Atomicity, Graph, NodeId, Scenario};

/// Environment variable naming the default output directory for traces.
const OUT_DIR_ENV: &str = "STEINERSIM_OUT";

#[derive(Parser)]
#[command(name = "steinersim", version, about = "Self-stabilizing Steiner tree simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace.
    Run(RunArgs),
    /// Run a scenario under many seeds and aggregate all checker verdicts.
    Fuzz(FuzzArgs),
    /// Re-judge a previously written trace.
    Check(CheckArgs),
    /// Exact optimal Steiner tree (or the greedy baseline) for a graph file.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (JSON).
    scenario: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Trace output path; defaults to `<scenario stem>.trace.jsonl` in
    /// `$STEINERSIM_OUT` or the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    /// Scenario file (JSON); its seed is the base of the fuzzed seed range.
    scenario: PathBuf,
    /// Number of seeds to run.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Round-bound slack factor (bound = factor * members * diameter).
    #[arg(long, default_value_t = 5)]
    factor: u64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CheckArgs {
    /// Trace file (line-delimited JSON) as written by `run`.
    trace: PathBuf,
    /// Round-bound slack factor.
    #[arg(long, default_value_t = 5)]
    factor: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Graph file (`nodes N` / `root R` / `members ...` / edge lines).
    graph: PathBuf,
    /// Compute the online greedy baseline instead of the exact optimum.
    #[arg(long)]
    greedy: bool,
    /// Member order for the greedy baseline, e.g. `1,4,2`; defaults to
    /// ascending ids starting at the root.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<u32>>,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the round budget.
    #[arg(long)]
    max_rounds: Option<u64>,
    /// Override the delivery adversary.
    #[arg(long, value_enum)]
    adversary: Option<AdversaryArg>,
    /// Override the per-receipt correction granularity.
    #[arg(long, value_enum)]
    atomic: Option<AtomicityArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdversaryArg {
    Random,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum AtomicityArg {
    Coarse,
    Fine,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Fuzz(args) => cmd_fuzz(args),
        Command::Check(args) => cmd_check(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    let mut scenario: Scenario = serde_json::from_str(&text)
        .with_context(|| format!("parsing scenario {}", path.display()))?;
    if let Some(seed) = overrides.seed {
        scenario.seed = seed;
    }
    if let Some(max_rounds) = overrides.max_rounds {
        scenario.max_rounds = max_rounds;
    }
    if let Some(adv) = overrides.adversary {
        scenario.adversary = match adv {
            AdversaryArg::Random => Adversary::Random,
            AdversaryArg::Greedy => Adversary::Greedy,
        };
    }
    if let Some(atomic) = overrides.atomic {
        scenario.atomicity = match atomic {
            AtomicityArg::Coarse => Atomicity::Coarse,
            AtomicityArg::Fine => Atomicity::Fine,
        };
    }
    scenario.validate()?;
    Ok(scenario)
}

fn default_trace_path(scenario: &Path) -> PathBuf {
    let stem = scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    dir.join(format!("{stem}.trace.jsonl"))
}

fn print_summary(out: &RunOutput) {
    let s = &out.trace.summary;
    if s.converged {
        println!(
            "converged in {} rounds (tree weight {}, {} messages)",
            s.converged_round.unwrap_or(s.rounds),
            s.tree_weight,
            s.messages
        );
    } else {
        println!("did NOT converge within {} rounds", s.rounds);
    }
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let scenario = load_scenario(&args.scenario, &args.overrides)?;
    let out = run(&scenario)?;
    let path = args.out.unwrap_or_else(|| default_trace_path(&args.scenario));
    fs::write(&path, out.trace.to_jsonl())
        .with_context(|| format!("writing trace {}", path.display()))?;
    println!("trace written to {}", path.display());
    print_summary(&out);
    let ratio = checkers::check_competitiveness(&out.config);
    if let (Some(opt), Some(r)) = (&ratio.metrics.optimal_weight, &ratio.metrics.ratio) {
        println!("optimal weight {opt}, ratio {r}");
    }
    Ok(out.converged())
}

/// All checkers that apply to one finished run, as named verdicts.
fn judge(out: &RunOutput, factor: u64) -> Vec<(&'static str, Verdict)> {
    let mut verdicts = vec![
        ("legitimate", checkers::check_legitimate(&out.config)),
        ("round-bound", checkers::check_round_bound(&out.trace, factor)),
        ("no-deadlock", checkers::check_no_deadlock(&out.trace)),
        ("competitiveness", checkers::check_competitiveness(&out.config)),
    ];
    let events = &out.trace.scenario.events;
    if events.len() == 1 && events[0].kind.is_removal() {
        verdicts.push(("passage", checkers::check_passage(&out.trace, &events[0])));
    }
    verdicts
}

fn describe(verdicts: &[(&'static str, Verdict)]) -> String {
    verdicts
        .iter()
        .map(|(name, v)| {
            let mark = if v.skipped {
                "skip"
            } else if v.pass {
                "pass"
            } else {
                "FAIL"
            };
            format!("{name}={mark}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_fuzz(args: FuzzArgs) -> Result<bool> {
    let base = load_scenario(&args.scenario, &args.overrides)?;
    let mut failures = 0u64;
    let mut first_failure: Option<u64> = None;
    for i in 0..args.seeds {
        let mut scenario = base.clone();
        scenario.seed = base.seed.wrapping_add(i);
        let out = run(&scenario)?;
        let verdicts = judge(&out, args.factor);
        let failed = !out.converged() || verdicts.iter().any(|(_, v)| !v.pass);
        if failed {
            failures += 1;
            first_failure.get_or_insert(scenario.seed);
            println!(
                "seed {}: FAILED ({}) converged={}",
                scenario.seed,
                describe(&verdicts),
                out.converged()
            );
            for (name, v) in verdicts.iter().filter(|(_, v)| !v.pass) {
                for viol in &v.violations {
                    println!("  {name}: {}", viol.description);
                }
            }
        } else {
            println!(
                "seed {}: ok ({} rounds, {})",
                scenario.seed,
                out.trace.summary.rounds,
                describe(&verdicts)
            );
        }
    }
    if failures > 0 {
        println!("{failures}/{} seeds failed", args.seeds);
        if let Some(seed) = first_failure {
            println!(
                "reproduce with: steinersim run {} --seed {seed}",
                args.scenario.display()
            );
        }
        Ok(false)
    } else {
        println!("all {} seeds passed", args.seeds);
        Ok(true)
    }
}

fn cmd_check(args: CheckArgs) -> Result<bool> {
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("reading trace {}", args.trace.display()))?;
    let trace = Trace::from_jsonl(&text)?;
    // Re-execute the embedded scenario to obtain the live configuration the
    // configuration checkers need, and verify the trace matches the replay.
    let out = run(&trace.scenario)?;
    let mut all: Vec<(&'static str, Verdict)> = Vec::new();
    if out.trace != trace {
        all.push((
            "replay",
            Verdict {
                pass: false,
                skipped: false,
                violations: vec![Violation {
                    round: None,
                    nodes: Vec::new(),
                    description: "trace does not match a replay of its scenario".into(),
                }],
                metrics: Default::default(),
            },
        ));
    }
    all.extend(judge(&out, args.factor));
    for (name, v) in &all {
        println!("{}", serde_json::to_string(v).expect("serializable"));
        let mark = if v.skipped { "skipped" } else if v.pass { "pass" } else { "FAIL" };
        eprintln!("{name}: {mark}");
    }
    Ok(all.iter().all(|(_, v)| v.pass))
}

fn cmd_oracle(args: OracleArgs) -> Result<bool> {
    let text = fs::read_to_string(&args.graph)
        .with_context(|| format!("reading graph {}", args.graph.display()))?;
    let graph: Graph = text.parse()?;
    let solution = if args.greedy {
        let order: Vec<NodeId> = match args.order {
            Some(ids) => ids.into_iter().map(NodeId).collect(),
            None => {
                let mut order: Vec<NodeId> = graph.members().iter().copied().collect();
                order.retain(|m| *m != graph.root());
                order.insert(0, graph.root());
                order
            }
        };
        oracle::imase_waxman_greedy(&graph, &order)?
    } else {
        oracle::optimal_steiner(&graph)?
    };
    println!("{}", serde_json::to_string(&solution).expect("serializable"));
    let edges: Vec<String> = solution.edges.iter().map(|e| e.to_string()).collect();
    eprintln!("weight {} edges [{}]", solution.weight, edges.join(", "));
    Ok(true)
}
