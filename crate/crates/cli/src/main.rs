use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bvl_core::experiment::{
    compute_scores, read_metrics_csv, run_batch, run_sweep, summarize, write_batch, write_scores, ExperimentConfig,
    ExperimentError, PlannerKind, Prepared, SweepAxis,
};
use bvl_core::firm::{build_and_solve, FirmGraph};
use bvl_core::world::generate_rnp_with;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bvl", version, about = "Belief-space planning experiments for a landmark-localized rover")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (or file for env-export).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the base seed (run, sweep) or the graph seed (build-graph).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BatchArgs {
    /// Episodes per planner.
    #[arg(long)]
    runs: Option<usize>,
    /// Planner to run (bvl, urm, firm, ogr); repeatable.
    #[arg(long = "planner")]
    planners: Vec<String>,
    /// Parallel episodes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip writing per-episode logs.
    #[arg(long)]
    no_logs: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build, evaluate and solve the graph and write it as JSON.
    BuildGraph {
        #[command(flatten)]
        common: Common,
    },
    /// Run seeded episodes and write metrics and logs.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: BatchArgs,
        /// Use this graph instead of building one.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Run one batch per value of a config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: BatchArgs,
        /// obstacle_o or firm_nodes; defaults to the config's sweep.
        #[arg(long)]
        axis: Option<String>,
        /// Axis values, comma separated.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Compute safety and optimality scores from a metrics CSV.
    Score {
        /// metrics.csv or sweep.csv
        #[arg(long)]
        metrics: PathBuf,
        /// Where to write scores.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the environment of a config as JSON.
    EnvExport {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_infeasible() { 2 } else { 1 })
        }
    }
}

fn load_config(common: &Common, batch: Option<&BatchArgs>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(b) = batch {
        if let Some(r) = b.runs {
            cfg.n_runs = r;
        }
        if !b.planners.is_empty() {
            cfg.planners = b
                .planners
                .iter()
                .map(|p| PlannerKind::parse(p).ok_or_else(|| ExperimentError::Config(format!("unknown planner {p}"))))
                .collect::<Result<_, _>>()?;
        }
        if b.no_logs {
            cfg.write_logs = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::BuildGraph { common } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(s) = common.seed {
                cfg.graph_seed = s;
            }
            let env = generate_rnp_with(&cfg.env, &cfg.geometry)?;
            let g = build_and_solve(&env, &cfg.firm, &cfg.models, cfg.graph_seed)?;
            let dir = out_dir(&common, &cfg);
            fs::create_dir_all(&dir)?;
            let path = dir.join("graph.json");
            g.save(&path)?;
            let b0 = Prepared { cfg: cfg.clone(), env: env.clone(), graph: None, urm: None }.initial_belief();
            let start = g.neighbors_of_belief(&env, &b0, 1).first().map(|&(j, _)| j);
            println!("nodes: {}", g.nodes.len());
            println!("edges: {}", g.edges.len());
            match start {
                Some(j) => println!("J at start-adjacent node {j}: {}", g.j[j]),
                None => println!("no node visible from the start"),
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Run { common, batch, graph } => {
            let mut cfg = load_config(&common, Some(&batch))?;
            if let Some(s) = common.seed {
                cfg.base_seed = s;
            }
            let env = generate_rnp_with(&cfg.env, &cfg.geometry)?;
            let g = match &graph {
                Some(p) => Some(FirmGraph::load(p, &env)?),
                None => None,
            };
            let prepared = Prepared::new(&cfg, g)?;
            let result = run_batch(&prepared, batch.jobs);
            let dir = out_dir(&common, &cfg);
            write_batch(&dir, &result, cfg.write_logs)?;
            print_summary(&result.rows);
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Sweep { common, batch, axis, values } => {
            let mut cfg = load_config(&common, Some(&batch))?;
            if let Some(s) = common.seed {
                cfg.base_seed = s;
            }
            let (axis, values) = match (axis, cfg.sweep.clone()) {
                (Some(a), _) => {
                    let axis = SweepAxis::parse(&a).ok_or_else(|| ExperimentError::Config(format!("unknown axis {a}")))?;
                    let values = if values.is_empty() { cfg.sweep.as_ref().map(|s| s.values.clone()).unwrap_or_default() } else { values };
                    (axis, values)
                }
                (None, Some(s)) => (s.axis, if values.is_empty() { s.values } else { values }),
                (None, None) => return Err(ExperimentError::Config("no sweep axis given".into())),
            };
            let dir = out_dir(&common, &cfg);
            let rows = run_sweep(&cfg, axis, &values, batch.jobs, Some(&dir))?;
            print_summary(&rows);
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Score { metrics, out } => {
            let rows = read_metrics_csv(&metrics)?;
            let scores = compute_scores(&rows)?;
            println!("{:<8} {:>8} {:>11}", "planner", "safety", "optimality");
            for s in &scores {
                println!("{:<8} {:>8.3} {:>11.3}{}", s.planner, s.safety, s.optimality, if s.no_successes { "  (no successes)" } else { "" });
            }
            let path = out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).join("scores.csv"));
            write_scores(&path, &scores)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::EnvExport { common } => {
            let cfg = load_config(&common, None)?;
            let env = generate_rnp_with(&cfg.env, &cfg.geometry)?;
            let doc = serde_json::to_string_pretty(&env)?;
            match &common.out {
                Some(p) => {
                    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(p, doc)?;
                    println!("wrote {}", p.display());
                }
                None => println!("{doc}"),
            }
            Ok(())
        }
    }
}

fn print_summary(rows: &[bvl_core::experiment::MetricsRow]) {
    println!(
        "{:<6} {:>7} {:>5} {:>5} {:>5} {:>10} {:>12} {:>9}",
        "planner", "axis", "runs", "goal", "coll", "P(coll)", "mean cost", "med steps"
    );
    for s in summarize(rows) {
        println!(
            "{:<6} {:>7} {:>5} {:>5} {:>5} {:>10.3} {:>12} {:>9.0}",
            s.planner,
            s.axis_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            s.runs,
            s.successes,
            s.collisions,
            s.collision_probability,
            s.mean_cost.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into()),
            s.median_steps
        );
    }
}
