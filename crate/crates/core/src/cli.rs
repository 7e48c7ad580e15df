//! Command-line front end: `compile`, `tune` and `bench`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::error::Error;
use crate::exec::{simulate_cache, CacheConfig, ProfileCounters};
use crate::graphs;
use crate::ir::{DType, Graph};
use crate::loops::Schedules;
use crate::pipeline::{compile, oracle_check};
use crate::propagation::PropagationPlan;
use crate::tuner::{default_plan, tune, tune_loops, TuneConfig};

/// Exit code for invalid graphs, plans, schedules or configuration.
pub const EXIT_INVALID: i32 = 2;
/// Exit code when the compiled program disagrees with the reference.
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "layoutforge", version, about = "Layout-aware tensor compiler and autotuner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    Joint,
    LoopOnly,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compile a graph with a layout plan and loop schedules, dump the
    /// program and check it against the reference evaluator.
    Compile {
        /// Graph JSON file, or one of the built-in graphs c2d, dep, gmm, stem.
        #[arg(long)]
        graph: String,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        sched: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Search layouts and loop schedules; writes a JSON report.
    Tune {
        #[arg(long)]
        graph: String,
        #[arg(long, default_value_t = 256)]
        budget: usize,
        #[arg(long, default_value_t = 96)]
        joint: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `loop-only` keeps the layouts of `--plan` (default layouts if
        /// absent) and spends the whole budget on loops.
        #[arg(long, value_enum, default_value_t = StageArg::Joint)]
        stage: StageArg,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Full tuner configuration; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        serial: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Loop-only tuning of several plans at the same budget; writes the
    /// counters of each, cheapest first.
    Bench {
        #[arg(long)]
        graph: String,
        #[arg(long, num_args = 1.., required = true)]
        plans: Vec<PathBuf>,
        #[arg(long, default_value_t = 256)]
        budget: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Verdict {
    ok: bool,
    mismatch: Option<Mismatch>,
    counters: ProfileCounters,
}

#[derive(Serialize)]
struct Mismatch {
    tensor: String,
    index: usize,
}

#[derive(Serialize)]
pub struct BenchRow {
    pub plan: String,
    pub best_cost: f64,
    pub counters: ProfileCounters,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Loads a graph file, or builds a named graph.
pub fn load_graph(arg: &str) -> Result<Graph> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(g) = graphs::by_name(arg, DType::Float32) {
            return Ok(g);
        }
    }
    let g = Graph::from_json(&read(path)?)?.infer_shapes()?;
    g.validated()?;
    Ok(g)
}

fn load_cache(path: Option<&PathBuf>) -> Result<CacheConfig> {
    let cfg = match path {
        Some(p) => CacheConfig::from_json(&read(p)?)?,
        None => CacheConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_plan(g: &Graph, path: Option<&PathBuf>) -> Result<PropagationPlan> {
    let plan = match path {
        Some(p) => PropagationPlan::from_json(&read(p)?)?,
        None => PropagationPlan::default(),
    };
    plan.validate(g)?;
    Ok(plan)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct Mismatched;

impl std::fmt::Debug for Mismatched {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("program output differs from the reference")
    }
}

impl std::fmt::Display for Mismatched {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

impl std::error::Error for Mismatched {}

fn run_compile(
    graph: &str,
    plan: Option<&PathBuf>,
    sched: Option<&PathBuf>,
    cache: Option<&PathBuf>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let g = load_graph(graph)?;
    let plan = load_plan(&g, plan)?;
    let schedules: Schedules = match sched {
        Some(p) => serde_json::from_str(&read(p)?).map_err(Error::from)?,
        None => Schedules::new(),
    };
    let cache = load_cache(cache)?;
    let prog = compile(&g, &plan, &schedules)?;
    fs::create_dir_all(out)?;
    write(&out.join("program.txt"), &prog.pseudocode())?;
    let counters = simulate_cache(&prog, &cache)?;
    let mismatch = match oracle_check(&g, &prog, seed) {
        Ok(m) => m,
        Err(e @ Error::OutOfBounds { .. }) => {
            write(&out.join("verdict.json"), &format!("{{\"ok\":false,\"error\":{}}}", serde_json::to_string(&e.to_string())?))?;
            return Err(Mismatched).context(e);
        }
        Err(e) => return Err(e.into()),
    };
    let verdict = Verdict {
        ok: mismatch.is_none(),
        mismatch: mismatch.map(|(tensor, index)| Mismatch { tensor, index }),
        counters,
    };
    write(&out.join("verdict.json"), &serde_json::to_string_pretty(&verdict)?)?;
    if let Some(m) = &verdict.mismatch {
        return Err(Mismatched).context(format!("`{}` differs at element {}", m.tensor, m.index));
    }
    info!("verdict ok, cost {}", verdict.counters.cost);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compile {
            graph,
            plan,
            sched,
            cache,
            seed,
            out,
        } => run_compile(&graph, plan.as_ref(), sched.as_ref(), cache.as_ref(), seed, &out),
        Command::Tune {
            graph,
            budget,
            joint,
            cache,
            seed,
            stage,
            plan,
            config,
            levels,
            serial,
            out,
        } => {
            let g = load_graph(&graph)?;
            let cache = load_cache(cache.as_ref())?;
            let mut cfg: TuneConfig = match &config {
                Some(p) => serde_json::from_str(&read(p)?).map_err(Error::from)?,
                None => TuneConfig::default(),
            };
            cfg.budget = budget;
            cfg.joint = joint;
            cfg.seed = seed;
            cfg.parallel = !serial;
            if let Some(l) = levels {
                cfg.levels = l;
            }
            let report = match stage {
                StageArg::Joint => {
                    if plan.is_some() {
                        return Err(Error::Config("--plan is only used with --stage loop-only".into()).into());
                    }
                    tune(&g, &cache, &cfg)?
                }
                StageArg::LoopOnly => {
                    cfg.joint = 0;
                    let plan = match &plan {
                        Some(_) => load_plan(&g, plan.as_ref())?,
                        None => default_plan(&g)?,
                    };
                    tune_loops(&g, &plan, &cache, &cfg)?
                }
            };
            info!("best cost {} after {} simulations", report.best_cost, report.history.len());
            write(&out, &report.to_json())
        }
        Command::Bench {
            graph,
            plans,
            budget,
            cache,
            seed,
            out,
        } => {
            let g = load_graph(&graph)?;
            let cache = load_cache(cache.as_ref())?;
            let cfg = TuneConfig {
                budget,
                joint: 0,
                seed,
                ..TuneConfig::default()
            };
            let mut rows = Vec::new();
            for p in &plans {
                let plan = load_plan(&g, Some(p))?;
                let r = tune_loops(&g, &plan, &cache, &cfg)?;
                info!("{}: {}", p.display(), r.best_cost);
                rows.push(BenchRow {
                    plan: p.display().to_string(),
                    best_cost: r.best_cost,
                    counters: r.counters,
                });
            }
            rows.sort_by(|a, b| a.best_cost.total_cmp(&b.best_cost));
            write(&out, &serde_json::to_string_pretty(&rows)?)
        }
    }
}

/// Exit status for an error: mismatches give 3, everything else 2.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.is::<Mismatched>()) {
        EXIT_MISMATCH
    } else {
        EXIT_INVALID
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAYOUTFORGE_LOG", "error")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatch_maps_to_exit_3() {
        let e = anyhow::Error::new(Mismatched).context("`Y` differs at element 4");
        assert_eq!(exit_code(&e), EXIT_MISMATCH);
        let e = anyhow::Error::new(Error::Config("bad".into()));
        assert_eq!(exit_code(&e), EXIT_INVALID);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(main_with(["layoutforge", "--help"]), 0);
        assert_eq!(main_with(["layoutforge", "tune"]), EXIT_INVALID);
    }
}
