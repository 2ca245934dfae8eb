//! The `sto` command line.
//!
//! Exit codes: 0 success, 2 bad input, 3 solver did not converge, 4 internal
//! failure. Every global flag can also be set through an `STO_`-prefixed
//! environment variable (`STO_CONFIG`, `STO_OUT`, `STO_SEED`, `STO_JOBS`,
//! `STO_DUMP_PGM`); flags win over the environment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::cost::{CostVariant, OmegaSchedule};
use crate::error::{shape_mismatch, Error, Result};
use crate::eval::{aggregate, run_metrics, Aggregate, RunMetrics};
use crate::grid::{GridMap, SpatialRelation};
use crate::io;
use crate::ot::{regularized_cost, sinkhorn, transport_loss, TransportProblem};
use crate::sim::{run, SimState};
use crate::sto::SpatialSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "sto",
    version,
    about = "Optimal-transport repositioning of attention maps on a toy denoiser"
)]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, env = "STO_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "STO_OUT")]
    pub out: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true, env = "STO_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for sweeps (0 = one per core).
    #[arg(long, global = true, env = "STO_JOBS", default_value_t = 1)]
    pub jobs: usize,
    /// Write every token map at every step as 16-bit PGM.
    #[arg(long, global = true, env = "STO_DUMP_PGM")]
    pub dump_pgm: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one entropic transport problem from CSV files.
    Sinkhorn {
        /// Square cost matrix as CSV.
        #[arg(long)]
        cost: PathBuf,
        /// Source weights (rescaled to unit mass).
        #[arg(long)]
        mu: PathBuf,
        /// Target weights (rescaled to unit mass).
        #[arg(long)]
        nu: PathBuf,
        /// Entropic regularization.
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Marginal L1 tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        /// Write the transport plan here as CSV.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the simulator for every configured seed.
    Simulate,
    /// Run one ablation axis over every configured seed.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Score the final maps of a simulate output directory.
    Eval {
        /// A `simulate` output directory or a single `seed_*` run inside it.
        trace_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Window,
    Omega,
    Cost,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
        Error::NonFinite(_) | Error::Io(_) => EXIT_INTERNAL,
        _ => EXIT_INPUT,
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Sinkhorn {
            cost,
            mu,
            nu,
            eps,
            tol,
            max_iter,
            plan,
        } => cmd_sinkhorn(cost, mu, nu, *eps, *tol, *max_iter, plan.as_deref()),
        Command::Simulate => {
            let (cfg, out) = load_config(cli)?;
            cmd_simulate(&cfg, &out).map(|_| EXIT_OK)
        }
        Command::Sweep { axis } => {
            let (cfg, out) = load_config(cli)?;
            cmd_sweep(&cfg, *axis, &out, cli.jobs).map(|_| EXIT_OK)
        }
        Command::Eval { trace_dir } => {
            let out = cli.out.clone().unwrap_or_else(|| trace_dir.clone());
            cmd_eval(trace_dir, &out).map(|_| EXIT_OK)
        }
    }
}

/// Reads and validates the configuration and applies flag overrides. Nothing
/// is written until this succeeds.
fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if cli.dump_pgm {
        cfg.export.dump_pgm = true;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sto_out"));
    Ok((cfg, out))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sinkhorn(
    cost: &Path,
    mu: &Path,
    nu: &Path,
    eps: f64,
    tol: f64,
    max_iter: usize,
    plan_out: Option<&Path>,
) -> Result<i32> {
    let c = io::read_matrix(cost)?;
    let n = c.n();
    let mut mu = io::read_vector(mu)?;
    let mut nu = io::read_vector(nu)?;
    for (name, v) in [("mu", &mu), ("nu", &nu)] {
        if v.len() != n {
            return Err(shape_mismatch(
                format!("{n}x{n} cost"),
                format!("{name} of length {}", v.len()),
            ));
        }
    }
    // Marginals are rescaled to unit mass so files need not be exact.
    for v in [&mut mu, &mut nu] {
        let total: f64 = v.iter().sum();
        if !(total > 0.0) || v.iter().any(|x| *x < 0.0) {
            return Err(Error::Parse("marginals must be nonnegative with positive total".into()));
        }
        v.iter_mut().for_each(|x| *x /= total);
    }
    let prob = TransportProblem::new(mu, nu, c, eps)?;
    let res = sinkhorn(&prob, tol, max_iter)?;
    let loss = transport_loss(&res.plan, &prob.cost)?;
    let reg = regularized_cost(&res, &prob.cost)?;
    println!("loss {loss}");
    println!("regularized {reg}");
    println!("marginal_err {}", res.marginal_err);
    println!("iterations {}", res.iterations);
    println!("converged {}", res.converged);
    if let Some(p) = plan_out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, io::matrix_to_csv(n, &res.plan))?;
    }
    if res.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "error: not converged after {} iterations (marginal error {:e})",
            res.iterations, res.marginal_err
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// Per-spec metrics of one finished run; relations without a directional
/// rule are skipped.
pub fn spec_metrics(maps: &[GridMap], specs: &[SpatialSpec]) -> Result<Vec<(usize, RunMetrics)>> {
    specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.relation.is_directional())
        .map(|(k, s)| Ok((k, run_metrics(&maps[s.source], &maps[s.reference], s.relation)?)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecSummary {
    index: usize,
    source: usize,
    reference: usize,
    relation: SpatialRelation,
    centroid_ok: bool,
    compbench_ok: bool,
    oa_a: bool,
    oa_b: bool,
    visor_uncond: bool,
    visor_cond: Option<bool>,
    miou: f64,
    support_iou: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    seed: u64,
    tokens: usize,
    side: usize,
    specs: Vec<SpatialSpec>,
    steps: usize,
    window: (usize, usize),
    guidance: bool,
    total_updates: usize,
    refine_updates: usize,
    solver_iterations: usize,
    final_centroids: Vec<(f64, f64)>,
    metrics: Vec<SpecSummary>,
}

fn summarize(seed: u64, cfg: &ExperimentConfig, specs: &[SpatialSpec], state: &SimState) -> Result<RunSummary> {
    let sim = cfg.sim_config(seed);
    let metrics = spec_metrics(&state.maps, specs)?
        .into_iter()
        .map(|(k, m)| SpecSummary {
            index: k,
            source: specs[k].source,
            reference: specs[k].reference,
            relation: specs[k].relation,
            centroid_ok: m.judgment.centroid_ok,
            compbench_ok: m.judgment.compbench_ok,
            oa_a: m.oa_a,
            oa_b: m.oa_b,
            visor_uncond: m.visor_uncond,
            visor_cond: m.visor_cond,
            miou: m.judgment.miou,
            support_iou: m.support_iou,
        })
        .collect();
    let last = state.trace.last().expect("trace has a final row");
    Ok(RunSummary {
        seed,
        tokens: sim.tokens,
        side: sim.side,
        specs: specs.to_vec(),
        steps: sim.total_steps,
        window: sim.sto_window(),
        guidance: sim.guidance,
        total_updates: state.trace.iter().map(|r| r.updates).sum(),
        refine_updates: state.trace.iter().map(|r| r.refine_iters).sum(),
        solver_iterations: state.trace.iter().map(|r| r.solver_iters).sum(),
        final_centroids: last.centroids.iter().map(|c| (c.i, c.j)).collect(),
        metrics,
    })
}

fn trace_csv(state: &SimState, specs: &[SpatialSpec]) -> String {
    let tokens = state.maps.len();
    let mut s = String::from(
        "step,temperature,omega,alpha,loss,normalized,updates,refine_threshold,refine_iters,backtracks,solver_iters",
    );
    for k in 0..tokens {
        write!(s, ",token{k}_i,token{k}_j").expect("write to string");
    }
    for (k, spec) in specs.iter().enumerate() {
        if spec.relation.is_directional() {
            write!(s, ",spec{k}_centroid_ok").expect("write to string");
        }
    }
    s.push('\n');
    for r in &state.trace {
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.temperature,
            opt(r.omega),
            opt(r.alpha),
            opt(r.loss),
            opt(r.normalized),
            r.updates,
            opt(r.refine_threshold),
            r.refine_iters,
            r.backtracks,
            r.solver_iters
        )
        .expect("write to string");
        for c in &r.centroids {
            write!(s, ",{},{}", c.i, c.j).expect("write to string");
        }
        for spec in specs.iter().filter(|s| s.relation.is_directional()) {
            let ok =
                crate::eval::centroid_verdict(r.centroids[spec.source], r.centroids[spec.reference], spec.relation);
            write!(s, ",{ok}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

/// Runs every seed and writes `seed_<s>/` under `out`: `summary.json`,
/// `trace.csv`, `maps/token_<k>.csv` and, when enabled, `pgm/`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut sim = cfg.sim_config(seed);
        sim.record_maps = cfg.export.dump_pgm;
        let specs = cfg.specs_for(seed);
        let state = run(&specs, &sim)?;
        runs.push((seed, specs, state));
    }
    for (seed, specs, state) in &runs {
        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(dir.join("maps"))?;
        write_json(&dir.join("summary.json"), &summarize(*seed, cfg, specs, state)?)?;
        fs::write(dir.join("trace.csv"), trace_csv(state, specs))?;
        for (k, m) in state.maps.iter().enumerate() {
            io::write_grid(&dir.join("maps").join(format!("token_{k}.csv")), m)?;
        }
        if cfg.export.dump_pgm {
            fs::create_dir_all(dir.join("pgm"))?;
            for (t, maps) in state.history.iter().enumerate() {
                for (k, m) in maps.iter().enumerate() {
                    io::write_pgm(&dir.join("pgm").join(format!("step_{t:03}_token_{k}.pgm")), m)?;
                }
            }
        }
    }
    Ok(())
}

/// One labelled configuration of a sweep axis.
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

pub fn axis_variants(base: &ExperimentConfig, axis: Axis) -> Vec<Variant> {
    let with = |label: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant {
            label: label.to_string(),
            config,
        }
    };
    match axis {
        Axis::Window => {
            let mut v = vec![with("A0 none", &|c| c.sim.guidance = false)];
            for (label, w) in [
                ("A1 18-24", (18, 24)),
                ("A2 12-24", (12, 24)),
                ("A3 6-24", (6, 24)),
                ("A4 0-24", (0, 24)),
                ("E1 0-6", (0, 6)),
                ("E2 0-12", (0, 12)),
                ("E3 0-18", (0, 18)),
            ] {
                v.push(with(label, &|c| c.sim.window = Some(w)));
            }
            v
        }
        Axis::Omega => {
            let mut v: Vec<Variant> = [1.0, 50.0, 100.0]
                .into_iter()
                .map(|w| {
                    with(&format!("fixed {w}"), &|c| {
                        c.omega = OmegaSchedule {
                            mode: crate::cost::OmegaMode::Fixed(w),
                            ..c.omega
                        }
                    })
                })
                .collect();
            v.push(with("dynamic", &|c| c.omega.mode = crate::cost::OmegaMode::Dynamic));
            v
        }
        Axis::Cost => CostVariant::ALL
            .into_iter()
            .map(|cv| with(cv.label(), &|c| c.cost.variant = cv))
            .collect(),
    }
}

#[derive(Debug, Serialize)]
struct AggregateRow<'a> {
    variant: &'a str,
    #[serde(flatten)]
    aggregate: Aggregate,
}

const METRIC_COLUMNS: &str = "relation,centroid_ok,compbench_ok,oa_a,oa_b,visor_uncond,visor_cond,miou,support_iou";

fn metric_cells(m: &RunMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.judgment.relation,
        m.judgment.centroid_ok,
        m.judgment.compbench_ok,
        m.oa_a,
        m.oa_b,
        m.visor_uncond,
        m.visor_cond.map(|b| b.to_string()).unwrap_or_default(),
        m.judgment.miou,
        m.support_iou
    )
}

const AGGREGATE_COLUMNS: &str = "runs,centroid_rate,compbench_rate,oa_rate,visor_uncond,visor_cond,visor_1,visor_2,visor_3,visor_4,mean_miou,mean_support_iou";

fn aggregate_cells(a: &Aggregate) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        a.runs,
        a.centroid_rate,
        a.compbench_rate,
        a.oa_rate,
        a.visor_uncond,
        opt(a.visor_cond),
        a.visor_1,
        a.visor_2,
        a.visor_3,
        a.visor_4,
        a.mean_miou,
        a.mean_support_iou
    )
}

/// Runs every variant of `axis` over every seed. Writes `sweep_rows.csv`,
/// `sweep_aggregate.csv` and `sweep_aggregate.json`.
pub fn cmd_sweep(base: &ExperimentConfig, axis: Axis, out: &Path, jobs: usize) -> Result<()> {
    let variants = axis_variants(base, axis);
    for v in &variants {
        v.config.validate()?;
    }
    let cells: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| base.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<Vec<(usize, RunMetrics)>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, seed)| {
                let cfg = &variants[v].config;
                let specs = cfg.specs_for(seed);
                let state = run(&specs, &cfg.sim_config(seed))?;
                spec_metrics(&state.maps, &specs)
            })
            .collect()
    });

    let mut rows = format!("variant,seed,spec,{METRIC_COLUMNS}\n");
    let mut per_variant: Vec<Vec<RunMetrics>> = vec![Vec::new(); variants.len()];
    for (&(v, seed), res) in cells.iter().zip(results) {
        for (k, m) in res? {
            writeln!(rows, "{},{seed},{k},{}", variants[v].label, metric_cells(&m)).expect("write to string");
            per_variant[v].push(m);
        }
    }
    let mut agg_csv = format!("variant,{AGGREGATE_COLUMNS}\n");
    let mut agg_json = Vec::with_capacity(variants.len());
    for (v, runs) in variants.iter().zip(&per_variant) {
        let a = aggregate(runs)?;
        writeln!(agg_csv, "{},{}", v.label, aggregate_cells(&a)).expect("write to string");
        agg_json.push(AggregateRow {
            variant: &v.label,
            aggregate: a,
        });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep_rows.csv"), rows)?;
    fs::write(out.join("sweep_aggregate.csv"), agg_csv)?;
    write_json(&out.join("sweep_aggregate.json"), &agg_json)
}

fn run_dirs(trace_dir: &Path) -> Result<Vec<PathBuf>> {
    if trace_dir.join("summary.json").is_file() {
        return Ok(vec![trace_dir.to_path_buf()]);
    }
    let entries = fs::read_dir(trace_dir).map_err(|e| Error::Parse(format!("{}: {e}", trace_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Parse(format!(
            "{} holds no simulate output",
            trace_dir.display()
        )));
    }
    Ok(dirs)
}

/// Scores final maps under `trace_dir`; writes `metrics.csv` and
/// `metrics.json` to `out`.
pub fn cmd_eval(trace_dir: &Path, out: &Path) -> Result<()> {
    let mut rows = format!("run,seed,spec,{METRIC_COLUMNS}\n");
    let mut all = Vec::new();
    for dir in run_dirs(trace_dir)? {
        let text = fs::read_to_string(dir.join("summary.json")).map_err(|e| Error::Parse(e.to_string()))?;
        let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let maps = (0..summary.tokens)
            .map(|k| io::read_grid(&dir.join("maps").join(format!("token_{k}.csv"))))
            .collect::<Result<Vec<_>>>()?;
        for spec in &summary.specs {
            spec.validate(maps.len()).map_err(Error::Parse)?;
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (k, m) in spec_metrics(&maps, &summary.specs)? {
            writeln!(rows, "{name},{},{k},{}", summary.seed, metric_cells(&m)).expect("write to string");
            all.push(m);
        }
    }
    let agg = aggregate(&all)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), rows)?;
    write_json(&out.join("metrics.json"), &agg)
}
