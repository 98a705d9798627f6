//! `airways` — command-line front end for air-highway placement and platoon
//! simulation.
//!
//! Subcommands:
//!
//! * `highways place` — solve the Eikonal equation over a cost map, extract
//!   cost-minimizing paths to one or more destinations, and sparsify them
//!   into a waypoint/edge graph.
//! * `brs compute` — solve a backward-reachability problem for one of the
//!   supported dynamics and persist the value-function slices.
//! * `sim run` — run a scenario file through the platoon engine and write
//!   trajectories, events, and the separation report.
//! * `report` — recompute and print the separation report for a finished run.
//!
//! Exit codes: 0 on success, 1 on a domain error (bad input data, solver
//! failure), 2 on a usage error (unknown flag, malformed argument). Every
//! command echoes the fully resolved configuration beside its outputs so a
//! run can be reproduced from its artifacts alone. Artifacts are written to a
//! temporary file and renamed into place; for reachable sets the index file
//! is renamed last and is the commit point.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use airways_core::costmap::CostMap;
use airways_core::eikonal::{extract_path, path_cost, solve_fmm, FmmOptions};
use airways_core::highways::{
    build_graph, cluster_waypoints, sparsification_deviation, sparsify_by_heading, GraphDocument,
    Waypoint,
};
use airways_core::reachability::{
    implicit_surface, solve_hji, AxisSpec, DynamicsKind, DynamicsSpec, Mode as BrsMode, TargetSpec,
};
use airways_core::sim::{
    check_separation, compute_brs_bundle, emit_outputs, run_scenario, BrsGridConfig,
    ScenarioConfig, TrajectoryRecord,
};

#[derive(Parser)]
#[command(
    name = "airways",
    version,
    about = "Air-highway placement and UAV platoon simulation"
)]
struct Cli {
    /// Verbosity of progress messages on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, PartialOrd, ValueEnum)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Air-highway placement over a cost map.
    #[command(subcommand)]
    Highways(HighwaysCmd),
    /// Backward-reachable-set computation.
    #[command(subcommand)]
    Brs(BrsCmd),
    /// Scenario simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Summarize a finished simulation run.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum HighwaysCmd {
    /// Solve the Eikonal equation and emit a waypoint/edge graph.
    Place(PlaceArgs),
}

#[derive(Subcommand)]
enum BrsCmd {
    /// Solve one backward-reachability problem and persist the result.
    Compute(BrsComputeArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario and write its artifacts.
    Run(SimRunArgs),
}

// ---------------------------------------------------------------------------
// highways place
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlaceArgs {
    /// Cost-map raster (CSV, one row per y index).
    #[arg(long)]
    costmap: PathBuf,
    /// Metadata sidecar (TOML). Defaults to the raster path with a `.toml`
    /// extension.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Origin "x,y" in map coordinates.
    #[arg(long, value_parser = parse_point)]
    origin: [f64; 2],
    /// Destination "x,y"; repeat the flag for multiple destinations.
    #[arg(long, required = true, value_parser = parse_point)]
    dest: Vec<[f64; 2]>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Placement parameter file (TOML); flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Internal solver grid refinement factor.
    #[arg(long)]
    refine: Option<usize>,
    /// Exact-initialization ball radius around the origin, in refined cells.
    #[arg(long)]
    seed_ball: Option<usize>,
    /// Descent step as a fraction of the native grid spacing.
    #[arg(long)]
    step_frac: Option<f64>,
    /// Origin capture radius as a multiple of the native grid spacing.
    #[arg(long)]
    capture_frac: Option<f64>,
    /// Heading-change threshold for keeping a waypoint, degrees.
    #[arg(long)]
    heading_tol_deg: Option<f64>,
    /// Waypoint clustering radius as a multiple of the native grid spacing.
    #[arg(long)]
    cluster_frac: Option<f64>,
    /// Highway speed assigned to every edge, m/s.
    #[arg(long)]
    speed: Option<f64>,
}

/// Tunables of the placement pipeline, all overridable from the command
/// line. Fractions are in units of the native grid spacing so one file works
/// across map resolutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlacementParams {
    refine: usize,
    seed_ball: usize,
    step_frac: f64,
    capture_frac: f64,
    heading_tol_deg: f64,
    cluster_frac: f64,
    speed: f64,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            refine: 3,
            seed_ball: 10,
            step_frac: 0.4,
            capture_frac: 1.5,
            heading_tol_deg: 10.0,
            cluster_frac: 2.0,
            speed: 10.0,
        }
    }
}

/// Per-run placement record written beside the outputs.
#[derive(Serialize)]
struct PlacementResolved<'a> {
    costmap: String,
    meta: String,
    origin: [f64; 2],
    dests: &'a [[f64; 2]],
    params: &'a PlacementParams,
}

fn run_place(args: &PlaceArgs, log: LogLevel) -> Result<()> {
    let meta = args
        .meta
        .clone()
        .unwrap_or_else(|| args.costmap.with_extension("toml"));
    let mut params: PlacementParams = load_toml_or_default(args.config.as_deref())?;
    override_opt(&mut params.refine, args.refine);
    override_opt(&mut params.seed_ball, args.seed_ball);
    override_opt(&mut params.step_frac, args.step_frac);
    override_opt(&mut params.capture_frac, args.capture_frac);
    override_opt(&mut params.heading_tol_deg, args.heading_tol_deg);
    override_opt(&mut params.cluster_frac, args.cluster_frac);
    override_opt(&mut params.speed, args.speed);

    let map = CostMap::load(&args.costmap, &meta)
        .with_context(|| format!("loading cost map {:?} + {:?}", args.costmap, meta))?;
    let h = map.grid.spacing();
    let h_min = h[0].min(h[1]);

    info(log, &format!("solving |∇V| = c from {:?}", args.origin));
    let sol = solve_fmm(
        &map,
        args.origin,
        &FmmOptions {
            refine: params.refine,
            seed_ball: params.seed_ball,
        },
    )?;

    fs::create_dir_all(&args.out)?;
    let mut lists: Vec<Vec<Waypoint>> = Vec::new();
    let mut summary = String::from("dest_x,dest_y,value,path_cost,waypoints,deviation\n");
    for (k, &dest) in args.dest.iter().enumerate() {
        let path = extract_path(
            &sol,
            dest,
            params.step_frac * h_min,
            params.capture_frac * h_min,
        )?;
        let sparse = sparsify_by_heading(&path, params.heading_tol_deg.to_radians(), k)?;
        let clustered = cluster_waypoints(&sparse, params.cluster_frac * h_min)?;
        let deviation = sparsification_deviation(&path, &clustered);
        let quad = path_cost(&map, &path)?;
        let value = sol.value_at(dest)?;
        let _ = writeln!(
            summary,
            "{},{},{:.6},{:.6},{},{:.6}",
            dest[0],
            dest[1],
            value,
            quad,
            clustered.len(),
            deviation
        );

        let mut body = String::from("x,y\n");
        for p in &path.points {
            let _ = writeln!(body, "{:.6},{:.6}", p[0], p[1]);
        }
        write_atomic(&args.out.join(format!("path_{k:03}.csv")), body.as_bytes())?;
        info(
            log,
            &format!(
                "dest {:?}: V = {value:.4}, {} waypoints, deviation {deviation:.4}",
                dest,
                clustered.len()
            ),
        );
        lists.push(clustered);
    }

    let graph = build_graph(&lists, params.speed)?;
    let doc = GraphDocument::from(&graph);
    write_atomic(&args.out.join("graph.toml"), doc.to_string().as_bytes())?;
    write_atomic(&args.out.join("placement_summary.csv"), summary.as_bytes())?;

    let resolved = PlacementResolved {
        costmap: args.costmap.display().to_string(),
        meta: meta.display().to_string(),
        origin: args.origin,
        dests: &args.dest,
        params: &params,
    };
    write_atomic(
        &args.out.join("placement_resolved.toml"),
        toml::to_string_pretty(&resolved)?.as_bytes(),
    )?;
    info(
        log,
        &format!(
            "graph: {} waypoints, {} edges -> {:?}",
            graph.waypoints.len(),
            graph.edges.len(),
            args.out.join("graph.toml")
        ),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// brs compute
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DynamicsArg {
    Single4d,
    Relative4d,
    Augrel6d,
}

impl From<DynamicsArg> for DynamicsKind {
    fn from(d: DynamicsArg) -> Self {
        match d {
            DynamicsArg::Single4d => DynamicsKind::Single4D,
            DynamicsArg::Relative4d => DynamicsKind::Relative4D,
            DynamicsArg::Augrel6d => DynamicsKind::AugRelative6D,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Goal,
    Game,
}

impl From<ModeArg> for BrsMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Goal => BrsMode::Goal,
            ModeArg::Game => BrsMode::Game,
        }
    }
}

#[derive(Args)]
struct BrsComputeArgs {
    /// Dynamics to solve under; overrides the target file's entry.
    #[arg(long, value_enum)]
    dynamics: Option<DynamicsArg>,
    /// Problem description file (TOML): target set, grid, bounds.
    #[arg(long)]
    target: PathBuf,
    /// Horizon T in seconds; overrides the target file's entry.
    #[arg(long)]
    horizon: Option<f64>,
    /// Goal (reach-within) or game (avoid a worst-case pursuer); overrides
    /// the target file's entry.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Spacing of stored time slices, seconds; overrides the target file's
    /// entry. Defaults to horizon/20.
    #[arg(long)]
    store_interval: Option<f64>,
    /// Output index file; value slices are written beside it.
    #[arg(long)]
    out: PathBuf,
}

/// One grid axis of the reachability problem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridAxis {
    min: f64,
    max: f64,
    nodes: usize,
}

/// On-disk description of a reachability problem. Command-line flags
/// override the corresponding entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BrsProblem {
    /// "single4d", "relative4d", or "augrel6d".
    dynamics: Option<String>,
    /// "goal" or "game".
    mode: Option<String>,
    horizon: Option<f64>,
    store_interval: Option<f64>,
    #[serde(default = "default_u_max")]
    u_max_i: f64,
    #[serde(default)]
    u_max_j: f64,
    #[serde(default = "default_v_max")]
    v_max: f64,
    target: TargetSpec,
    grid: Vec<GridAxis>,
}

fn default_u_max() -> f64 {
    3.0
}

fn default_v_max() -> f64 {
    20.0
}

fn parse_dynamics(name: &str) -> Result<DynamicsKind> {
    Ok(match name {
        "single4d" => DynamicsKind::Single4D,
        "relative4d" => DynamicsKind::Relative4D,
        "augrel6d" | "augrelative6d" => DynamicsKind::AugRelative6D,
        other => bail!("unknown dynamics `{other}` (expected single4d, relative4d, or augrel6d)"),
    })
}

fn parse_mode(name: &str) -> Result<BrsMode> {
    Ok(match name {
        "goal" => BrsMode::Goal,
        "game" => BrsMode::Game,
        other => bail!("unknown mode `{other}` (expected goal or game)"),
    })
}

fn run_brs_compute(args: &BrsComputeArgs, log: LogLevel) -> Result<()> {
    let text = fs::read_to_string(&args.target)
        .with_context(|| format!("reading problem file {:?}", args.target))?;
    let mut problem: BrsProblem =
        toml::from_str(&text).with_context(|| format!("parsing {:?}", args.target))?;

    if let Some(d) = args.dynamics {
        problem.dynamics = Some(match d {
            DynamicsArg::Single4d => "single4d".into(),
            DynamicsArg::Relative4d => "relative4d".into(),
            DynamicsArg::Augrel6d => "augrel6d".into(),
        });
    }
    if let Some(m) = args.mode {
        problem.mode = Some(match m {
            ModeArg::Goal => "goal".into(),
            ModeArg::Game => "game".into(),
        });
    }
    override_opt_opt(&mut problem.horizon, args.horizon);
    override_opt_opt(&mut problem.store_interval, args.store_interval);

    let kind = parse_dynamics(
        problem
            .dynamics
            .as_deref()
            .ok_or_else(|| anyhow!("dynamics not given: pass --dynamics or set it in the file"))?,
    )?;
    let mode = parse_mode(problem.mode.as_deref().unwrap_or("goal"))?;
    let horizon = problem
        .horizon
        .ok_or_else(|| anyhow!("horizon not given: pass --horizon or set it in the file"))?;
    let store = problem.store_interval.unwrap_or(horizon / 20.0);

    let dynamics = DynamicsSpec::new(kind, problem.u_max_i, problem.u_max_j, problem.v_max)?;
    let axes: Vec<AxisSpec> = problem
        .grid
        .iter()
        .map(|a| AxisSpec::new(a.min, a.max, a.nodes))
        .collect();
    let l = implicit_surface(&problem.target, &axes)?;
    info(
        log,
        &format!("solving {kind} {mode} over {} axes to T = {horizon}", axes.len()),
    );
    let brs = solve_hji(&dynamics, mode, &l, horizon, store)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    brs.save(&args.out)?;

    let resolved_path = sibling_with_suffix(&args.out, "_config.toml");
    write_atomic(&resolved_path, toml::to_string_pretty(&problem)?.as_bytes())?;
    info(log, &format!("wrote {:?}", args.out));
    Ok(())
}

// ---------------------------------------------------------------------------
// sim run
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimRunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Reachability grid configuration (TOML); defaults are used when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Override the scenario duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
}

fn run_sim(args: &SimRunArgs, log: LogLevel) -> Result<()> {
    let text = fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading scenario {:?}", args.scenario))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).with_context(|| format!("parsing {:?}", args.scenario))?;
    override_opt(&mut cfg.duration, args.duration);
    let grids: BrsGridConfig = load_toml_or_default(args.grid.as_deref())?;

    info(
        log,
        &format!(
            "precomputing reachable sets ({} nodes per axis)",
            grids.nodes
        ),
    );
    let bundle = compute_brs_bundle(&cfg.params, &grids, Some([cfg.params.v_hw, 0.0]))?;
    info(log, &format!("running `{}` for {} s", cfg.name, cfg.duration));
    let output = run_scenario(&cfg, &bundle)?;
    emit_outputs(&output, &args.out)?;
    write_atomic(
        &args.out.join("scenario_resolved.toml"),
        toml::to_string_pretty(&cfg)?.as_bytes(),
    )?;
    write_atomic(
        &args.out.join("grid_resolved.toml"),
        toml::to_string_pretty(&grids)?.as_bytes(),
    )?;
    info(
        log,
        &format!(
            "{} trajectory rows, {} events, {} separation violations -> {:?}",
            output.rows.len(),
            output.events.records.len(),
            output.separation.total_violations,
            args.out
        ),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `sim run`.
    #[arg(long)]
    run: PathBuf,
    /// Separation half-width d in meters.
    #[arg(long, default_value_t = 5.0)]
    d: f64,
}

fn intern_mode(tag: &str) -> &'static str {
    match tag {
        "free" => "free",
        "leader" => "leader",
        "follower" => "follower",
        "faulty" => "faulty",
        _ => "unknown",
    }
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let path = args.run.join("trajectories.csv");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading trajectories {path:?}"))?;
    let mut rows: Vec<TrajectoryRecord> = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            bail!("line {}: expected 9 columns, found {}", lineno + 1, cols.len());
        }
        let f = |k: usize| -> Result<f64> {
            cols[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("line {}: bad number `{}`", lineno + 1, cols[k]))
        };
        rows.push(TrajectoryRecord {
            t: f(0)?,
            vehicle: cols[1]
                .trim()
                .parse()
                .map_err(|_| anyhow!("line {}: bad vehicle id `{}`", lineno + 1, cols[1]))?,
            mode: intern_mode(cols[2].trim()),
            p: [f(3)?, f(4)?],
            v: [f(5)?, f(6)?],
            u: [f(7)?, f(8)?],
        });
    }
    if rows.is_empty() {
        bail!("{path:?} holds no trajectory rows");
    }
    let report = check_separation(&rows, args.d);
    let mut out = String::new();
    let t0 = rows.first().map(|r| r.t).unwrap_or(0.0);
    let t1 = rows.last().map(|r| r.t).unwrap_or(0.0);
    let mut ids: Vec<usize> = rows.iter().map(|r| r.vehicle).collect();
    ids.sort_unstable();
    ids.dedup();
    let _ = writeln!(out, "run: {}", args.run.display());
    let _ = writeln!(out, "vehicles: {}   t: {t0:.2} .. {t1:.2} s", ids.len());
    out.push_str(&report.lines());
    write_atomic(&args.run.join("report.txt"), out.as_bytes())?;
    print!("{out}");
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"x,y\", got `{s}`"));
    }
    let x: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| format!("bad x coordinate `{}`", parts[0]))?;
    let y: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| format!("bad y coordinate `{}`", parts[1]))?;
    Ok([x, y])
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn override_opt_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn load_toml_or_default<T: Default + for<'d> Deserialize<'d>>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config file {p:?}"))?;
            toml::from_str(&text).with_context(|| format!("parsing {p:?}"))
        }
    }
}

/// `foo/bar.toml` + `_config.toml` -> `foo/bar_config.toml`.
fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Write via a temporary file in the same directory plus rename, so readers
/// never observe a half-written artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{stem}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {tmp:?}"))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {path:?}"))?;
    Ok(())
}

fn info(log: LogLevel, msg: &str) {
    if log >= LogLevel::Info {
        eprintln!("airways: {msg}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Highways(HighwaysCmd::Place(a)) => run_place(a, cli.log_level),
        Command::Brs(BrsCmd::Compute(a)) => run_brs_compute(a, cli.log_level),
        Command::Sim(SimCmd::Run(a)) => run_sim(a, cli.log_level),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("airways: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
