//! Command-line front end behind the `aacluster` binary.
//!
//! Each subcommand resolves a JSON run config (from `--config`, then flag
//! overrides), writes it to `config.json` in the output directory, and writes
//! its results next to it. Exit codes: 0 success, 1 runtime failure, 2
//! configuration error.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aden::{deep_anneal, AdenConfig, TrainConfig};
use crate::anneal::{anneal, AnnealConfig};
use crate::autonomy::{Autonomy, TabularAutonomy};
use crate::bench::{parse_grid, run_benchmark, write_table_csv, BenchConfig, BenchRun, GapReport, Method};
use crate::error::Error;
use crate::io::{write_phase_csv, write_trace_csv, write_training_log, write_transitions_csv, Solution};
use crate::model::{objective_d, Dataset};
use crate::phase::{detect_transitions, mark_transitions, phase_scan, DetectConfig};
use crate::scenarios::{load_geocsv, Preset};
use crate::tabular::{learn_tabular, RlConfig, SimulatedEnv};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "AACLUSTER_OUT";

#[derive(Debug, Parser)]
#[command(name = "aacluster", version, about = "Clustering with autonomous entities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Anneal with a known autonomy model.
    Solve(SolveArgs),
    /// Anneal and report critical temperatures and detected transitions.
    PhaseScan(ScanArgs),
    /// Learn centers from sampled overrides only.
    Learn(LearnArgs),
    /// Objective gaps over a grid of autonomy parameters.
    Benchmark(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to $AACLUSTER_OUT, then ./aacluster-out.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data generation, annealing noise, and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AutonomyKind {
    Identity,
    Uniform,
    Honor,
    Parametric,
    Tabular,
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    /// Dataset CSV with header `x0,...,x{d-1}[,weight]`.
    #[arg(long, conflicts_with_all = ["geo", "preset"])]
    pub data: Option<PathBuf>,
    /// Coordinate CSV rescaled to the unit box.
    #[arg(long, conflicts_with = "preset")]
    pub geo: Option<PathBuf>,
    /// Built-in dataset: blobs4 or grid16.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub autonomy: Option<AutonomyKind>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long, visible_alias = "T")]
    pub temperature: Option<f64>,
    /// Probability of following the prescription.
    #[arg(long)]
    pub honor: Option<f64>,
    /// Override table with rows `i,j,k,p`.
    #[arg(long)]
    pub autonomy_file: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Include the soft policy in solution.json.
    #[arg(long)]
    pub soft_policy: bool,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnMethod {
    Tabular,
    Aden,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum)]
    pub method: Option<LearnMethod>,
    /// Full-size network and training budget instead of the small defaults.
    #[arg(long)]
    pub paper_scale: bool,
    /// Also log estimation errors against the simulated model.
    #[arg(long)]
    pub report_error: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON list of `[kappa, gamma, zeta, T]` tuples or objects with those keys.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Comma-separated subset of ground_truth, ignored, tabular_rl, aden.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Worker threads across grid rows.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Where the points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub preset: Option<String>,
    pub path: Option<PathBuf>,
    /// Treat `path` as a coordinate file and rescale it.
    pub geo: bool,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            preset: Some("blobs4".into()),
            path: None,
            geo: false,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> crate::Result<Dataset> {
        match (&self.path, &self.preset) {
            (Some(p), _) if self.geo => Ok(load_geocsv(p)?.data),
            (Some(p), _) => Dataset::load_csv(p),
            (None, Some(name)) => Preset::parse(name)?.generate(self.seed),
            (None, None) => Err(Error::Config("data needs a preset or a path".into())),
        }
    }

    fn preset_k(&self) -> Option<usize> {
        match (&self.path, &self.preset) {
            (None, Some(name)) => Preset::parse(name).ok().map(|p| p.default_k()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AutonomySpec {
    Identity,
    Uniform,
    Honor {
        honor: f64,
    },
    Parametric {
        kappa: f64,
        gamma: f64,
        zeta: f64,
        temperature: f64,
    },
    Tabular {
        path: PathBuf,
    },
}

impl Default for AutonomySpec {
    fn default() -> Self {
        AutonomySpec::Identity
    }
}

impl AutonomySpec {
    pub fn build(&self, n: usize, k: usize) -> crate::Result<Autonomy> {
        let a = match self {
            AutonomySpec::Identity => Autonomy::Identity,
            AutonomySpec::Uniform => Autonomy::uniform(k),
            AutonomySpec::Honor { honor } => Autonomy::honor(*honor)?,
            AutonomySpec::Parametric {
                kappa,
                gamma,
                zeta,
                temperature,
            } => Autonomy::parametric(*kappa, *gamma, *zeta, *temperature)?,
            AutonomySpec::Tabular { path } => Autonomy::Tabular(TabularAutonomy::load_csv(path, n, k)?),
        };
        a.check(n, k)?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub data: DataSpec,
    pub autonomy: AutonomySpec,
    pub anneal: AnnealConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            data: DataSpec::default(),
            autonomy: AutonomySpec::default(),
            anneal: AnnealConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub data: DataSpec,
    pub autonomy: AutonomySpec,
    pub anneal: AnnealConfig,
    /// Detection thresholds; scaled to the data diameter when absent.
    pub detect: Option<DetectConfig>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            data: DataSpec::default(),
            autonomy: AutonomySpec::default(),
            anneal: AnnealConfig::default(),
            detect: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub method: LearnMethod,
    pub data: DataSpec,
    /// Model used to simulate overrides; the learners only sample from it.
    pub autonomy: AutonomySpec,
    pub anneal: AnnealConfig,
    pub rl: RlConfig,
    pub train: TrainConfig,
    pub aden: AdenConfig,
    pub report_error: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            method: LearnMethod::Tabular,
            data: DataSpec::default(),
            autonomy: AutonomySpec::default(),
            anneal: AnnealConfig::default(),
            rl: RlConfig::default(),
            train: TrainConfig::desk(),
            aden: AdenConfig::desk(),
            report_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub grid: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Seed for rows that do not set their own.
    pub seed: u64,
    pub bench: BenchConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            grid: None,
            methods: vec![Method::GroundTruth, Method::Ignored, Method::Aden],
            seed: 0,
            bench: BenchConfig::default(),
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: msg.to_string(),
        }
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 1,
            message: msg.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: Error) -> CliError {
    CliError::config(e)
}

fn runtime_err(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::PositionDependentAutonomy(_) => CliError::config(e),
        _ => CliError::runtime(e),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn out_dir(common: &CommonArgs) -> CliResult<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("aacluster-out"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_config<T: Serialize>(dir: &Path, cfg: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(cfg).map_err(CliError::runtime)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text).map_err(CliError::runtime)
}

fn apply_data(data: &mut DataSpec, p: &ProblemArgs, seed: Option<u64>) {
    if let Some(path) = &p.data {
        data.path = Some(path.clone());
        data.geo = false;
    }
    if let Some(path) = &p.geo {
        data.path = Some(path.clone());
        data.geo = true;
    }
    if let Some(preset) = &p.preset {
        data.preset = Some(preset.clone());
        data.path = None;
    }
    if let Some(s) = seed {
        data.seed = s;
    }
}

fn apply_autonomy(spec: &mut AutonomySpec, p: &ProblemArgs) -> CliResult<()> {
    if let Some(kind) = p.autonomy {
        *spec = match kind {
            AutonomyKind::Identity => AutonomySpec::Identity,
            AutonomyKind::Uniform => AutonomySpec::Uniform,
            AutonomyKind::Honor => AutonomySpec::Honor { honor: 1.0 },
            AutonomyKind::Parametric => AutonomySpec::Parametric {
                kappa: 0.0,
                gamma: 0.0,
                zeta: 0.0,
                temperature: 1.0,
            },
            AutonomyKind::Tabular => AutonomySpec::Tabular {
                path: p
                    .autonomy_file
                    .clone()
                    .ok_or_else(|| CliError::config("--autonomy tabular needs --autonomy-file"))?,
            },
        };
    }
    let parametric_flags = p.kappa.is_some() || p.gamma.is_some() || p.zeta.is_some() || p.temperature.is_some();
    match spec {
        AutonomySpec::Parametric {
            kappa,
            gamma,
            zeta,
            temperature,
        } => {
            *kappa = p.kappa.unwrap_or(*kappa);
            *gamma = p.gamma.unwrap_or(*gamma);
            *zeta = p.zeta.unwrap_or(*zeta);
            *temperature = p.temperature.unwrap_or(*temperature);
        }
        _ if parametric_flags => {
            return Err(CliError::config("--kappa, --gamma, --zeta and --temperature need --autonomy parametric"))
        }
        _ => {}
    }
    match spec {
        AutonomySpec::Honor { honor } => *honor = p.honor.unwrap_or(*honor),
        _ if p.honor.is_some() => return Err(CliError::config("--honor needs --autonomy honor")),
        _ => {}
    }
    if let AutonomySpec::Tabular { path } = spec {
        if let Some(f) = &p.autonomy_file {
            *path = f.clone();
        }
    } else if p.autonomy_file.is_some() {
        return Err(CliError::config("--autonomy-file needs --autonomy tabular"));
    }
    Ok(())
}

fn apply_anneal(cfg: &mut AnnealConfig, data: &DataSpec, p: &ProblemArgs, seed: Option<u64>, from_file: bool) {
    match p.k {
        Some(k) => cfg.k = k,
        None if !from_file => {
            if let Some(k) = data.preset_k() {
                cfg.k = k;
            }
        }
        None => {}
    }
    if let Some(v) = p.beta_min {
        cfg.beta_min = v;
    }
    if let Some(v) = p.beta_max {
        cfg.beta_max = v;
    }
    if let Some(v) = p.tau {
        cfg.tau = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

struct Problem {
    data: Dataset,
    autonomy: Autonomy,
}

fn build_problem(data: &DataSpec, autonomy: &AutonomySpec, k: usize) -> CliResult<Problem> {
    let data = data.load().map_err(config_err)?;
    let autonomy = autonomy.build(data.len(), k).map_err(config_err)?;
    Ok(Problem { data, autonomy })
}

pub fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let c = &args.common;
    let mut cfg: SolveConfig = load_config(c.config.as_deref())?;
    apply_data(&mut cfg.data, &args.problem, c.seed);
    apply_autonomy(&mut cfg.autonomy, &args.problem)?;
    apply_anneal(&mut cfg.anneal, &cfg.data, &args.problem, c.seed, c.config.is_some());
    cfg.anneal.validate().map_err(config_err)?;
    let pb = build_problem(&cfg.data, &cfg.autonomy, cfg.anneal.k)?;
    let dir = out_dir(c)?;
    write_config(&dir, &cfg)?;

    let mut res = anneal(&pb.data, &pb.autonomy, &cfg.anneal).map_err(runtime_err)?;
    let events = detect_transitions(&res.trace, &DetectConfig::for_diameter(pb.data.diameter()));
    mark_transitions(&mut res.trace, &events);
    write_trace_csv(create(&dir, "trace.csv")?, &res.trace, None).map_err(runtime_err)?;
    let mut sol = Solution::new(&res.final_state.clusters, &res.hardened, Some(res.hard_distortion));
    if args.soft_policy {
        sol = sol.with_policy(&res.final_state.policy);
    }
    sol.write_json(create(&dir, "solution.json")?).map_err(runtime_err)?;
    eprintln!(
        "solve: {} stages, hard distortion {:.6e}, {} transitions -> {}",
        res.trace.len(),
        res.hard_distortion,
        events.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_phase_scan(args: &ScanArgs) -> CliResult<()> {
    let c = &args.common;
    let mut cfg: ScanConfig = load_config(c.config.as_deref())?;
    apply_data(&mut cfg.data, &args.problem, c.seed);
    apply_autonomy(&mut cfg.autonomy, &args.problem)?;
    apply_anneal(&mut cfg.anneal, &cfg.data, &args.problem, c.seed, c.config.is_some());
    cfg.anneal.validate().map_err(config_err)?;
    let pb = build_problem(&cfg.data, &cfg.autonomy, cfg.anneal.k)?;
    if pb.autonomy.depends_on_y() {
        return Err(CliError::config(
            "phase-scan needs an override model that does not depend on cluster positions \
             (parametric autonomy with kappa > 0 and gamma or zeta > 0 does)",
        ));
    }
    let detect = *cfg.detect.get_or_insert(DetectConfig::for_diameter(pb.data.diameter()));
    let dir = out_dir(c)?;
    write_config(&dir, &cfg)?;

    let mut res = anneal(&pb.data, &pb.autonomy, &cfg.anneal).map_err(runtime_err)?;
    let rows = phase_scan(&pb.data, &pb.autonomy, &res.trace, detect.merge_tol).map_err(runtime_err)?;
    let events = detect_transitions(&res.trace, &detect);
    mark_transitions(&mut res.trace, &events);
    write_trace_csv(create(&dir, "trace.csv")?, &res.trace, None).map_err(runtime_err)?;
    write_phase_csv(create(&dir, "phase.csv")?, &rows).map_err(runtime_err)?;
    write_transitions_csv(create(&dir, "transitions.csv")?, &events).map_err(runtime_err)?;
    for ev in &events {
        eprintln!(
            "transition at beta {:.4}: {} -> {} distinct centers",
            ev.beta, ev.distinct_before, ev.distinct_after
        );
    }
    eprintln!("phase-scan: {} transitions -> {}", events.len(), dir.display());
    Ok(())
}

pub fn cmd_learn(args: &LearnArgs) -> CliResult<()> {
    let c = &args.common;
    let mut cfg: LearnConfig = load_config(c.config.as_deref())?;
    if args.paper_scale {
        cfg.train = TrainConfig::paper();
        cfg.aden = AdenConfig::paper();
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    cfg.report_error |= args.report_error;
    let p = &args.problem;
    apply_data(&mut cfg.data, p, c.seed);
    apply_autonomy(&mut cfg.autonomy, p)?;
    apply_anneal(&mut cfg.anneal, &cfg.data, p, c.seed, c.config.is_some());
    if cfg.method == LearnMethod::Aden {
        if let Some(v) = p.beta_min {
            cfg.train.beta_min = v;
        }
        if let Some(v) = p.beta_max {
            cfg.train.beta_max = v;
        }
        if let Some(v) = p.tau {
            cfg.train.tau = v;
        }
        if let Some(s) = c.seed {
            cfg.train.seed = s;
        }
        cfg.train.validate().map_err(config_err)?;
        cfg.aden.validate().map_err(config_err)?;
    } else {
        cfg.rl.validate().map_err(config_err)?;
    }
    cfg.anneal.validate().map_err(config_err)?;
    let pb = build_problem(&cfg.data, &cfg.autonomy, cfg.anneal.k)?;
    let env = SimulatedEnv {
        data: &pb.data,
        autonomy: &pb.autonomy,
    };
    if cfg.method == LearnMethod::Tabular && pb.autonomy.depends_on_y() {
        return Err(CliError::config(
            "tabular learning needs an override model that does not depend on cluster positions",
        ));
    }
    let reference = cfg.report_error.then_some(&pb.autonomy);
    let dir = out_dir(c)?;
    write_config(&dir, &cfg)?;

    let (clusters, hardened, mut trace, q_errors) = match cfg.method {
        LearnMethod::Tabular => {
            let r = learn_tabular(&pb.data, &env, &cfg.anneal, &cfg.rl, reference).map_err(runtime_err)?;
            (r.final_state.clusters, r.hardened, r.trace, r.q_errors)
        }
        LearnMethod::Aden => {
            let r = deep_anneal(&pb.data, &env, cfg.anneal.k, &cfg.train, &cfg.aden, reference).map_err(runtime_err)?;
            write_training_log(create(&dir, "training_log.csv")?, &r.log).map_err(runtime_err)?;
            r.net.params.save(&dir, "aden").map_err(|e| runtime_err(e.into()))?;
            (r.final_state.clusters, r.hardened, r.trace, None)
        }
    };
    let events = detect_transitions(&trace, &DetectConfig::for_diameter(pb.data.diameter()));
    mark_transitions(&mut trace, &events);
    write_trace_csv(create(&dir, "trace.csv")?, &trace, q_errors.as_deref()).map_err(runtime_err)?;
    let d = objective_d(&pb.data, &hardened, &clusters, &pb.autonomy).map_err(runtime_err)?;
    Solution::new(&clusters, &hardened, Some(d))
        .write_json(create(&dir, "solution.json")?)
        .map_err(runtime_err)?;
    eprintln!(
        "learn ({}): distortion under the simulated model {:.6e} -> {}",
        match cfg.method {
            LearnMethod::Tabular => "tabular",
            LearnMethod::Aden => "aden",
        },
        d,
        dir.display()
    );
    Ok(())
}

pub fn cmd_benchmark(args: &BenchArgs) -> CliResult<()> {
    let c = &args.common;
    let mut cfg: BenchmarkConfig = load_config(c.config.as_deref())?;
    if let Some(g) = &args.grid {
        cfg.grid = Some(g.clone());
    }
    if let Some(ms) = &args.methods {
        cfg.methods = ms.iter().map(|m| Method::parse(m)).collect::<crate::Result<_>>().map_err(config_err)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.bench.anneal.seed = s;
        cfg.bench.train.seed = s;
    }
    if args.jobs == 0 {
        return Err(CliError::config("--jobs must be positive"));
    }
    let grid_path = cfg.grid.clone().ok_or_else(|| CliError::config("benchmark needs --grid"))?;
    let text = std::fs::read_to_string(&grid_path)
        .map_err(|e| CliError::config(format!("{}: {e}", grid_path.display())))?;
    let rows = parse_grid(&text).map_err(config_err)?;
    if rows.is_empty() {
        return Err(CliError::config("scenario grid is empty"));
    }
    if cfg.methods.is_empty() {
        return Err(CliError::config("no methods selected"));
    }
    cfg.bench.anneal.validate().map_err(config_err)?;
    cfg.bench.rl.validate().map_err(config_err)?;
    cfg.bench.train.validate().map_err(config_err)?;
    cfg.bench.aden.validate().map_err(config_err)?;
    let scenarios = rows
        .iter()
        .map(|r| r.scenario(cfg.seed))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(config_err)?;
    let dir = out_dir(c)?;
    write_config(&dir, &cfg)?;

    let run_row = |n: usize| run_benchmark(&scenarios[n], &cfg.methods, &cfg.bench);
    let mut results: Vec<Option<crate::Result<BenchRun>>> = (0..scenarios.len()).map(|_| None).collect();
    if args.jobs == 1 {
        for (n, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_row(n));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..args.jobs.min(scenarios.len()) {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if n >= scenarios.len() {
                        break;
                    }
                    let r = run_row(n);
                    done.lock().expect("result lock")[n] = Some(r);
                });
            }
        });
    }

    let mut runs = Vec::new();
    let mut reports: Vec<GapReport> = Vec::new();
    for (n, r) in results.into_iter().enumerate() {
        let p = scenarios[n].params;
        let tag = format!("row {n} (kappa={}, gamma={}, zeta={}, T={})", p.kappa, p.gamma, p.zeta, p.temperature);
        match r.expect("every row runs") {
            Ok(run) => {
                for f in &run.failures {
                    eprintln!("{tag}: {} failed: {}", f.method.as_str(), f.message);
                }
                for rep in &run.reports {
                    eprintln!("{tag}: {} gap {:.2}%", rep.method.as_str(), rep.gap_percent);
                }
                if !run.reports.is_empty() {
                    reports.extend(run.reports.iter().cloned());
                    runs.push(run);
                }
            }
            Err(e) => eprintln!("{tag}: failed: {e}"),
        }
    }
    let mut gaps = create(&dir, "gaps.json")?;
    serde_json::to_writer_pretty(&mut gaps, &reports).map_err(CliError::runtime)?;
    std::io::Write::write_all(&mut gaps, b"\n").map_err(CliError::runtime)?;
    write_table_csv(create(&dir, "table.csv")?, &runs).map_err(runtime_err)?;
    if runs.is_empty() {
        return Err(CliError::runtime("every grid row failed"));
    }
    eprintln!("benchmark: {}/{} rows -> {}", runs.len(), scenarios.len(), dir.display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::PhaseScan(a) => cmd_phase_scan(a),
        Command::Learn(a) => cmd_learn(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
