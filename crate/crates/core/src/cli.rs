//! Command-line front end.
//!
//! Every subcommand reads an optional TOML [`RunConfig`], applies flag
//! overrides, writes its outputs to `--out` (default `out`) and finishes
//! with `manifest.json`: the effective configuration, seed, thread count,
//! tool version and a SHA-256 of each output file. Nothing time- or
//! host-dependent is written, so a rerun with the same configuration and
//! seed reproduces every file byte for byte.
//!
//! Exit codes: 0 success, 1 computational failure, 2 usage or
//! configuration error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cv::grid_search;
use crate::error::{Error, Result};
use crate::evaluate::{compare_models, monte_carlo, write_comparison, write_records, write_table1, LambdaMode, McConfig};
use crate::inference::infer;
use crate::io::{self, RunConfig, Tuning};
use crate::model::{stationarity_check, PanelData};
use crate::optimize::{fit, PenaltyConfig};
use crate::simulate::{make_true_params, simulate_panel};

#[derive(Debug, Parser)]
#[command(name = "stlasso", version, about = "Sparse spatial weight estimation for spatiotemporal panels")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from the lattice DGP.
    Simulate {
        #[arg(long)]
        side: Option<usize>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Fit at a fixed penalty triple.
    Fit {
        #[arg(long)]
        panel: Option<PathBuf>,
        #[command(flatten)]
        lambda: LambdaArgs,
    },
    /// Blocked cross-validation over the penalty grid, then a full fit.
    Cv {
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Monte Carlo study producing a Table-1-shaped summary.
    Mc {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_enum)]
        tuning: Option<TuningArg>,
    },
    /// Post-selection refit with standard errors.
    Infer {
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// MSE/AIC/BIC against OLS and VAR(1).
    Compare {
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Fit to compare; fitted at the configured penalty when absent.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[command(flatten)]
        lambda: LambdaArgs,
    },
    /// Stationarity and feasibility report for a parameter or fit file.
    Check {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Raw station measurements to a panel with a Fourier design.
    Ingest {
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        stations: Option<PathBuf>,
        #[arg(long)]
        completeness: Option<f64>,
    },
}

#[derive(Debug, Args, Clone, Copy)]
pub struct LambdaArgs {
    /// Same value for all three penalties.
    #[arg(long, conflicts_with_all = ["lambda1", "lambda2", "lambda3"])]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
}

impl LambdaArgs {
    fn apply(&self, pen: &mut PenaltyConfig) {
        if let Some(l) = self.lambda {
            *pen = PenaltyConfig { lambda1: l, lambda2: l, lambda3: l };
        }
        pen.lambda1 = self.lambda1.unwrap_or(pen.lambda1);
        pen.lambda2 = self.lambda2.unwrap_or(pen.lambda2);
        pen.lambda3 = self.lambda3.unwrap_or(pen.lambda3);
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TuningArg {
    Cv,
    Fixed,
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    threads: Option<usize>,
    config: &'a RunConfig,
    outputs: Vec<OutputEntry>,
}

/// Collects output files for the manifest.
struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig, threads: Option<usize>) -> Result<()> {
        let mut outputs = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(self.dir.join(f))?;
            outputs.push(OutputEntry {
                file: f.clone(),
                bytes: bytes.len() as u64,
                sha256: format!("{:x}", Sha256::digest(&bytes)),
            });
        }
        // the output location is not part of what a run computes
        let echo = RunConfig { out: None, ..cfg.clone() };
        let manifest = Manifest {
            tool: "stlasso",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            threads,
            config: &echo,
            outputs,
        };
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn load_panel(cfg: &RunConfig) -> Result<PanelData> {
    io::read_panel(open(cfg.require_path(&cfg.data.panel, "data.panel (--panel)")?)?)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate { .. } => "simulate",
        Command::Fit { .. } => "fit",
        Command::Cv { .. } => "cv",
        Command::Mc { .. } => "mc",
        Command::Infer { .. } => "infer",
        Command::Compare { .. } => "compare",
        Command::Check { .. } => "check",
        Command::Ingest { .. } => "ingest",
    }
}

/// Folds flags into the configuration. Flag paths stay relative to the
/// working directory.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.global.out {
        cfg.out = Some(o.clone());
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    match &cli.command {
        Command::Simulate { side, t, rho } => {
            cfg.dgp.side = side.unwrap_or(cfg.dgp.side);
            cfg.dgp.t = t.unwrap_or(cfg.dgp.t);
            cfg.dgp.rho = rho.unwrap_or(cfg.dgp.rho);
        }
        Command::Fit { panel, lambda } => {
            set(&mut cfg.data.panel, panel);
            lambda.apply(&mut cfg.penalty);
        }
        Command::Cv { panel } => set(&mut cfg.data.panel, panel),
        Command::Mc { reps, tuning } => {
            cfg.mc.reps = reps.unwrap_or(cfg.mc.reps);
            if let Some(t) = tuning {
                cfg.mc.tuning = match t {
                    TuningArg::Cv => Tuning::Cv,
                    TuningArg::Fixed => Tuning::Fixed,
                };
            }
        }
        Command::Infer { panel, fit } => {
            set(&mut cfg.data.panel, panel);
            set(&mut cfg.data.fit, fit);
        }
        Command::Compare { panel, fit, lambda } => {
            set(&mut cfg.data.panel, panel);
            set(&mut cfg.data.fit, fit);
            lambda.apply(&mut cfg.penalty);
        }
        Command::Check { params } => set(&mut cfg.data.fit, params),
        Command::Ingest { measurements, stations, completeness } => {
            set(&mut cfg.data.measurements, measurements);
            set(&mut cfg.data.stations, stations);
            if completeness.is_some() {
                cfg.data.completeness = *completeness;
            }
        }
    }
    // the DGP seed follows the run seed
    cfg.dgp.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CheckReport {
    stationary: bool,
    norm_value: Option<f64>,
    max_row_sum: f64,
    max_lag_sum: f64,
    sufficient_bounds: bool,
    invariant_violations: Vec<String>,
    feasible: bool,
}

#[derive(Serialize)]
struct InferenceSummary<'a> {
    hessian_ok: bool,
    excluded: &'a [String],
    refit_loglik: f64,
    support_size: usize,
}

#[derive(Serialize)]
struct CvSummary {
    best: PenaltyConfig,
    best_score: f64,
}

fn execute(cmd: &Command, cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let opts = cfg.solver_options();
    match cmd {
        Command::Simulate { .. } => {
            let truth = make_true_params(&cfg.dgp)?;
            let panel = simulate_panel(&truth, &cfg.dgp)?;
            out.write("panel.csv", |w| io::write_panel(&panel, w))?;
            out.write("truth.json", |w| io::write_params(&truth, w))?;
        }
        Command::Fit { .. } => {
            let panel = load_panel(cfg)?;
            let res = fit(&panel, &cfg.penalty, &opts)?;
            if !res.converged {
                log::warn!("solver stopped after {} iterations without converging", res.iterations);
            }
            out.write("fit.json", |w| io::write_fit(&res, w))?;
        }
        Command::Cv { .. } => {
            let panel = load_panel(cfg)?;
            let grid = grid_search(&panel, &cfg.grid.plan(), &opts)?;
            out.write("cv_scores.csv", |w| grid.write_scores(w))?;
            let summary = CvSummary { best: grid.best, best_score: grid.best_score };
            out.write("cv_best.json", |w| Ok(serde_json::to_writer_pretty(w, &summary)?))?;
            if let Some(f) = &grid.fit {
                out.write("fit.json", |w| io::write_fit(f, w))?;
            }
        }
        Command::Mc { .. } => {
            let lambda = match cfg.mc.tuning {
                Tuning::Cv => LambdaMode::Cv { plan: cfg.grid.plan() },
                Tuning::Fixed => LambdaMode::Fixed { penalty: cfg.penalty },
            };
            let mut cells = Vec::new();
            for cell in &cfg.mc.cells {
                let mc = McConfig {
                    dgp: crate::simulate::DgpConfig { side: cell.side, t: cell.t, ..cfg.dgp.clone() },
                    reps: cfg.mc.reps,
                    lambda: lambda.clone(),
                    opts: opts.clone(),
                    start_at_truth: cfg.mc.start_at_truth,
                };
                let (summary, records) = monte_carlo(&mc)?;
                let name = format!("replications_n{}_T{}.jsonl", summary.n, summary.t);
                out.write(&name, |w| write_records(&records, w, cfg.mc.with_time))?;
                cells.push(summary);
            }
            out.write("table1.csv", |w| write_table1(&cells, w, cfg.mc.with_time))?;
        }
        Command::Infer { .. } => {
            let panel = load_panel(cfg)?;
            let penalized = io::read_fit(open(cfg.require_path(&cfg.data.fit, "data.fit (--fit)")?)?)?;
            let res = infer(&panel, &penalized.params, &opts, cfg.support_tau)?;
            if !res.hessian_ok {
                log::warn!("observed information is not positive definite; standard errors omitted");
            }
            out.write("inference.csv", |w| res.write_csv(w))?;
            let summary = InferenceSummary {
                hessian_ok: res.hessian_ok,
                excluded: &res.excluded,
                refit_loglik: res.refit_loglik,
                support_size: res.rows.len(),
            };
            out.write("inference.json", |w| Ok(serde_json::to_writer_pretty(w, &summary)?))?;
        }
        Command::Compare { .. } => {
            let panel = load_panel(cfg)?;
            let res = match &cfg.data.fit {
                Some(_) => io::read_fit(open(cfg.require_path(&cfg.data.fit, "data.fit (--fit)")?)?)?,
                None => {
                    let res = fit(&panel, &cfg.penalty, &opts)?;
                    out.write("fit.json", |w| io::write_fit(&res, w))?;
                    res
                }
            };
            let rows = compare_models(&res, &panel)?;
            out.write("comparison.csv", |w| write_comparison(&rows, w))?;
        }
        Command::Check { .. } => {
            let params = io::read_params(open(cfg.require_path(&cfg.data.fit, "params file (--params)")?)?)?;
            let s = stationarity_check(&params);
            let violations = params.invariant_violations(opts.delta_row, opts.tol_feas);
            let report = CheckReport {
                stationary: s.stationary,
                norm_value: s.norm_value.is_finite().then_some(s.norm_value),
                max_row_sum: s.max_row_sum,
                max_lag_sum: s.max_lag_sum,
                sufficient_bounds: s.sufficient_bounds,
                feasible: violations.is_empty(),
                invariant_violations: violations,
            };
            out.write("check.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
        }
        Command::Ingest { .. } => {
            let path = cfg.require_path(&cfg.data.measurements, "data.measurements (--measurements)")?;
            let ing = io::ingest(open(path)?, cfg.completeness(), cfg.window()?)?;
            let panel = ing.to_panel(&cfg.fourier.all())?;
            out.write("panel.csv", |w| io::write_panel(&panel, w))?;
            out.write("completeness.csv", |w| {
                let mut wtr = csv::Writer::from_writer(w);
                for r in &ing.report {
                    wtr.serialize(r)?;
                }
                wtr.flush()?;
                Ok(())
            })?;
            let mut ids = csv::Writer::from_writer(Vec::new());
            ids.write_record(["location", "station_id"])?;
            for (i, id) in ing.station_ids.iter().enumerate() {
                ids.write_record([i.to_string(), id.clone()])?;
            }
            let ids = ids.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            out.write("locations.csv", |w| Ok(w.write_all(&ids)?))?;
            if cfg.data.stations.is_some() {
                let stations = io::read_stations(open(cfg.require_path(&cfg.data.stations, "data.stations")?)?)?;
                let unknown: Vec<&str> = ing
                    .station_ids
                    .iter()
                    .filter(|id| !stations.iter().any(|s| &s.station_id == *id))
                    .map(String::as_str)
                    .collect();
                if !unknown.is_empty() {
                    return Err(Error::Ingest(format!("stations missing from metadata: {}", unknown.join(", "))));
                }
            }
        }
    }
    Ok(())
}

/// Exit code for an error: configuration problems count as usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let threads = cli.global.threads;
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut out = OutDir::new(cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")))?;
    pool.install(|| execute(&cli.command, &cfg, &mut out))?;
    out.finish(command_name(&cli.command), &cfg, threads)
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
