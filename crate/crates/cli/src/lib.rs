//! Command implementations for the `ffgvi` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ffgvi_core::engine::InferenceConfig;
use ffgvi_core::error::Error as CoreError;
use ffgvi_core::fixed_point::SolverConfig;
use ffgvi_core::graph::{validate_proper, FactorGraph};
use ffgvi_core::models::{
    default_posterior, depth2_posterior, fit, metrics, predict, synthetic, xor_experts, EnsembleData, Fitted, ModelKind,
    SyntheticSpec,
};
use ffgvi_core::nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Failure classes mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: the inputs parse but the model or data is unusable.
    Domain(anyhow::Error),
    /// Exit 2: malformed input or bad usage.
    Usage(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Domain(e) | Failure::Usage(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Domain(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "ffgvi", version, about = "Factor-graph precision-gated ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check that a graph document is a proper terminated factor graph.
    Validate {
        graph: PathBuf,
    },
    /// Posterior mean and std of the two-expert XOR encoding on a grid.
    Xor {
        #[arg(long, default_value_t = 500.0)]
        tau: f64,
        #[arg(long = "grid-n", default_value_t = 21)]
        grid_n: usize,
        #[arg(long, default_value_t = 5)]
        sweeps: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic ensemble data set.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        experts: usize,
        #[arg(long, default_value_t = 200)]
        obs: usize,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        /// Constant precision per expert.
        #[arg(long)]
        homoscedastic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on features/predictions/targets CSVs.
    Fit(RunArgs),
    /// Predict with a fitted model.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// `fitted.json` written by `fit`.
        #[arg(long)]
        fitted: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long = "prediction-sweeps")]
    pub prediction_sweeps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run configuration document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub sweeps: usize,
    pub prediction_sweeps: usize,
    pub solver: SolverConfig,
    pub seed: Option<u64>,
    pub features: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Pge,
            sweeps: 5,
            prediction_sweeps: 3,
            solver: SolverConfig::default(),
            seed: None,
            features: None,
            predictions: None,
            targets: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Loads the optional config file and applies command-line overrides.
    pub fn resolve(args: &RunArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display())).map_err(usage)?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = &args.model {
            cfg.model = ModelKind::parse(m).ok_or_else(|| usage(anyhow::anyhow!("unknown model '{m}'")))?;
        }
        if let Some(s) = args.sweeps {
            cfg.sweeps = s;
        }
        if let Some(s) = args.prediction_sweeps {
            cfg.prediction_sweeps = s;
        }
        if args.seed.is_some() {
            cfg.seed = args.seed;
        }
        for (slot, arg) in [
            (&mut cfg.features, &args.features),
            (&mut cfg.predictions, &args.predictions),
            (&mut cfg.targets, &args.targets),
            (&mut cfg.out, &args.out),
        ] {
            if arg.is_some() {
                slot.clone_from(arg);
            }
        }
        cfg.solver.validate()?;
        Ok(cfg)
    }

    fn inference(&self, sweeps: usize) -> InferenceConfig {
        InferenceConfig { sweeps, solver: self.solver, ..InferenceConfig::default() }
    }

    fn path<'a>(&'a self, p: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
        p.as_deref().ok_or_else(|| usage(anyhow::anyhow!("--{name} is required")))
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn read_matrix(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(usage)?;
    let header: Vec<String> = rdr
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))
        .map_err(usage)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), k + 1)).map_err(usage)?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), k + 1))
            .map_err(usage)?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn to_dmatrix(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

/// Reads the three data files. An empty (or header-only) targets file means
/// prediction without targets.
pub fn load_data(features: &Path, predictions: &Path, targets: Option<&Path>) -> CliResult<EnsembleData> {
    let (fh, f) = read_matrix(features)?;
    let (ph, p) = read_matrix(predictions)?;
    let t = match targets {
        Some(path) if fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false) => {
            let (_, t) = read_matrix(path)?;
            if t.iter().any(|r| r.len() != 1) {
                return Err(usage(anyhow::anyhow!("{}: expected a single column", path.display())));
            }
            (!t.is_empty()).then(|| DVector::from_iterator(t.len(), t.iter().map(|r| r[0])))
        }
        Some(path) if !path.exists() => return Err(usage(anyhow::anyhow!("{} does not exist", path.display()))),
        _ => None,
    };
    let data = EnsembleData::new(to_dmatrix(&f, fh.len()), to_dmatrix(&p, ph.len()), t)?;
    Ok(data)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Domain)?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Domain)
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn bfe_csv(trace: &[f64]) -> String {
    let mut s = String::from("sweep,bfe\n");
    for (k, v) in trace.iter().enumerate() {
        s.push_str(&format!("{k},{}\n", fmt_f64(*v)));
    }
    s
}

fn json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Domain(e.into()))
}

pub fn cmd_validate(path: &Path) -> CliResult<(bool, String)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let graph = FactorGraph::from_json(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)?;
    let report = validate_proper(&graph);
    let mut out = String::new();
    for v in &report.violations {
        out.push_str(&format!("{v}\n"));
    }
    if report.is_proper() {
        out.push_str(&format!("proper: {} nodes, {} edges\n", graph.nodes.len(), graph.edges.len()));
    }
    Ok((report.is_proper(), out))
}

/// CSV of the XOR posterior over the lattice `k / (n - 1)` on the unit
/// square; `n = 1` is the single point (0, 0).
pub fn xor_grid(tau: f64, grid_n: usize, sweeps: usize) -> CliResult<String> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Failure::Domain(anyhow::anyhow!("--tau must be positive, got {tau}")));
    }
    if grid_n == 0 {
        return Err(usage(anyhow::anyhow!("--grid-n must be at least 1")));
    }
    let coord = |k: usize| if grid_n == 1 { 0.0 } else { k as f64 / (grid_n - 1) as f64 };
    let mut phi = Vec::with_capacity(grid_n * grid_n);
    for a in 0..grid_n {
        for b in 0..grid_n {
            phi.push(vec![coord(a), coord(b), 1.0]);
        }
    }
    let points = depth2_posterior(&xor_experts(tau), &phi, sweeps)?;
    Ok(csv_table(&["x1", "x2", "mean", "std"], points.iter().map(|p| vec![p.phi[0], p.phi[1], p.mean, p.std])))
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> CliResult<()> {
    let s = synthetic(spec)?;
    let d = &s.data;
    let fh: Vec<String> = (0..d.features.ncols()).map(|k| format!("x{k}")).collect();
    let ph: Vec<String> = (0..d.n_obs()).map(|j| format!("obs{j}")).collect();
    let fh: Vec<&str> = fh.iter().map(String::as_str).collect();
    let ph: Vec<&str> = ph.iter().map(String::as_str).collect();
    write_file(&out.join("features.csv"), &csv_table(&fh, d.features.row_iter().map(|r| r.iter().copied().collect())))?;
    write_file(&out.join("predictions.csv"), &csv_table(&ph, d.predictions.row_iter().map(|r| r.iter().copied().collect())))?;
    let t = d.targets.as_ref().expect("synthetic targets");
    write_file(&out.join("targets.csv"), &csv_table(&["y"], t.iter().map(|y| vec![*y])))?;
    write_file(&out.join("true_gamma.csv"), &csv_table(&ph, s.true_gamma.row_iter().map(|r| r.iter().copied().collect())))?;
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Fitted> {
    let data = load_data(
        cfg.path(&cfg.features, "features")?,
        cfg.path(&cfg.predictions, "predictions")?,
        Some(cfg.path(&cfg.targets, "targets")?),
    )?;
    if data.targets.is_none() {
        return Err(Failure::Domain(anyhow::anyhow!("training requires a non-empty targets file")));
    }
    let prior = default_posterior(cfg.model, data.n_experts(), data.phi_dim());
    let fitted = fit(cfg.model, &data, &prior, &cfg.inference(cfg.sweeps))?;
    let out = cfg.path(&cfg.out, "out")?;
    write_file(&out.join("fitted.json"), &json_pretty(&fitted)?)?;
    write_file(&out.join("bfe_trace.csv"), &bfe_csv(&fitted.bfe_trace))?;
    Ok(fitted)
}

pub fn cmd_predict(cfg: &RunConfig, fitted_path: &Path) -> CliResult<Option<ffgvi_core::models::Metrics>> {
    let text = fs::read_to_string(fitted_path).with_context(|| format!("reading {}", fitted_path.display())).map_err(usage)?;
    let fitted: Fitted =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", fitted_path.display())).map_err(usage)?;
    let data = load_data(
        cfg.path(&cfg.features, "features")?,
        cfg.path(&cfg.predictions, "predictions")?,
        cfg.targets.as_deref(),
    )?;
    let pred = predict(&fitted, &data, &cfg.inference(cfg.prediction_sweeps))?;
    let out = cfg.path(&cfg.out, "out")?;
    write_file(
        &out.join("predictive.csv"),
        &csv_table(&["mean", "var"], pred.beliefs.iter().map(|b| vec![b.mean(), b.var()])),
    )?;
    write_file(&out.join("marginals.json"), &json_pretty(&pred.marginals)?)?;
    write_file(&out.join("bfe_trace.csv"), &bfe_csv(&pred.marginals.bfe_trace))?;
    let m = match &data.targets {
        Some(t) => {
            let t: Vec<f64> = t.iter().copied().collect();
            let m = metrics(&pred.beliefs, &t)?;
            write_file(
                &out.join("metrics.json"),
                &format!("{{\n  \"mse\": {},\n  \"nll\": {}\n}}\n", fmt_f64(m.mse), fmt_f64(m.nll)),
            )?;
            Some(m)
        }
        None => None,
    };
    Ok(m)
}

/// Runs the parsed command, printing to stdout. Returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let result: CliResult<u8> = match cli.command {
        Command::Validate { graph } => cmd_validate(&graph).map(|(ok, report)| {
            print!("{report}");
            u8::from(!ok)
        }),
        Command::Xor { tau, grid_n, sweeps, out } => xor_grid(tau, grid_n, sweeps).and_then(|csv| match out {
            Some(p) => write_file(&p, &csv).map(|_| 0),
            None => {
                print!("{csv}");
                Ok(0)
            }
        }),
        Command::Synth { seed, experts, obs, dim, homoscedastic, out } => cmd_synth(
            &SyntheticSpec { seed, n_experts: experts, n_obs: obs, dim, heteroscedastic: !homoscedastic },
            &out,
        )
        .map(|_| 0),
        Command::Fit(args) => RunConfig::resolve(&args).and_then(|cfg| cmd_fit(&cfg)).map(|f| {
            if let Some(last) = f.bfe_trace.last() {
                println!("bfe {}", fmt_f64(*last));
            }
            0
        }),
        Command::Predict { run, fitted } => RunConfig::resolve(&run).and_then(|cfg| cmd_predict(&cfg, &fitted)).map(|m| {
            if let Some(m) = m {
                println!("mse {}\nnll {}", fmt_f64(m.mse), fmt_f64(m.nll));
            }
            0
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
