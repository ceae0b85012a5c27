//! Batch front end: CSV in, screening paths, selections and reports out.

pub mod config;
pub mod data;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rfpsis::factor::{fit_factor_model, Dimension, FactorFit, HRule};
use rfpsis::rng::derive_seed;
use rfpsis::screening::{screen, standardize_robust, Method, ScreenOptions, SolutionPath};
use rfpsis::selection::{default_k_max, refit_path, select_model, Criterion, Selection};
use rfpsis::simulation::{run_experiment, ExperimentOptions, LeverageKind, SimulationReport, SimulationSpec};
use serde::Serialize;

use crate::config::{parse_list, ConfigFile, DimArg};
use crate::data::{num, read_dataset, write_json, Dataset, Table};
use crate::error::{CliError, CliResult};

pub use crate::error::CliError as Error;

pub const SEED_ENV: &str = "RFPS_SEED";

#[derive(Debug, Parser)]
#[command(name = "rfpsis", version, about = "Robust factor profiled screening and selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank predictors and write path.csv, outliers.csv and factor.json.
    Screen(CommonArgs),
    /// Screen, refit the leading path models and pick one per criterion.
    Select(CommonArgs),
    /// Run a simulation study described by a config file.
    Simulate(SimulateArgs),
    /// Fit the robust factor model alone and write per-row diagnostics.
    Diagnose(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
struct CommonArgs {
    /// key=value file; command line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    /// sis, fpsis or rfpsis.
    #[arg(long)]
    method: Option<String>,
    /// Number of factors, or `auto`.
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    h_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Comma-separated criteria, or `all`.
    #[arg(long)]
    criteria: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    replicates: Option<usize>,
}

/// Settings after merging flags, config file and environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub response: Option<String>,
    pub method: Method,
    pub d: Option<usize>,
    pub d_max: usize,
    pub h_frac: Option<f64>,
    pub seed: u64,
    pub k_max: Option<usize>,
    pub criteria: Vec<Criterion>,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl RunConfig {
    fn resolve(args: &CommonArgs, file: &ConfigFile, default_criteria: &[Criterion]) -> CliResult<Self> {
        let method = match args.method.clone().or(file.get::<String>("method")?) {
            Some(m) => m.parse().map_err(|e: rfpsis::Error| CliError::Config(e.to_string()))?,
            None => Method::Rfpsis,
        };
        let d = match args.d.clone().or(file.get::<String>("d")?) {
            Some(s) => s.parse::<DimArg>().map_err(CliError::Config)?,
            None => DimArg::Auto,
        };
        let h_frac = args.h_frac.or(file.get("h_frac")?);
        if let Some(h) = h_frac {
            if !(0.5..=1.0).contains(&h) {
                return Err(CliError::Config(format!("h_frac = {h} must lie in [0.5, 1]")));
            }
        }
        let seed = match args.seed.or(file.get("seed")?) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV} = '{v}' is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        let criteria = match args.criteria.clone().or(file.get::<String>("criteria")?) {
            Some(s) if s.trim().eq_ignore_ascii_case("all") => Criterion::ALL.to_vec(),
            Some(s) => parse_list(&s)?,
            None => default_criteria.to_vec(),
        };
        let threads = args.threads.or(file.get("threads")?);
        if threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(Self {
            input: args.input.clone().or(file.get("input")?),
            response: args.response.clone().or(file.get("response")?),
            method,
            d: match d {
                DimArg::Auto => None,
                DimArg::Fixed(k) => Some(k),
            },
            d_max: file.get("d_max")?.unwrap_or(10),
            h_frac,
            seed,
            k_max: args.k_max.or(file.get("k_max")?),
            criteria,
            out: args.out.clone().or(file.get("out")?).unwrap_or_else(|| PathBuf::from(".")),
            threads,
        })
    }

    /// `d_max` is capped at `min(n, p) - 2` so small inputs work with the default.
    fn screen_options(&self, n: usize, p: usize) -> ScreenOptions {
        let d_max = self.d_max.min(n.min(p).saturating_sub(2)).max(1);
        let mut opts = ScreenOptions { method: self.method, d: self.d, d_max, ..ScreenOptions::default() };
        if let Some(f) = self.h_frac {
            opts.rfpsis.factor.h = HRule::Fraction(f);
        }
        opts.rfpsis.seed = self.seed;
        opts
    }

    fn input(&self) -> CliResult<&Path> {
        self.input.as_deref().ok_or_else(|| CliError::Usage("--input is required".into()))
    }

    fn response(&self) -> CliResult<&str> {
        self.response.as_deref().ok_or_else(|| CliError::Usage("--response is required".into()))
    }
}

const SHARED_KEYS: &[&str] =
    &["input", "response", "method", "d", "d_max", "h_frac", "seed", "k_max", "criteria", "out", "threads"];
const SPEC_KEYS: &[&str] =
    &["replicates", "n", "p", "factors", "c", "eps_leverage", "eps_vertical", "leverage_kind", "m_true", "methods"];

fn load_config(path: Option<&Path>, simulate: bool) -> CliResult<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let file = ConfigFile::load(path)?;
    for key in file.keys() {
        if !SHARED_KEYS.contains(&key) && !(simulate && SPEC_KEYS.contains(&key)) {
            return Err(CliError::Config(format!("unknown key '{key}'")));
        }
    }
    Ok(file)
}

/// Like [`run`] but returns the error; help and version requests count as usage errors.
pub fn execute<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(cli.command)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    let (cfg, file, replicates) = match &command {
        Command::Simulate(a) => {
            let file = load_config(a.common.config.as_deref(), true)?;
            let cfg = RunConfig::resolve(&a.common, &file, &[])?;
            let reps = a.replicates.or(file.get("replicates")?).unwrap_or(10);
            (cfg, file, reps)
        }
        Command::Screen(a) | Command::Select(a) | Command::Diagnose(a) => {
            let file = load_config(a.config.as_deref(), false)?;
            (RunConfig::resolve(a, &file, &Criterion::ALL)?, file, 0)
        }
    };
    std::fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let work = || match command {
        Command::Screen(_) => cmd_screen(&cfg).map(|_| ()),
        Command::Select(_) => cmd_select(&cfg).map(|_| ()),
        Command::Simulate(_) => cmd_simulate(&cfg, &file, replicates).map(|_| ()),
        Command::Diagnose(_) => cmd_diagnose(&cfg).map(|_| ()),
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

#[derive(Debug, Serialize)]
struct Summary5 {
    min: f64,
    median: f64,
    max: f64,
}

impl Summary5 {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self { min: v[0], median: rfpsis::robust::median(&v).ok()?, max: v[v.len() - 1] })
    }
}

#[derive(Debug, Serialize)]
struct FactorJson {
    method: Method,
    n: usize,
    p: usize,
    d: usize,
    lambda_opt: Option<f64>,
    h: Option<usize>,
    od_cutoff: Option<f64>,
    sd_cutoff: Option<f64>,
    pc_values: Vec<(usize, f64)>,
    mu: Option<Summary5>,
    regular_rows: usize,
    screening_rows: usize,
    warnings: Vec<String>,
}

fn factor_json(
    method: Method,
    n: usize,
    p: usize,
    d: usize,
    fit: Option<&FactorFit>,
    path: Option<&SolutionPath>,
) -> FactorJson {
    FactorJson {
        method,
        n,
        p,
        d,
        lambda_opt: fit.map(|f| f.lambda_opt),
        h: fit.map(|f| f.h),
        od_cutoff: fit.map(|f| f.od_cutoff),
        sd_cutoff: fit.map(|f| f.sd_cutoff),
        pc_values: fit.map(|f| f.pc_values.clone()).unwrap_or_default(),
        mu: fit.and_then(|f| Summary5::of(f.mu.as_slice())),
        regular_rows: path.map_or_else(|| fit.map_or(n, |f| f.regular_rows().len()), |p| p.i1.len()),
        screening_rows: path.map_or(n, |p| p.i2.len()),
        warnings: path.map(|p| p.warnings.clone()).unwrap_or_default(),
    }
}

fn load(cfg: &RunConfig) -> CliResult<Dataset> {
    let data = read_dataset(cfg.input()?, Some(cfg.response()?))?;
    eprintln!("read {} rows, {} predictors", data.x.nrows(), data.x.ncols());
    Ok(data)
}

fn write_path(cfg: &RunConfig, data: &Dataset, path: &SolutionPath) -> CliResult<()> {
    let mut t = Table::new(&["rank", "predictor", "slope"]);
    for r in path.rows() {
        t.push(vec![r.rank.to_string(), data.predictors[r.predictor].clone(), num(r.slope)]);
    }
    t.write(&cfg.out.join("path.csv"))?;

    let mut t = Table::new(&["row", "label", "od", "sd", "t"]);
    if let Some(report) = &path.report {
        for r in &report.rows {
            let label =
                serde_json::to_value(r.label).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            t.push(vec![(r.index + 1).to_string(), label, num(r.od), num(r.sd), num(r.t)]);
        }
    }
    t.write(&cfg.out.join("outliers.csv"))?;
    let (n, p) = data.x.shape();
    write_json(&cfg.out.join("factor.json"), &factor_json(path.method, n, p, path.d, path.factor.as_ref(), Some(path)))
}

/// `screen`: writes path.csv, outliers.csv and factor.json.
pub fn cmd_screen(cfg: &RunConfig) -> CliResult<SolutionPath> {
    let data = load(cfg)?;
    let (n, p) = data.x.shape();
    let path = screen(&data.x, &data.y, &cfg.screen_options(n, p)).map_err(CliError::stage("screening"))?;
    warn_all(&path.warnings);
    write_path(cfg, &data, &path)?;
    eprintln!("{} path: d = {}, {} screening rows", path.method, path.d, path.i2.len());
    Ok(path)
}

/// `select`: screens, refits nested path models and writes selection.csv plus the per-k table.
pub fn cmd_select(cfg: &RunConfig) -> CliResult<Selection> {
    let data = load(cfg)?;
    let (n, p) = data.x.shape();
    let mut k_max = cfg.k_max.unwrap_or_else(|| default_k_max(n, p));
    if k_max == 0 || k_max > n / 2 || k_max > p {
        return Err(CliError::Precondition(format!(
            "k_max = {k_max} must lie in [1, min(n/2, p)] = [1, {}]",
            (n / 2).min(p)
        )));
    }
    if cfg.criteria.is_empty() {
        return Err(CliError::Config("no criteria requested".into()));
    }
    let path = screen(&data.x, &data.y, &cfg.screen_options(n, p)).map_err(CliError::stage("screening"))?;
    warn_all(&path.warnings);
    write_path(cfg, &data, &path)?;
    let limit = path.i2.len() / 2;
    if k_max > limit {
        eprintln!("warning: k_max lowered from {k_max} to {limit}, half the {} screening rows", path.i2.len());
        k_max = limit;
    }
    let (refits, warnings) = refit_path(&path, k_max).map_err(CliError::stage("refit"))?;
    warn_all(&warnings);
    let sel = select_model(&path, &refits, &cfg.criteria, n, p).map_err(CliError::stage("selection"))?;
    warn_all(&sel.warnings);

    let mut t = Table::new(&["criterion", "size", "model", "coefficients", "value", "wrss"]);
    for c in &sel.chosen {
        let names: Vec<&str> = c.model.iter().map(|&j| data.predictors[j].as_str()).collect();
        let coefs: Vec<String> = c.coefs.iter().map(|&b| num(b)).collect();
        t.push(vec![
            c.criterion.name().to_string(),
            c.model.len().to_string(),
            names.join(";"),
            coefs.join(";"),
            num(c.value),
            num(c.wrss),
        ]);
    }
    t.write(&cfg.out.join("selection.csv"))?;

    let mut header = vec!["k", "wrss"];
    header.extend(Criterion::ALL.iter().map(|c| c.name()));
    let mut t = Table::new(&header);
    for row in &sel.table {
        let mut r = vec![row.k.to_string(), num(row.wrss)];
        r.extend(row.values.iter().map(|&v| num(v)));
        t.push(r);
    }
    t.write(&cfg.out.join("selection_table.csv"))?;
    for c in &sel.chosen {
        eprintln!("{}: {} predictors", c.criterion, c.model.len());
    }
    Ok(sel)
}

/// `diagnose`: robust factor fit on the predictors, per-row distances in diagnostics.csv.
pub fn cmd_diagnose(cfg: &RunConfig) -> CliResult<FactorFit> {
    let data = read_dataset(cfg.input()?, cfg.response.as_deref())?;
    let (n, p) = data.x.shape();
    let (xs, degenerate) = standardize_robust(&data.x).map_err(CliError::stage("standardization"))?;
    for j in degenerate {
        eprintln!("warning: column '{}' has zero Qn scale; centered only", data.predictors[j]);
    }
    let so = cfg.screen_options(n, p);
    let mut fo = so.rfpsis.factor;
    fo.dimension = match so.d {
        Some(d) => Dimension::Fixed(d),
        None => Dimension::Auto { d_max: so.d_max },
    };
    // Same stream as the factor step of `screen`.
    fo.seed = derive_seed(cfg.seed, &[0x4641]);
    let fit = fit_factor_model(&xs, &fo).map_err(CliError::stage("factor model"))?;

    let mut t = Table::new(&["row", "od", "sd", "transformed_od", "flag"]);
    for r in fit.diagnostics() {
        let flag = serde_json::to_value(r.flag).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        t.push(vec![(r.index + 1).to_string(), num(r.od), num(r.sd), num(r.transformed_od), flag]);
    }
    t.write(&cfg.out.join("diagnostics.csv"))?;
    write_json(&cfg.out.join("factor.json"), &factor_json(Method::Rfpsis, n, p, fit.d, Some(&fit), None))?;
    eprintln!("factor model: d = {}, {} regular rows", fit.d, fit.regular_rows().len());
    Ok(fit)
}

#[derive(Debug, Serialize)]
struct SpecEcho<'a> {
    spec: &'a SimulationSpec,
    replicates: usize,
    options: &'a ExperimentOptions,
}

fn spec_from(cfg: &RunConfig, file: &ConfigFile) -> CliResult<SimulationSpec> {
    let base = SimulationSpec::default();
    let leverage_kind = match file.get::<String>("leverage_kind")? {
        Some(s) => s.parse::<LeverageKind>().map_err(|e| CliError::Config(e.to_string()))?,
        None => base.leverage_kind,
    };
    let spec = SimulationSpec {
        n: file.get("n")?.unwrap_or(base.n),
        p: file.get("p")?.unwrap_or(base.p),
        d: file.get("factors")?.unwrap_or(base.d),
        c: file.get("c")?.unwrap_or(base.c),
        eps_leverage: file.get("eps_leverage")?.unwrap_or(base.eps_leverage),
        eps_vertical: file.get("eps_vertical")?.unwrap_or(base.eps_vertical),
        leverage_kind,
        seed: cfg.seed,
        m_true: file.get("m_true")?.unwrap_or(base.m_true),
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// `simulate`: report.csv with MMS quantiles, per-replicate rows and a spec echo.
pub fn cmd_simulate(cfg: &RunConfig, file: &ConfigFile, replicates: usize) -> CliResult<SimulationReport> {
    let spec = spec_from(cfg, file)?;
    if replicates == 0 {
        return Err(CliError::Config("replicates must be at least 1".into()));
    }
    let methods = match file.get::<String>("methods")? {
        Some(s) => parse_list::<Method>(&s)?,
        None => ExperimentOptions::default().methods,
    };
    let opts = ExperimentOptions {
        methods,
        screen: cfg.screen_options(spec.n, spec.p),
        criteria: cfg.criteria.clone(),
        k_max: cfg.k_max,
    };
    eprintln!("simulating {replicates} replicates at n = {}, p = {}", spec.n, spec.p);
    let report = run_experiment(&spec, &opts, replicates).map_err(CliError::stage("simulation"))?;

    let mut t = Table::new(&["method", "m", "median_mms", "q95_mms"]);
    for s in &report.mms {
        t.push(vec![s.method.to_string(), s.m.to_string(), num(s.median), num(s.q95)]);
    }
    t.write(&cfg.out.join("report.csv"))?;

    let mut header = vec!["replicate".to_string(), "method".into(), "d_hat".into(), "error".into()];
    header.extend((1..=spec.m_true).map(|m| format!("mms_{m}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header);
    for r in &report.replicates {
        let mut row = vec![
            r.replicate.to_string(),
            r.method.to_string(),
            r.d_hat.map(|d| d.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ];
        row.extend((0..spec.m_true).map(|m| r.mms.get(m).map(|v| v.to_string()).unwrap_or_default()));
        t.push(row);
    }
    t.write(&cfg.out.join("replicates.csv"))?;

    if !opts.criteria.is_empty() {
        let mut t = Table::new(&["method", "criterion", "mean_tp", "mean_fp", "replicates"]);
        for s in &report.selection {
            t.push(vec![
                s.method.to_string(),
                s.criterion.name().into(),
                num(s.mean_tp),
                num(s.mean_fp),
                s.replicates.to_string(),
            ]);
        }
        t.write(&cfg.out.join("selection_summary.csv"))?;
        let mut t = Table::new(&["replicate", "method", "criterion", "size", "tp", "fp"]);
        for r in &report.replicates {
            for s in &r.selections {
                t.push(vec![
                    r.replicate.to_string(),
                    r.method.to_string(),
                    s.criterion.name().into(),
                    s.size.to_string(),
                    s.tp.to_string(),
                    s.fp.to_string(),
                ]);
            }
        }
        t.write(&cfg.out.join("selection_replicates.csv"))?;
    }
    write_json(&cfg.out.join("spec.json"), &SpecEcho { spec: &spec, replicates, options: &opts })?;
    let failed = report.replicates.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} method runs failed; see replicates.csv");
    }
    Ok(report)
}
