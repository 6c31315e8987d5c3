//! Command-line front end. `run` returns the process exit code:
//! 0 success, 2 validation error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assess::{score_fit, AssessError, Scale, TruthTable};
use crate::basis::BasisFamily;
use crate::bayes::BayesError;
use crate::dataset::{ApcDataset, CsvSchema, DatasetError};
use crate::design::{SlopePair, Window};
use crate::engine::{fit_engine, Engine, EngineError};
use crate::fit::{compare, FitIoError, FitResult};
use crate::freq::FreqError;
use crate::sim::{run_study, SimConfig, SimError, StudyOptions, TruthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        invalid(format!("data: {e}"))
    }
}

impl From<FitIoError> for CliError {
    fn from(e: FitIoError) -> Self {
        invalid(format!("fit file: {e}"))
    }
}

impl From<AssessError> for CliError {
    fn from(e: AssessError) -> Self {
        invalid(format!("scoring: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        invalid(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        invalid(format!("json: {e}"))
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::Design(_) | EngineError::Gmrf(_) => invalid(e.to_string()),
            EngineError::Freq(FreqError::MissingExposure { .. })
            | EngineError::Freq(FreqError::NotConformable { .. })
            | EngineError::Bayes(BayesError::HorizonTooLong { .. })
            | EngineError::Bayes(BayesError::NotConformable { .. }) => invalid(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Dataset(_) | SimError::Io(_) | SimError::Json(_) => {
                invalid(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "apcsmooth",
    version,
    about = "Smoothed age-period-cohort models: fit, forecast, score, simulate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit on periods up to --train-through and predict the remaining periods in the data.
    Fit(FitArgs),
    /// Fit and forecast --horizon periods past --train-through.
    Forecast(FitArgs),
    /// Score a fit file against truth or observed log rates.
    Score(ScoreArgs),
    /// Run the simulation study.
    Simulate(SimArgs),
    /// Pair the point estimates of two fit files.
    Compare(CompareArgs),
    /// Export long-format tables for heatmaps and per-age line plots.
    PlotData(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Spline,
    Rw2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BasisArg {
    Crs,
    Bs,
    Tprs,
}

impl From<BasisArg> for BasisFamily {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Crs => BasisFamily::Crs,
            BasisArg::Bs => BasisFamily::Bs,
            BasisArg::Tprs => BasisFamily::Tprs,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SlopesArg {
    AgePeriod,
    PeriodCohort,
    AgeCohort,
}

impl From<SlopesArg> for SlopePair {
    fn from(s: SlopesArg) -> Self {
        match s {
            SlopesArg::AgePeriod => SlopePair::AgePeriod,
            SlopesArg::PeriodCohort => SlopePair::PeriodCohort,
            SlopesArg::AgeCohort => SlopePair::AgeCohort,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Log,
    Rate,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SchemaArgs {
    #[arg(long)]
    age_col: Option<String>,
    #[arg(long)]
    period_col: Option<String>,
    #[arg(long)]
    count_col: Option<String>,
    #[arg(long)]
    exposure_col: Option<String>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Input CSV with age group, period, count and exposure columns.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    engine: Option<EngineKind>,
    #[arg(long, value_enum)]
    basis: Option<BasisArg>,
    /// Basis dimensions for age, period, cohort.
    #[arg(long, value_delimiter = ',')]
    knots: Option<Vec<usize>>,
    /// PC prior: P(sigma > U) = alpha.
    #[arg(long)]
    pc_u: Option<f64>,
    #[arg(long)]
    pc_alpha: Option<f64>,
    /// Last period used for fitting.
    #[arg(long)]
    train_through: Option<i32>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum)]
    slopes: Option<SlopesArg>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    fit: Option<PathBuf>,
    /// CSV with columns age, period, eta.
    #[arg(long, conflicts_with = "data")]
    truth: Option<PathBuf>,
    /// Score against observed log rates ln((y + correction) / N).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    correction: Option<f64>,
    /// Periods before this year are estimation, the rest prediction.
    #[arg(long)]
    split_year: Option<i32>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    replicates: Option<usize>,
    /// JSON truth spec; defaults to the built-in truth.
    #[arg(long)]
    truth_spec: Option<PathBuf>,
    /// Comma-separated subset of crs,bs,tprs,rw2-u1,rw2-u3,rw2-u6.
    #[arg(long, value_delimiter = ',')]
    engines: Option<Vec<String>>,
    /// Also write every fitted FitResult.
    #[arg(long)]
    keep_fits: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fit file; repeat for several models.
    #[arg(long = "fit")]
    fits: Vec<PathBuf>,
    /// Model labels matching --fit; defaults to file stems.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long)]
    correction: Option<f64>,
}

/// Every setting a config file may hold. Flags override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub age_col: Option<String>,
    pub period_col: Option<String>,
    pub count_col: Option<String>,
    pub exposure_col: Option<String>,
    pub engine: Option<EngineKind>,
    pub basis: Option<BasisFamily>,
    pub knots: Option<[usize; 3]>,
    pub pc_u: Option<f64>,
    pub pc_alpha: Option<f64>,
    pub train_through: Option<i32>,
    pub horizon: Option<usize>,
    pub slopes: Option<SlopePair>,
    pub fit: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub correction: Option<f64>,
    pub split_year: Option<i32>,
    pub alpha: Option<f64>,
    pub scale: Option<Scale>,
    pub replicates: Option<usize>,
    pub truth_spec: Option<PathBuf>,
    pub engines: Option<Vec<String>>,
    pub keep_fits: Option<bool>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub fits: Option<Vec<PathBuf>>,
    pub labels: Option<Vec<String>>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| invalid(format!("--config {}: {e}", path.display())))
    }

    /// Values set in `flags` replace those in `self`.
    pub fn overlay(mut self, flags: &Settings) -> Self {
        overlay!(self, flags; out, seed, data, age_col, period_col, count_col, exposure_col,
            engine, basis, knots, pc_u, pc_alpha, train_through, horizon, slopes, fit, truth,
            correction, split_year, alpha, scale, replicates, truth_spec, engines, keep_fits,
            a, b, fits, labels);
        self
    }

    fn schema(&self) -> CsvSchema {
        let d = CsvSchema::default();
        CsvSchema {
            age_group: self.age_col.clone().unwrap_or(d.age_group),
            period: self.period_col.clone().unwrap_or(d.period),
            count: self.count_col.clone().unwrap_or(d.count),
            exposure: self.exposure_col.clone().unwrap_or(d.exposure),
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        v.as_ref()
            .ok_or_else(|| invalid(format!("missing required --{flag}")))
    }
}

fn schema_settings(s: &SchemaArgs) -> Settings {
    Settings {
        age_col: s.age_col.clone(),
        period_col: s.period_col.clone(),
        count_col: s.count_col.clone(),
        exposure_col: s.exposure_col.clone(),
        ..Settings::default()
    }
}

fn merge(common: &CommonArgs, flags: Settings) -> Result<Settings, CliError> {
    let flags = Settings {
        out: common.out.clone(),
        seed: common.seed,
        ..flags
    };
    let base = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    Ok(base.overlay(&flags))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: Vec<String>,
    subcommand: &'a str,
    config_hash: String,
    seed: Option<u64>,
    engine: Option<String>,
    versions: serde_json::Value,
    wall_time_s: f64,
    settings: &'a Settings,
    diagnostics: serde_json::Value,
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// SHA-256 over the resolved settings (minus the output directory) and the
/// contents of every input file.
pub fn config_hash(settings: &Settings, inputs: &[&Path]) -> Result<String, CliError> {
    let hashed = Settings {
        out: None,
        ..settings.clone()
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&hashed)?);
    for p in inputs {
        h.update(file_digest(p)?.as_bytes());
    }
    Ok(format!("{:x}", h.finalize()))
}

struct RunContext {
    argv: Vec<String>,
    started: Instant,
}

impl RunContext {
    fn write_manifest(
        &self,
        dir: &Path,
        subcommand: &str,
        settings: &Settings,
        inputs: &[&Path],
        engine: Option<String>,
        diagnostics: serde_json::Value,
    ) -> Result<(), CliError> {
        let manifest = Manifest {
            command: self.argv.clone(),
            subcommand,
            config_hash: config_hash(settings, inputs)?,
            seed: settings.seed,
            engine,
            versions: serde_json::json!({ "apcsmooth": env!("CARGO_PKG_VERSION") }),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            settings,
            diagnostics,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("--out {}: {e}", dir.display())))
}

/// Parses `argv` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    let ctx = RunContext {
        argv: argv
            .iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
        started: Instant::now(),
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a, false),
        Command::Forecast(a) => cmd_fit(&ctx, a, true),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::PlotData(a) => cmd_plot_data(&ctx, a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Builds the engine from settings, rejecting flags that belong to the other engine.
pub fn resolve_engine(s: &Settings) -> Result<Engine, CliError> {
    let kind = s.engine.unwrap_or(EngineKind::Spline);
    match kind {
        EngineKind::Spline => {
            if s.pc_u.is_some() || s.pc_alpha.is_some() {
                return Err(invalid("--pc-u/--pc-alpha apply only to --engine rw2"));
            }
            Ok(Engine::Spline {
                family: s.basis.unwrap_or(BasisFamily::Tprs),
                knots: s.knots.unwrap_or([10, 10, 12]),
            })
        }
        EngineKind::Rw2 => {
            if s.basis.is_some() || s.knots.is_some() {
                return Err(invalid("--basis/--knots apply only to --engine spline"));
            }
            let u = s.pc_u.unwrap_or(1.0);
            let alpha = s.pc_alpha.unwrap_or(0.01);
            if !(u > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
                return Err(invalid(format!(
                    "--pc-u must be > 0 and --pc-alpha in (0, 1), got {u}, {alpha}"
                )));
            }
            Ok(Engine::Rw2 { u, alpha })
        }
    }
}

fn cmd_fit(ctx: &RunContext, args: &FitArgs, forecast: bool) -> Result<(), CliError> {
    let flags = Settings {
        data: args.data.clone(),
        engine: args.engine,
        basis: args.basis.map(Into::into),
        knots: match &args.knots {
            Some(k) => Some(
                <[usize; 3]>::try_from(k.as_slice())
                    .map_err(|_| invalid("--knots needs three values"))?,
            ),
            None => None,
        },
        pc_u: args.pc_u,
        pc_alpha: args.pc_alpha,
        train_through: args.train_through,
        horizon: args.horizon,
        slopes: args.slopes.map(Into::into),
        ..schema_settings(&args.schema)
    };
    let s = merge(&args.common, flags)?;
    let engine = resolve_engine(&s)?;
    let data_path = Settings::require(&s.data, "data")?;
    let data = ApcDataset::load_csv(data_path, &s.schema())?;

    let last = *data.periods().last().expect("non-empty dataset");
    let train_through = s.train_through.unwrap_or(if forecast {
        last - 3.min(data.n_periods() as i32 - 1)
    } else {
        last
    });
    let n_train = data
        .periods()
        .iter()
        .take_while(|&&p| p <= train_through)
        .count();
    if n_train == 0 || data.period_index(train_through).is_none() {
        return Err(invalid(format!(
            "--train-through {train_through} is not a period in the data"
        )));
    }
    let available = data.n_periods() - n_train;
    let horizon = match s.horizon {
        Some(h) if h > available => {
            return Err(invalid(format!(
            "--horizon {h} exceeds the {available} period(s) after --train-through with exposures"
        )))
        }
        Some(h) => h,
        None if forecast => available.min(3),
        None => available,
    };
    if forecast && horizon == 0 {
        return Err(invalid(
            "forecast needs at least one period after --train-through",
        ));
    }

    let fitted = fit_engine(
        &engine,
        &data,
        n_train,
        horizon,
        s.slopes.unwrap_or_default(),
    )?;
    let dir = s.out_dir();
    create_out(&dir)?;
    let name = if forecast { "forecast.csv" } else { "fit.csv" };
    fitted.result.save_csv(dir.join(name))?;
    ctx.write_manifest(
        &dir,
        if forecast { "forecast" } else { "fit" },
        &s,
        &[data_path.as_path()],
        Some(engine.name()),
        serde_json::json!({
            "engine": engine,
            "train_through": train_through,
            "horizon": horizon,
            "fit": fitted.diagnostics,
        }),
    )
}

fn cmd_score(ctx: &RunContext, args: &ScoreArgs) -> Result<(), CliError> {
    let flags = Settings {
        fit: args.fit.clone(),
        truth: args.truth.clone(),
        data: args.data.clone(),
        correction: args.correction,
        split_year: args.split_year,
        alpha: args.alpha,
        scale: args.scale.map(|s| match s {
            ScaleArg::Log => Scale::Log,
            ScaleArg::Rate => Scale::Rate,
        }),
        ..schema_settings(&args.schema)
    };
    let s = merge(&args.common, flags)?;
    let fit_path = Settings::require(&s.fit, "fit")?;
    let fit = FitResult::load_csv(fit_path)?;
    let (truth, truth_path) = match (&s.truth, &s.data) {
        (Some(t), None) => (TruthTable::load_csv(t)?, t),
        (None, Some(d)) => {
            let data = ApcDataset::load_csv(d, &s.schema())?;
            (
                TruthTable::from_observed(&data, s.correction.unwrap_or(0.5))?,
                d,
            )
        }
        (Some(_), Some(_)) => return Err(invalid("give either --truth or --data, not both")),
        (None, None) => return Err(invalid("missing required --truth or --data")),
    };
    let alpha = s.alpha.unwrap_or(0.05);
    let reports = score_fit(
        &fit,
        &truth,
        s.split_year,
        alpha,
        s.scale.unwrap_or_default(),
    )?;

    let dir = s.out_dir();
    create_out(&dir)?;
    let mut w =
        csv::Writer::from_path(dir.join("scores.csv")).map_err(|e| invalid(e.to_string()))?;
    for r in &reports {
        w.serialize(r).map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    println!("window      MAE(x1e2)  MSE(x1e2)  IS(x1e2)  width(x1e2)  coverage(%)  cells");
    for r in &reports {
        println!(
            "{:<10} {:>10.3} {:>10.3} {:>9.3} {:>12.3} {:>12.2} {:>6}",
            r.window.as_str(),
            100.0 * r.mae,
            100.0 * r.mse,
            100.0 * r.interval_score,
            100.0 * r.mean_width,
            100.0 * r.coverage,
            r.n_cells
        );
    }
    ctx.write_manifest(
        &dir,
        "score",
        &s,
        &[fit_path.as_path(), truth_path.as_path()],
        None,
        serde_json::to_value(&reports)?,
    )
}

fn parse_engine_name(name: &str) -> Result<Engine, CliError> {
    let lower = name.trim().to_ascii_lowercase();
    Engine::study_set()
        .into_iter()
        .find(|e| e.name().to_ascii_lowercase() == lower)
        .ok_or_else(|| invalid(format!("--engines: unknown engine {name:?}")))
}

fn cmd_simulate(ctx: &RunContext, args: &SimArgs) -> Result<(), CliError> {
    let flags = Settings {
        replicates: args.replicates,
        truth_spec: args.truth_spec.clone(),
        engines: args.engines.clone(),
        keep_fits: args.keep_fits.then_some(true),
        ..Settings::default()
    };
    let s = merge(&args.common, flags)?;
    let defaults = SimConfig::default();
    let config = SimConfig {
        replicates: s.replicates.unwrap_or(defaults.replicates),
        seed: s.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    config.validate()?;
    let spec = match &s.truth_spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid(format!("--truth-spec {}: {e}", p.display())))?;
            serde_json::from_str::<TruthSpec>(&text)
                .map_err(|e| invalid(format!("--truth-spec: {e}")))?
        }
        None => TruthSpec::default(),
    };
    let engines = match &s.engines {
        Some(names) => names
            .iter()
            .map(|n| parse_engine_name(n))
            .collect::<Result<Vec<_>, _>>()?,
        None => Engine::study_set(),
    };
    let keep_fits = s.keep_fits.unwrap_or(false);
    let opts = StudyOptions {
        keep_fits,
        ..StudyOptions::default()
    };
    let out = run_study(&spec, &config, &engines, &opts)?;

    let dir = s.out_dir();
    create_out(&dir)?;
    out.save(&dir)?;
    std::fs::write(
        dir.join("truth_spec.json"),
        serde_json::to_string_pretty(&spec)? + "\n",
    )?;
    std::fs::write(
        dir.join("sim_config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    spec.aggregated_truth(&config)?
        .write_csv(std::fs::File::create(dir.join("truth.csv"))?)?;
    if keep_fits {
        let fits_dir = dir.join("fits");
        create_out(&fits_dir)?;
        for (r, name, fit) in &out.fits {
            fit.save_csv(fits_dir.join(format!("rep{r:03}_{}.csv", name.to_ascii_lowercase())))?;
        }
    }
    println!("engine     window      MAE(x1e2)  IS(x1e2)  width(x1e2)  coverage(%)  reps  failed");
    for r in &out.summary {
        println!(
            "{:<10} {:<10} {:>10.3} {:>9.3} {:>12.3} {:>12.2} {:>5} {:>7}",
            r.engine,
            r.window.as_str(),
            100.0 * r.mae,
            100.0 * r.interval_score,
            100.0 * r.mean_width,
            100.0 * r.coverage,
            r.n_replicates,
            r.n_failed
        );
    }
    let inputs: Vec<&Path> = s.truth_spec.iter().map(|p| p.as_path()).collect();
    ctx.write_manifest(
        &dir,
        "simulate",
        &s,
        &inputs,
        Some(
            engines
                .iter()
                .map(|e| e.name())
                .collect::<Vec<_>>()
                .join(","),
        ),
        serde_json::json!({
            "config": config,
            "failure_rate": out.failure_rate(),
            "failures": out.failures,
        }),
    )
}

fn cmd_compare(ctx: &RunContext, args: &CompareArgs) -> Result<(), CliError> {
    let flags = Settings {
        a: args.a.clone(),
        b: args.b.clone(),
        ..Settings::default()
    };
    let s = merge(&args.common, flags)?;
    let pa = Settings::require(&s.a, "a")?;
    let pb = Settings::require(&s.b, "b")?;
    let cmp = compare(&FitResult::load_csv(pa)?, &FitResult::load_csv(pb)?)
        .map_err(|e| invalid(e.to_string()))?;

    let dir = s.out_dir();
    create_out(&dir)?;
    let mut w =
        csv::Writer::from_path(dir.join("compare.csv")).map_err(|e| invalid(e.to_string()))?;
    w.write_record(["age", "period", "window", "eta_a", "eta_b", "diff"])
        .map_err(|e| invalid(e.to_string()))?;
    for r in &cmp.rows {
        w.write_record([
            r.age.clone(),
            r.period.to_string(),
            r.window.as_str().to_string(),
            format!("{:.16e}", r.eta_a),
            format!("{:.16e}", r.eta_b),
            format!("{:.16e}", r.diff),
        ])
        .map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    println!(
        "cells {}  correlation {:.6}  max|diff| {:.6}  median|diff| {:.6}",
        cmp.rows.len(),
        cmp.correlation,
        cmp.max_abs_diff,
        cmp.median_abs_diff
    );
    ctx.write_manifest(
        &dir,
        "compare",
        &s,
        &[pa.as_path(), pb.as_path()],
        None,
        serde_json::json!({
            "cells": cmp.rows.len(),
            "correlation": cmp.correlation,
            "max_abs_diff": cmp.max_abs_diff,
            "median_abs_diff": cmp.median_abs_diff,
        }),
    )
}

fn cmd_plot_data(ctx: &RunContext, args: &PlotArgs) -> Result<(), CliError> {
    let flags = Settings {
        data: args.data.clone(),
        fits: (!args.fits.is_empty()).then(|| args.fits.clone()),
        labels: (!args.labels.is_empty()).then(|| args.labels.clone()),
        correction: args.correction,
        ..schema_settings(&args.schema)
    };
    let s = merge(&args.common, flags)?;
    let data_path = Settings::require(&s.data, "data")?;
    let data = ApcDataset::load_csv(data_path, &s.schema())?;
    let correction = s.correction.unwrap_or(0.5);
    let surface = data.log_rates(correction)?;
    let fits = s.fits.clone().unwrap_or_default();
    let labels: Vec<String> = match &s.labels {
        Some(l) if l.len() != fits.len() => {
            return Err(invalid(format!(
                "{} --label values for {} --fit files",
                l.len(),
                fits.len()
            )))
        }
        Some(l) => l.clone(),
        None => fits
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };

    let dir = s.out_dir();
    create_out(&dir)?;
    let csv_err = |e: csv::Error| invalid(e.to_string());
    let mut heat = csv::Writer::from_path(dir.join("heatmap.csv")).map_err(csv_err)?;
    heat.write_record(["age", "period", "count", "exposure", "observed_log_rate"])
        .map_err(csv_err)?;
    for (a, g) in data.age_groups().iter().enumerate() {
        for (p, year) in data.periods().iter().enumerate() {
            heat.write_record([
                g.label.clone(),
                year.to_string(),
                data.count(a, p).to_string(),
                format!("{:.16e}", data.exposure(a, p)),
                format!("{:.16e}", surface.get(a, p)),
            ])
            .map_err(csv_err)?;
        }
    }
    heat.flush()?;

    let mut line = csv::Writer::from_path(dir.join("lineplot.csv")).map_err(csv_err)?;
    line.write_record([
        "model",
        "age",
        "period",
        "observed_log_rate",
        "eta_hat",
        "lower",
        "upper",
        "window",
    ])
    .map_err(csv_err)?;
    for (path, label) in fits.iter().zip(&labels) {
        let fit = FitResult::load_csv(path)?;
        for r in &fit.rows {
            let a = data.age_groups().iter().position(|g| g.label == r.age);
            let observed = match (a, data.period_index(r.period)) {
                (Some(a), Some(p)) => format!("{:.16e}", surface.get(a, p)),
                _ => String::new(),
            };
            line.write_record([
                label.clone(),
                r.age.clone(),
                r.period.to_string(),
                observed,
                format!("{:.16e}", r.eta_hat),
                format!("{:.16e}", r.lower),
                format!("{:.16e}", r.upper),
                r.window.as_str().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    line.flush()?;

    let mut inputs: Vec<&Path> = vec![data_path.as_path()];
    inputs.extend(fits.iter().map(|p| p.as_path()));
    ctx.write_manifest(
        &dir,
        "plot-data",
        &s,
        &inputs,
        None,
        serde_json::json!({ "models": labels, "correction": correction, "windows": [Window::Estimation, Window::Prediction] }),
    )
}
