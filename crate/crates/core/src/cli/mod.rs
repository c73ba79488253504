//! The `esm` command line: `simulate`, `fit` and `predict`.
//!
//! Exit status is 0 on success, 1 when a computation fails and 2 for bad
//! input (flags, configuration, data or model files).

pub mod config;
pub mod data;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::codec::{load_ensemble, save_ensemble};
use crate::error::{EsmError, Result};
use crate::esm::{fit_ensemble, Standardizer, SubsampleSize};
use crate::expfam::FamilySpec;
use crate::infer::confidence_intervals;
use crate::net::{InitScheme, NetworkConfig};
use crate::sim::{csv_error, run_experiment_with_progress, summary_text, write_report, Signal, SimDesign};

use self::config::Config;
use self::data::Table;

const DEFAULT_GAMMA: f64 = 0.9;
const DEFAULT_SEED: u64 = 2024;

#[derive(Debug, Parser)]
#[command(name = "esm", version, about = "Ensemble subsampling inference for exponential-family neural regression")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "ESM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation study and write metrics.csv, per_point.csv and manifest.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration entry; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Suppress per-repetition progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Fit an ensemble to a CSV file and save it.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model-out")]
        model_out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Round near-integer responses for the discrete families.
        #[arg(long)]
        coerce: bool,
    },
    /// Point estimates and confidence intervals for every CSV row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
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
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(EsmError::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| EsmError::config("threads", e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            config,
            out,
            overrides,
            quiet,
        } => simulate(&config, &out, &overrides, quiet),
        Command::Fit {
            config,
            data,
            model_out,
            overrides,
            coerce,
        } => fit(&config, &data, &model_out, &overrides, coerce),
        Command::Predict {
            model,
            data,
            alpha,
            out,
        } => predict(&model, &data, alpha, &out),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let mut config = Config::from_path(path)?;
    for assignment in overrides {
        config.set(assignment)?;
    }
    Ok(config)
}

fn family(cfg: &Config) -> Result<FamilySpec> {
    let name = cfg
        .raw("family")
        .ok_or_else(|| EsmError::config("family", "required but not set"))?;
    let mut spec: FamilySpec = name.parse()?;
    let trials: Option<u32> = cfg.get("n_trial")?;
    match (&mut spec, trials) {
        (FamilySpec::Binomial { n_trial }, Some(t)) => *n_trial = t,
        (FamilySpec::Binomial { .. }, None) => {
            return Err(EsmError::config("n_trial", "required for the binomial family"))
        }
        (_, Some(_)) => {
            return Err(EsmError::config("n_trial", "only applies to the binomial family"))
        }
        (_, None) => {}
    }
    spec.validate()?;
    Ok(spec)
}

fn subsample_size(cfg: &Config) -> Result<SubsampleSize> {
    match (cfg.get::<usize>("r")?, cfg.get::<f64>("gamma")?) {
        (Some(_), Some(_)) => Err(EsmError::config("r", "set either r or gamma, not both")),
        (Some(r), None) => Ok(SubsampleSize::Exact(r)),
        (None, gamma) => {
            let gamma = gamma.unwrap_or(DEFAULT_GAMMA);
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(EsmError::config("gamma", "must lie in (0, 1)"));
            }
            Ok(SubsampleSize::Exponent(gamma))
        }
    }
}

fn resolve_size(size: SubsampleSize, n: usize) -> Result<usize> {
    size.resolve(n).map_err(|e| match e {
        EsmError::Design(message) => EsmError::config("r", message),
        other => other,
    })
}

/// `net.*` entries on top of the standard network for `p` inputs.
fn network_config(cfg: &Config, p: usize) -> Result<NetworkConfig> {
    let base = NetworkConfig::standard(p);
    let widths = cfg.get_list::<usize>("net.widths")?.unwrap_or(base.widths);
    if widths.first() != Some(&p) {
        return Err(EsmError::config(
            "net.widths",
            format!("first width must equal the number of features ({p})"),
        ));
    }
    let init = match cfg.raw("net.init") {
        None | Some("he_uniform") => InitScheme::HeUniform,
        Some(other) => {
            return Err(EsmError::config("net.init", format!("unknown scheme {other:?} (expected he_uniform)")))
        }
    };
    let config = NetworkConfig {
        widths,
        learning_rate: cfg.get_or("net.learning_rate", base.learning_rate)?,
        epochs: cfg.get_or("net.epochs", base.epochs)?,
        batch_size: cfg.get_or("net.batch_size", base.batch_size)?,
        dropout_rate: cfg.get_or("net.dropout_rate", base.dropout_rate)?,
        weight_decay: cfg.get_or("net.weight_decay", base.weight_decay)?,
        clamp: cfg.get_or("net.clamp", base.clamp)?,
        init,
        seed: cfg.get_or("net.seed", base.seed)?,
    };
    config.validate()?;
    Ok(config)
}

fn write_manifest(path: &Path, manifest: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| EsmError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn simulate(config_path: &Path, out: &Path, overrides: &[String], quiet: bool) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let family = family(&cfg)?;
    let p = cfg.get_or("p", 10)?;
    let design = SimDesign {
        family,
        n: cfg.require("n")?,
        p,
        size: subsample_size(&cfg)?,
        b: cfg.get_or("b", 1400)?,
        reps: cfg.get_or("reps", 300)?,
        n_test: cfg.get_or("n_test", 80)?,
        alpha: cfg.get_or("alpha", 0.05)?,
        net: network_config(&cfg, p)?,
        seed: cfg.get_or("seed", DEFAULT_SEED)?,
        signal: cfg.get_or("signal", Signal::Baseline)?,
        fixed_rep_seed: cfg.get_or("fixed_rep_seed", false)?,
    };
    cfg.finish()?;
    design.validate()?;
    let r = design.r()?;

    let report = run_experiment_with_progress(&design, |done, total| {
        if !quiet {
            eprintln!("repetition {done}/{total}");
        }
    })?;
    write_report(&report, out)?;
    write_manifest(
        &out.join("manifest.json"),
        &json!({
            "command": "simulate",
            "version": env!("CARGO_PKG_VERSION"),
            "config_file": config_path,
            "overrides": overrides,
            "effective_config": cfg.effective(),
            "design": design,
            "r": r,
            "master_seed": design.seed,
        }),
    )?;
    print!("{}", summary_text(&report));
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitSettings {
    family: FamilySpec,
    response: String,
    features: Vec<String>,
    n: usize,
    r: usize,
    b: usize,
    master_seed: u64,
    standardize: bool,
    coerce: bool,
    net: NetworkConfig,
}

fn fit(config_path: &Path, data_path: &Path, model_out: &Path, overrides: &[String], coerce: bool) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let spec = family(&cfg)?;
    let response: String = cfg.get_or("response", "y".to_string())?;
    let feature_names: Option<Vec<String>> = cfg.get_list("features")?;
    let size = subsample_size(&cfg)?;
    let b: usize = cfg.get_or("b", 1400)?;
    let master_seed: u64 = cfg.get_or("seed", DEFAULT_SEED)?;
    let standardize: bool = cfg.get_or("standardize", false)?;

    let table = Table::read(data_path)?;
    let response_col = table.column_index(&response).ok_or_else(|| {
        EsmError::config(
            "response",
            format!(
                "column `{response}` not found in {} (columns: {})",
                data_path.display(),
                table.headers.join(", ")
            ),
        )
    })?;
    let feature_cols: Vec<usize> = match &feature_names {
        Some(names) => names
            .iter()
            .map(|name| {
                table
                    .column_index(name)
                    .ok_or_else(|| EsmError::config("features", format!("column `{name}` not found")))
            })
            .collect::<Result<_>>()?,
        None => (0..table.headers.len()).filter(|&c| c != response_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(EsmError::config("features", "no feature columns"));
    }
    if feature_cols.contains(&response_col) {
        return Err(EsmError::config("features", "the response column cannot be a feature"));
    }
    let p = feature_cols.len();
    let net = network_config(&cfg, p)?;
    cfg.finish()?;

    // parse features and response together so the first bad row is reported
    let mut columns = feature_cols.clone();
    columns.push(response_col);
    let joined = table.numeric_matrix(&columns)?;
    let n = joined.rows();
    if n == 0 {
        return Err(EsmError::data(1, "data file has no rows"));
    }
    let mut features = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for (i, row) in joined.iter_rows().enumerate() {
        features.extend_from_slice(&row[..p]);
        y.push(spec.validate_response(row[p], i + 1, coerce)?);
    }
    let x = crate::matrix::Matrix::new(n, p, features)?;
    let r = resolve_size(size, n)?;

    let standardizer = standardize.then(|| Standardizer::fit(&x));
    let train_x = match &standardizer {
        Some(s) => s.apply(&x),
        None => x,
    };
    let mut model = fit_ensemble(&train_x, &y, &spec, &net, r, b, master_seed)?;
    model.standardizer = standardizer;
    model.feature_names = feature_cols.iter().map(|&c| table.headers[c].clone()).collect();
    save_ensemble(&model, model_out)?;

    let mean_loss = model.networks.iter().map(|n| n.final_train_loss()).sum::<f64>() / model.b() as f64;
    let settings = FitSettings {
        family: spec,
        response,
        features: model.feature_names.clone(),
        n,
        r,
        b,
        master_seed,
        standardize,
        coerce,
        net,
    };
    write_manifest(
        &with_suffix(model_out, ".manifest.json"),
        &json!({
            "command": "fit",
            "version": env!("CARGO_PKG_VERSION"),
            "config_file": config_path,
            "data": data_path,
            "overrides": overrides,
            "effective_config": cfg.effective(),
            "settings": settings,
            "master_seed": master_seed,
            "mean_train_loss": mean_loss,
        }),
    )?;
    println!("family: {spec}");
    println!("n: {n}");
    println!("p: {p}");
    println!("r: {r}");
    println!("B: {b}");
    println!("mean final training loss: {mean_loss:.6}");
    Ok(())
}

/// Header of the prediction file.
pub const PREDICT_HEADER: [&str; 8] = [
    "row_id",
    "fhat_canonical",
    "mean_estimate",
    "se_uncorrected",
    "se_corrected",
    "clamped",
    "mean_ci_lower",
    "mean_ci_upper",
];

/// Feature columns by stored name when all are present, else positional
/// when the column count matches.
fn prediction_columns(table: &Table, names: &[String], p: usize) -> Result<Vec<usize>> {
    if !names.is_empty() {
        let found: Option<Vec<usize>> = names.iter().map(|n| table.column_index(n)).collect();
        if let Some(cols) = found {
            return Ok(cols);
        }
    }
    if table.headers.len() == p {
        return Ok((0..p).collect());
    }
    Err(EsmError::Format(format!(
        "data has {} columns but the model expects p = {p} features{}",
        table.headers.len(),
        if names.is_empty() {
            String::new()
        } else {
            format!(" ({})", names.join(", "))
        }
    )))
}

fn predict(model_path: &Path, data_path: &Path, alpha: f64, out: &Path) -> Result<()> {
    crate::infer::critical_value(alpha)?;
    let model = load_ensemble(model_path)?;
    let table = Table::read(data_path)?;
    let cols = prediction_columns(&table, &model.feature_names, model.input_dim())?;
    let x = table.numeric_matrix(&cols)?;
    let results = confidence_intervals(&model, &x, alpha)?;

    let mut writer = csv::Writer::from_path(out).map_err(csv_error)?;
    writer.write_record(PREDICT_HEADER).map_err(csv_error)?;
    for (k, c) in results.iter().enumerate() {
        writer
            .write_record([
                (k + 1).to_string(),
                c.fhat.to_string(),
                c.mean_estimate(&model.spec).to_string(),
                c.se_uncorrected.to_string(),
                c.se_corrected.to_string(),
                c.clamped_negative.to_string(),
                c.ci_lower_mean.to_string(),
                c.ci_upper_mean.to_string(),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    write_manifest(
        &with_suffix(out, ".manifest.json"),
        &json!({
            "command": "predict",
            "version": env!("CARGO_PKG_VERSION"),
            "model": model_path,
            "data": data_path,
            "alpha": alpha,
            "rows": results.len(),
            "family": model.spec,
            "r": model.design.r(),
            "b": model.b(),
            "master_seed": model.master_seed,
            "net": model.config,
        }),
    )?;
    Ok(())
}
