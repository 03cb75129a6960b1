use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use smart_tmle::config::{parse_contrasts, RunConfig};
use smart_tmle::data::{parse_dataset, write_dataset, IngestOptions};
use smart_tmle::error::{Error, Result};
use smart_tmle::hal::HalConfig;
use smart_tmle::inference::{contrast_test_with, regime_inference, ContrastResult};
use smart_tmle::plot::power_svg;
use smart_tmle::regime::{Regime, RegimeLabel};
use smart_tmle::simulator::{run_power_study, simulate_trial, write_power_csv, PowerCell, PowerStudyConfig};
use smart_tmle::tmle::{estimate_regimes, TmleFit};

/// Environment variable overriding the configured output directory.
const OUT_DIR_ENV: &str = "SMART_TMLE_OUT_DIR";

#[derive(Parser)]
#[command(name = "smart-tmle", version, about = "TMLE for sequentially randomized trials with dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trial dataset.
    Simulate(Common),
    /// Estimate regime means and contrasts from a dataset CSV.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (overrides `estimate.data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the replicated power study over a parameter grid.
    Power(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config document.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (also settable through SMART_TMLE_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Poisson GLM initial fits instead of the super learner.
    #[arg(long)]
    no_superlearner: bool,
    /// Override any config key, e.g. `--set simulate.n=300`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self, data: Option<&Path>) -> Result<RunConfig> {
        let document = match &self.config {
            Some(p) => Some(fs::read_to_string(p)?),
            None => None,
        };
        let mut overrides = Vec::new();
        let quote = |p: &Path| serde_json::to_string(&p.to_string_lossy()).expect("string serializes");
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            overrides.push(("out".to_string(), quote(Path::new(&dir))));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(p) = &self.out {
            overrides.push(("out".into(), quote(p)));
        }
        if let Some(a) = self.alpha {
            overrides.push(("alpha".into(), a.to_string()));
        }
        if let Some(r) = self.reps {
            overrides.push(("reps".into(), r.to_string()));
        }
        if self.no_superlearner {
            overrides.push(("estimator.superlearner".into(), "false".into()));
        }
        if let Some(p) = data {
            overrides.push(("estimate.data".into(), quote(p)));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' must look like key=value")))?;
            overrides.push((k.trim().to_string(), v.to_string()));
        }
        RunConfig::build(document.as_deref(), &overrides)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_metadata(path: &Path, command: &str, config: &RunConfig, outputs: &[&Path]) -> Result<()> {
    let meta = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": config.seed,
        "config": config,
        "outputs": outputs.iter().map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        "outcome_model": {
            "mean_multiplier": "max(Y_{t-1}, 0.2)",
            "treatment_index": "min(t-1, 1): the stage-0 arm drives Y1, the stage-1 arm drives Y2 and Y3",
            "missingness": "monotone; per-visit miss probability expit(alpha0 + miss_w*W0 + miss_y*Y_{t-1})",
        },
        "variance_form": config.estimator.variance,
        "hal_defaults": HalConfig::default(),
    });
    write_atomic(path, serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_simulate(config: &RunConfig) -> Result<bool> {
    let mut params = config.simulate.clone();
    params.seed = config.seed;
    let data = simulate_trial(&params, config.seed)?;
    fs::create_dir_all(&config.out)?;
    let path = config.out.join("dataset.csv");
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf)?;
    write_atomic(&path, &buf)?;
    write_metadata(&meta_path(&path), "simulate", config, &[&path])?;
    info!("wrote {} subjects to {}", data.n(), path.display());
    Ok(true)
}

fn cmd_estimate(config: &RunConfig) -> Result<bool> {
    let path = config
        .estimate
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (use --data or estimate.data)".into()))?;
    let options = IngestOptions { coerce_monotone: config.estimate.coerce_monotone, ..IngestOptions::default() };
    let data = parse_dataset(BufReader::new(fs::File::open(path)?), options)?;
    let contrasts = parse_contrasts(&config.estimate.contrasts)?;
    let mut labels: Vec<RegimeLabel> = config.estimate.regimes.clone();
    labels.extend(contrasts.iter().flat_map(|c| [c.minuend, c.subtrahend]));
    labels.sort();
    labels.dedup();
    let regimes: Vec<Regime> = labels.iter().map(|&l| Regime::new(l)).collect();
    let tmle = config.estimator.tmle_config(config.seed)?;
    let results = estimate_regimes(&data, &regimes, &tmle)?;

    let mut ok = true;
    let mut reports = Vec::new();
    let mut fits: Vec<(RegimeLabel, &TmleFit)> = Vec::new();
    let mut warned: Vec<String> = Vec::new();
    let regime_csv = csv_bytes(|w| {
        w.write_record([
            "regime", "estimate", "se", "ci_lower", "ci_upper", "ee_residual_1", "ee_residual_2", "ee_residual_3",
            "flags",
        ])?;
        for (label, result) in labels.iter().zip(&results) {
            match result {
                Ok(fit) => {
                    let inf = regime_inference(fit, config.alpha, config.estimator.variance)?;
                    let ee = fit.ee_residuals();
                    let flags = fit.diagnostics.flags.join("; ");
                    for f in &fit.diagnostics.flags {
                        if !warned.contains(f) {
                            warn!("{f}");
                            warned.push(f.clone());
                        }
                    }
                    w.write_record([
                        label.to_string(),
                        inf.estimate.to_string(),
                        inf.se.to_string(),
                        inf.ci_lower.to_string(),
                        inf.ci_upper.to_string(),
                        ee[0].to_string(),
                        ee[1].to_string(),
                        ee[2].to_string(),
                        flags,
                    ])?;
                    reports.push(json!({ "regime": label, "fit": fit.report(), "inference": inf }));
                    fits.push((*label, fit));
                }
                Err(e) => {
                    ok = false;
                    eprintln!("error: regime {label}: {e}");
                    reports.push(json!({ "regime": label, "error": e.to_string() }));
                }
            }
        }
        Ok(())
    })?;

    let mut contrast_results: Vec<ContrastResult> = Vec::new();
    let get = |l: RegimeLabel| fits.iter().find(|(k, _)| *k == l).map(|(_, f)| *f);
    let mut contrast_errors = Vec::new();
    for c in &contrasts {
        match (get(c.minuend), get(c.subtrahend)) {
            (Some(f1), Some(f2)) => match contrast_test_with(f1, f2, config.alpha, config.estimator.variance) {
                Ok(r) => contrast_results.push(r),
                Err(e) => {
                    ok = false;
                    eprintln!("error: contrast {c}: {e}");
                    contrast_errors.push(json!({ "contrast": c.label(), "error": e.to_string() }));
                }
            },
            _ => {
                ok = false;
                eprintln!("error: contrast {c}: a regime estimate is unavailable");
                contrast_errors.push(json!({ "contrast": c.label(), "error": "regime estimate unavailable" }));
            }
        }
    }
    let contrast_csv = csv_bytes(|w| {
        w.write_record(["contrast", "estimate", "se", "ci_lower", "ci_upper", "z", "p_value", "reject"])?;
        for r in &contrast_results {
            w.write_record([
                r.contrast.label(),
                r.estimate.to_string(),
                r.se.to_string(),
                r.ci_lower.to_string(),
                r.ci_upper.to_string(),
                r.z.to_string(),
                r.p_value.to_string(),
                r.reject.to_string(),
            ])?;
        }
        Ok(())
    })?;

    fs::create_dir_all(&config.out)?;
    let report_path = config.out.join("fit_report.json");
    let regimes_path = config.out.join("regimes.csv");
    let contrasts_path = config.out.join("contrasts.csv");
    let report = json!({
        "n": data.n(),
        "alpha": config.alpha,
        "regimes": reports,
        "contrasts": contrast_results,
        "contrast_errors": contrast_errors,
    });
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&regimes_path, &regime_csv)?;
    write_atomic(&contrasts_path, &contrast_csv)?;
    write_metadata(
        &config.out.join("estimate.meta.json"),
        "estimate",
        config,
        &[&report_path, &regimes_path, &contrasts_path],
    )?;
    Ok(ok)
}

fn cmd_power(config: &RunConfig) -> Result<bool> {
    let contrasts = parse_contrasts(&config.power.contrasts)?;
    let study = PowerStudyConfig {
        grid: config.power.cells(),
        contrasts: contrasts.clone(),
        reps: config.reps,
        alpha: config.alpha,
        tmle: config.estimator.tmle_config(config.seed)?,
        variance: config.estimator.variance,
        master_seed: config.seed,
        n_truth: config.power.n_truth,
    };
    info!("power study: {} cells x {} replications", study.grid.len(), study.reps);
    let cells = run_power_study(&study)?;
    fs::create_dir_all(&config.out)?;
    let csv_path = config.out.join("power.csv");
    let mut buf = Vec::new();
    write_power_csv(&cells, &mut buf)?;
    write_atomic(&csv_path, &buf)?;
    let mut outputs = vec![csv_path.clone()];
    let mut alphas: Vec<f64> = config.power.alpha0.clone();
    alphas.dedup();
    for c in &contrasts {
        for &a0 in &alphas {
            let subset: Vec<&PowerCell> =
                cells.iter().filter(|p| p.contrast == *c && p.params.alpha0 == a0).collect();
            let (name, title) = if alphas.len() == 1 {
                (format!("power_{}.svg", c.label()), format!("Contrast {c}"))
            } else {
                (format!("power_{}_alpha0_{a0}.svg", c.label()), format!("Contrast {c}, alpha0 = {a0}"))
            };
            let path = config.out.join(name);
            write_atomic(&path, power_svg(&title, &subset).as_bytes())?;
            outputs.push(path);
        }
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_metadata(&config.out.join("power.meta.json"), "power", config, &refs)?;
    let flagged = cells.iter().filter(|c| c.flagged).count();
    if flagged > 0 {
        warn!("{flagged} cells had more than 2% failed replications");
    }
    Ok(cells.iter().all(|c| c.failures < c.reps))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(common) => cmd_simulate(&common.load(None)?),
        Command::Estimate { common, data } => cmd_estimate(&common.load(data.as_deref())?),
        Command::Power(common) => cmd_power(&common.load(None)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
