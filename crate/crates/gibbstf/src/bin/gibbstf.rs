//! Command-line driver: simulate patterns, fit them, replicate experiments,
//! run the covariance study and the model diagnostics.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when every
//! replicate of an experiment failed, 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gibbstf::diagnostics::{
    contrast_profile, det_check, det_prime_check, gnz_balance, DetCheckOptions, GnzOptions,
    ProfileOptions, ThetaGrid,
};
use gibbstf::error::Error;
use gibbstf::estimate::{
    fit_mple, fit_strauss_explicit, fit_tf, MpleOptions, QuadratureScheme, SimplexOptions,
    TfOptions,
};
use gibbstf::experiment::{
    records_to_csv, run_covariance_study, run_replication, summary_to_csv, AnyModel,
    ExperimentConfig, ModelSpec, SamplerSettings,
};
use gibbstf::geometry::Window;
use gibbstf::io::{default_sidecar_path, read_pattern, write_pattern};
use gibbstf::sim::sample_gibbs;
use gibbstf::testfn::{build_test_functions, TestFnSpec};

#[derive(Parser)]
#[command(
    name = "gibbstf",
    about = "Simulation and Takacs-Fiksel estimation for finite-range Gibbs point processes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a model on a window and write the pattern as CSV.
    Simulate(SimulateArgs),
    /// Fit a pattern file with one estimation method.
    Estimate(EstimateArgs),
    /// Run a seeded replication experiment from a JSON config.
    Replicate(ConfigArgs),
    /// Empirical-versus-asymptotic covariance study from a JSON config.
    Covariance(ConfigArgs),
    /// Assumption and identifiability diagnostics from a JSON config.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model: JSON spec or a name (poisson|strauss|area) combined with --R.
    #[arg(long)]
    model: String,
    /// Interaction radius when --model is a bare name.
    #[arg(long, name = "R")]
    r: Option<f64>,
    /// Parameter vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,
    /// Lower window corner, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Vec<f64>,
    /// Upper window corner, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Vec<f64>,
    /// Boundary collar added around the window before sampling.
    #[arg(long, default_value_t = 0.0)]
    collar: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    burn_in: u64,
    #[arg(long, default_value_t = 200)]
    steps_per_point: u64,
    /// Output CSV path; the carrier window goes to `<out>.window.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Pattern CSV (sidecar `<pattern>.window.json` must exist).
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long, name = "R")]
    r: Option<f64>,
    /// Estimation method.
    #[arg(long, value_parser = ["tf", "mple", "explicit"])]
    method: String,
    /// Test functions for --method tf, as a JSON array.
    #[arg(long)]
    h: Option<String>,
    /// Erosion width; defaults to the model's interaction range.
    #[arg(long)]
    erode: Option<f64>,
    #[arg(long, default_value = "stratified_grid", value_parser = ["stratified_grid", "monte_carlo"])]
    quad_kind: String,
    #[arg(long, default_value_t = 16_384)]
    n_dummy: usize,
    #[arg(long, default_value_t = 0)]
    quad_seed: u64,
    /// Coverage-grid resolution per axis for the explicit estimator.
    #[arg(long, default_value_t = 512)]
    vk_resolution: usize,
    /// Use the closed-form integral for test functions that admit one.
    #[arg(long, default_value_t = false)]
    fiksel_shortcut: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_parser = ["gnz", "profile", "det"])]
    check: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct DiagnoseConfig {
    model: ModelSpec,
    theta_star: Vec<f64>,
    h: Vec<TestFnSpec>,
    window: WindowSpec,
    #[serde(default)]
    sampler: SamplerSettings,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    replicates: Option<usize>,
    // gnz
    #[serde(default)]
    theta_eval: Option<Vec<f64>>,
    // profile
    #[serde(default)]
    grid: Option<ThetaGrid>,
    // det
    #[serde(default)]
    theta_check: Option<Vec<f64>>,
    #[serde(default)]
    bins: Option<usize>,
    #[serde(default)]
    tuples: Option<usize>,
    #[serde(default)]
    locations_per_replicate: Option<usize>,
}

#[derive(Deserialize)]
struct WindowSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

fn parse_model(text: &str, r: Option<f64>) -> Result<AnyModel, Error> {
    let spec: ModelSpec = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad model spec: {e}")))?
    } else {
        match (text, r) {
            ("poisson", _) => ModelSpec::Poisson { bounds: None },
            ("strauss", Some(r)) => ModelSpec::Strauss { r, bounds: None },
            ("area", Some(r)) => ModelSpec::Area { r, bounds: None },
            ("strauss" | "area", None) => {
                return Err(Error::Config(format!("model {text:?} needs --R")))
            }
            _ => return Err(Error::Config(format!("unknown model {text:?}"))),
        }
    };
    spec.build().map_err(|e| Error::Config(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let model = parse_model(&args.model, args.r)?;
    let window = Window::new(args.lower.clone(), args.upper.clone())?.dilated(args.collar)?;
    let sampler = gibbstf::sim::SamplerConfig {
        seed: args.seed,
        burn_in: args.burn_in,
        steps_per_point: args.steps_per_point,
        birth_probability: 0.5,
    };
    let cfg = sample_gibbs(model.as_dyn(), &args.theta, &window, &sampler)?;
    let sidecar = default_sidecar_path(&args.out);
    write_pattern(&cfg, &args.out, &sidecar)?;
    eprintln!(
        "wrote {} points to {} (window in {})",
        cfg.len(),
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn run_estimate(args: &EstimateArgs) -> Result<(), Error> {
    let model = parse_model(&args.model, args.r)?;
    let cfg = read_pattern(&args.pattern, &default_sidecar_path(&args.pattern))?;
    let erosion = args.erode.unwrap_or_else(|| model.as_dyn().range());
    let lambda = cfg.carrier().eroded(erosion)?;
    let quadrature = match args.quad_kind.as_str() {
        "monte_carlo" => QuadratureScheme::MonteCarlo {
            n_dummy: args.n_dummy,
            seed: args.quad_seed,
        },
        _ => QuadratureScheme::stratified(args.n_dummy),
    };
    let report = match args.method.as_str() {
        "explicit" => {
            let strauss = match &model {
                AnyModel::Strauss(s) => s,
                _ => {
                    return Err(Error::Config(
                        "the explicit estimator applies to the Strauss model only".into(),
                    ))
                }
            };
            fit_strauss_explicit(
                &cfg,
                &lambda,
                strauss.interaction_radius(),
                args.vk_resolution,
            )?
        }
        "mple" => fit_mple(
            &cfg,
            &lambda,
            model.as_dyn(),
            &MpleOptions {
                quadrature,
                ..MpleOptions::default()
            },
        )?,
        _ => {
            let spec_text = args
                .h
                .as_ref()
                .ok_or_else(|| Error::Config("--method tf needs --h".into()))?;
            let specs: Vec<TestFnSpec> = serde_json::from_str(spec_text)
                .map_err(|e| Error::Config(format!("bad --h spec: {e}")))?;
            let h = build_test_functions(&specs, &model.to_arc())?;
            fit_tf(
                &cfg,
                &lambda,
                &h,
                model.as_dyn(),
                &TfOptions {
                    quadrature,
                    simplex: SimplexOptions::default(),
                    fiksel_shortcut: args.fiksel_shortcut,
                },
            )?
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&args.out, &json)?;
    eprintln!(
        "theta_hat = {:?} (converged: {})",
        report.theta_hat, report.converged
    );
    Ok(())
}

fn run_replicate(args: &ConfigArgs) -> Result<bool, Error> {
    let config: ExperimentConfig = read_json(&args.config)?;
    let result = run_replication(&config)?;
    let p = config.theta_star.len();
    write_text(&args.out_dir.join("summary.csv"), &summary_to_csv(&result))?;
    write_text(
        &args.out_dir.join("replicates.csv"),
        &records_to_csv(&result, p),
    )?;
    for row in &result.summary {
        let cells: Vec<String> = row
            .params
            .iter()
            .map(|p| match p.sd {
                Some(sd) => format!("{} {:.4} ({:.4})", p.name, p.mean, sd),
                None => format!("{} {:.4}", p.name, p.mean),
            })
            .collect();
        eprintln!(
            "tau = {}, {}: {} [ok {}, failed {}]",
            row.tau,
            row.method,
            cells.join(", "),
            row.n_success,
            row.n_failed
        );
    }
    Ok(result.all_failed())
}

fn run_covariance(args: &ConfigArgs) -> Result<(), Error> {
    let config: ExperimentConfig = read_json(&args.config)?;
    let study = run_covariance_study(&config)?;
    let json = serde_json::to_string_pretty(&study).expect("study serializes");
    write_text(&args.out_dir.join("covariance.json"), &json)?;
    let mut hist_csv = String::from("param,bin_left,bin_right,count,gaussian_variance\n");
    for h in &study.histograms {
        for (b, &count) in h.counts.iter().enumerate() {
            hist_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                h.param,
                h.edges[b],
                h.edges[b + 1],
                count,
                h.gaussian_variance
            ));
        }
    }
    write_text(&args.out_dir.join("histograms.csv"), &hist_csv)?;
    eprintln!(
        "empirical {:?} vs asymptotic {:?} ({} replicates)",
        study.empirical, study.asymptotic, study.replicates_used
    );
    Ok(())
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<(), Error> {
    let config: DiagnoseConfig = read_json(&args.config)?;
    let model = config.model.build().map_err(|e| Error::Config(e.to_string()))?;
    let model_arc: Arc<dyn gibbstf::models::GibbsModel> = model.to_arc();
    let h = build_test_functions(&config.h, &model_arc)?;
    let carrier = Window::new(config.window.lower.clone(), config.window.upper.clone())?;
    let sampler = config.sampler.config_with_seed(config.seed);
    let json = match args.check.as_str() {
        "gnz" => {
            let report = gnz_balance(
                model.as_dyn(),
                &config.theta_star,
                &h,
                &carrier,
                &GnzOptions {
                    replicates: config.replicates.unwrap_or(100),
                    sampler,
                    theta_eval: config.theta_eval.clone(),
                    ..Default::default()
                },
            )?;
            serde_json::to_string_pretty(&report).expect("report serializes")
        }
        "profile" => {
            let grid = config
                .grid
                .as_ref()
                .ok_or_else(|| Error::Config("profile check needs `grid`".into()))?;
            let report = contrast_profile(
                model.as_dyn(),
                &config.theta_star,
                &h,
                &carrier,
                grid,
                &ProfileOptions {
                    replicates: config.replicates.unwrap_or(20),
                    sampler,
                    ..Default::default()
                },
            )?;
            serde_json::to_string_pretty(&report).expect("report serializes")
        }
        _ => {
            let theta_check = config
                .theta_check
                .clone()
                .unwrap_or_else(|| config.theta_star.clone());
            let options = DetCheckOptions {
                replicates: config.replicates.unwrap_or(20),
                locations_per_replicate: config.locations_per_replicate.unwrap_or(500),
                bins: config.bins.unwrap_or(50),
                tuples: config.tuples.unwrap_or(2000),
                sampler,
            };
            let p = model.as_dyn().param_count();
            if h.len() == p {
                let report = det_check(
                    model.as_dyn(),
                    &config.theta_star,
                    &theta_check,
                    &h,
                    &carrier,
                    &options,
                )?;
                serde_json::to_string_pretty(&report).expect("report serializes")
            } else {
                let report = det_prime_check(
                    model.as_dyn(),
                    &config.theta_star,
                    &theta_check,
                    &h,
                    &carrier,
                    &options,
                )?;
                serde_json::to_string_pretty(&report).expect("report serializes")
            }
        }
    };
    write_text(&args.out, &json)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("GIBBSTF_THREADS") {
        if let Ok(n) = threads.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(args) => run_simulate(args).map(|_| false),
        Command::Estimate(args) => run_estimate(args).map(|_| false),
        Command::Replicate(args) => run_replicate(args),
        Command::Covariance(args) => run_covariance(args).map(|_| false),
        Command::Diagnose(args) => run_diagnose(args).map(|_| false),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: every replicate failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}
