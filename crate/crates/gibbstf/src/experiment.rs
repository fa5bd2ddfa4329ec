//! Seeded replication experiments: estimator comparison tables and the
//! covariance study, as driven by the command-line interface.
//!
//! One master pattern is simulated per replicate on the largest requested
//! window (plus collar); estimates are then computed on each nested window
//! after erosion. Replicate `r` always uses seed `base_seed + r`, so runs are
//! reproducible and individual replicates can be re-run in isolation.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    estimate_e, estimate_sigma, matrix_rows, sandwich_covariance, SigmaOptions,
};
use crate::error::{Error, Result};
use crate::estimate::{
    fit_mple, fit_strauss_explicit, fit_tf, ContrastReport, MpleOptions, QuadratureScheme,
    SimplexOptions, TfOptions,
};
use crate::geometry::{Configuration, Window};
use crate::models::{
    AreaModel, GibbsModel, MultiStraussModel, ParameterBox, PoissonModel, StraussModel,
};
use crate::sim::{sample_gibbs, SamplerConfig};
use crate::testfn::{build_test_functions, h_gradv, h_strauss_indicator, TestFnSpec, TestFunction};

/// Per-coordinate bounds, keyed `theta1`, `theta2`, …
pub type BoxSpec = HashMap<String, [f64; 2]>;

fn apply_box_spec(default: &ParameterBox, spec: &Option<BoxSpec>) -> Result<ParameterBox> {
    let mut lower = default.lower().to_vec();
    let mut upper = default.upper().to_vec();
    if let Some(map) = spec {
        for (key, bounds) in map {
            let index: usize = key
                .strip_prefix("theta")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("unknown box key {key:?}")))?;
            if index == 0 || index > lower.len() {
                return Err(Error::Config(format!(
                    "box key {key:?} out of range for {} parameters",
                    lower.len()
                )));
            }
            lower[index - 1] = bounds[0];
            upper[index - 1] = bounds[1];
        }
    }
    ParameterBox::new(lower, upper)
}

/// Declarative model description used in configs and on the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Poisson {
        #[serde(rename = "box", default)]
        bounds: Option<BoxSpec>,
    },
    Strauss {
        #[serde(rename = "R")]
        r: f64,
        #[serde(rename = "box", default)]
        bounds: Option<BoxSpec>,
    },
    MultiStrauss {
        radii: Vec<f64>,
        #[serde(rename = "box", default)]
        bounds: Option<BoxSpec>,
    },
    Area {
        #[serde(rename = "R")]
        r: f64,
        #[serde(rename = "box", default)]
        bounds: Option<BoxSpec>,
    },
}

/// A constructed model retaining its concrete type where estimators need it.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Poisson(PoissonModel),
    Strauss(StraussModel),
    MultiStrauss(MultiStraussModel),
    Area(AreaModel),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn GibbsModel {
        match self {
            Self::Poisson(m) => m,
            Self::Strauss(m) => m,
            Self::MultiStrauss(m) => m,
            Self::Area(m) => m,
        }
    }

    pub fn to_arc(&self) -> Arc<dyn GibbsModel> {
        match self {
            Self::Poisson(m) => Arc::new(m.clone()),
            Self::Strauss(m) => Arc::new(m.clone()),
            Self::MultiStrauss(m) => Arc::new(m.clone()),
            Self::Area(m) => Arc::new(m.clone()),
        }
    }

    pub fn strauss(&self) -> Option<&StraussModel> {
        match self {
            Self::Strauss(m) => Some(m),
            _ => None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<AnyModel> {
        Ok(match self {
            Self::Poisson { bounds } => {
                let base = PoissonModel::new();
                AnyModel::Poisson(PoissonModel::with_box(apply_box_spec(
                    base.parameter_box(),
                    bounds,
                )?)?)
            }
            Self::Strauss { r, bounds } => {
                let base = StraussModel::new(*r)?;
                AnyModel::Strauss(StraussModel::with_box(
                    *r,
                    apply_box_spec(base.parameter_box(), bounds)?,
                )?)
            }
            Self::MultiStrauss { radii, bounds } => {
                let base = MultiStraussModel::new(radii.clone())?;
                AnyModel::MultiStrauss(MultiStraussModel::with_box(
                    radii.clone(),
                    apply_box_spec(base.parameter_box(), bounds)?,
                )?)
            }
            Self::Area { r, bounds } => {
                let base = AreaModel::new(*r)?;
                AnyModel::Area(AreaModel::with_box(
                    *r,
                    apply_box_spec(base.parameter_box(), bounds)?,
                )?)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Tf,
    Mple,
    Explicit,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tf => write!(f, "tf"),
            Self::Mple => write!(f, "mple"),
            Self::Explicit => write!(f, "explicit"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportParametrization {
    BetaGamma,
    Theta,
}

fn default_dummy_per_point() -> f64 {
    4.0
}

fn default_vk_resolution() -> f64 {
    512.0
}

fn default_histogram_bins() -> usize {
    20
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerSettings {
    #[serde(default = "SamplerSettings::default_burn_in")]
    pub burn_in: u64,
    #[serde(default = "SamplerSettings::default_steps_per_point")]
    pub steps_per_point: u64,
    #[serde(default = "SamplerSettings::default_birth_probability")]
    pub birth_probability: f64,
}

impl SamplerSettings {
    fn default_burn_in() -> u64 {
        10_000
    }
    fn default_steps_per_point() -> u64 {
        200
    }
    fn default_birth_probability() -> f64 {
        0.5
    }

    pub fn config_with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            seed,
            burn_in: self.burn_in,
            steps_per_point: self.steps_per_point,
            birth_probability: self.birth_probability,
        }
    }
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            burn_in: Self::default_burn_in(),
            steps_per_point: Self::default_steps_per_point(),
            birth_probability: Self::default_birth_probability(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceStudyConfig {
    pub tau: f64,
    pub method: MethodKind,
    /// Independent long-run simulations used for the plug-in matrices.
    #[serde(default = "CovarianceStudyConfig::default_simulations")]
    pub simulations: usize,
    #[serde(default)]
    pub block_side: Option<f64>,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
}

impl CovarianceStudyConfig {
    fn default_simulations() -> usize {
        20
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub theta_star: Vec<f64>,
    /// Square estimation windows `[0, τ]²`, one per entry.
    pub taus: Vec<f64>,
    /// Collar and erosion width; defaults to the model's interaction range.
    #[serde(default)]
    pub erosion: Option<f64>,
    pub replicates: usize,
    pub base_seed: u64,
    pub methods: Vec<MethodKind>,
    /// Test functions for the `tf` method.
    #[serde(default)]
    pub h: Vec<TestFnSpec>,
    #[serde(default = "default_dummy_per_point")]
    pub dummy_per_point: f64,
    /// Coverage-grid resolution per unit length for the explicit estimator.
    #[serde(default = "default_vk_resolution")]
    pub vk_resolution_per_unit: f64,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub report: Option<ReportParametrization>,
    #[serde(default)]
    pub covariance: Option<CovarianceStudyConfig>,
}

pub struct PreparedExperiment {
    pub model: AnyModel,
    pub h_tf: Vec<Arc<dyn TestFunction>>,
    pub erosion: f64,
    pub report: ReportParametrization,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<PreparedExperiment> {
        if self.replicates < 1 {
            return Err(Error::Config("need at least one replicate".into()));
        }
        if self.taus.is_empty() || self.taus.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("window sizes must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no estimation methods requested".into()));
        }
        let model = self.model.build().map_err(|e| Error::Config(e.to_string()))?;
        let p = model.as_dyn().param_count();
        if self.theta_star.len() != p {
            return Err(Error::Config(format!(
                "theta_star has length {}, the model has {p} parameters",
                self.theta_star.len()
            )));
        }
        if !model.as_dyn().parameter_box().contains(&self.theta_star) {
            return Err(Error::Config(
                "theta_star lies outside the parameter box".into(),
            ));
        }
        if self.methods.contains(&MethodKind::Explicit) && model.strauss().is_none() {
            return Err(Error::Config(
                "the explicit estimator applies to the Strauss model only".into(),
            ));
        }
        let h_tf = if self.methods.contains(&MethodKind::Tf) {
            if self.h.is_empty() {
                return Err(Error::Config(
                    "the tf method needs a list of test functions".into(),
                ));
            }
            let fns = build_test_functions(&self.h, &model.to_arc())
                .map_err(|e| Error::Config(e.to_string()))?;
            if fns.len() < p {
                return Err(Error::Config(format!(
                    "the tf method needs at least {p} test functions, got {}",
                    fns.len()
                )));
            }
            fns
        } else {
            Vec::new()
        };
        if let Some(cov) = &self.covariance {
            if !self.methods.contains(&cov.method) {
                return Err(Error::Config(
                    "the covariance-study method must be listed in `methods`".into(),
                ));
            }
            if !self.taus.contains(&cov.tau) {
                return Err(Error::Config(
                    "the covariance-study window must be listed in `taus`".into(),
                ));
            }
        }
        let erosion = self.erosion.unwrap_or_else(|| model.as_dyn().range());
        let report = match &self.report {
            Some(r) => r.clone(),
            None => match model {
                AnyModel::Strauss(_) => ReportParametrization::BetaGamma,
                _ => ReportParametrization::Theta,
            },
        };
        Ok(PreparedExperiment {
            model,
            h_tf,
            erosion,
            report,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success {
        theta: Vec<f64>,
        converged: bool,
        u_value: f64,
    },
    Failure {
        message: String,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicateRecord {
    pub tau: f64,
    pub method: MethodKind,
    pub replicate: usize,
    pub seed: u64,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub tau: f64,
    pub method: MethodKind,
    pub n_success: usize,
    pub n_failed: usize,
    pub params: Vec<ParamSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicationResult {
    pub records: Vec<ReplicateRecord>,
    pub summary: Vec<SummaryRow>,
}

impl ReplicationResult {
    pub fn all_failed(&self) -> bool {
        self.records
            .iter()
            .all(|r| matches!(r.outcome, Outcome::Failure { .. }))
    }
}

fn fit_one(
    method: MethodKind,
    prepared: &PreparedExperiment,
    cfg: &Configuration,
    lambda: &Window,
    config: &ExperimentConfig,
    replicate: usize,
) -> Result<ContrastReport> {
    let model = prepared.model.as_dyn();
    match method {
        MethodKind::Explicit => {
            let strauss = prepared.model.strauss().ok_or_else(|| {
                Error::InvalidArgument("explicit estimator needs a Strauss model".into())
            })?;
            let resolution = ((config.vk_resolution_per_unit * lambda.max_side()).ceil()
                as usize)
                .max(64);
            fit_strauss_explicit(cfg, lambda, strauss.interaction_radius(), resolution)
        }
        MethodKind::Mple => {
            let n_dummy = ((config.dummy_per_point * cfg.count_in(lambda) as f64).ceil()
                as usize)
                .max(400);
            fit_mple(
                cfg,
                lambda,
                model,
                &MpleOptions {
                    quadrature: QuadratureScheme::stratified(n_dummy),
                    ..MpleOptions::default()
                },
            )
        }
        MethodKind::Tf => {
            let n_dummy = ((config.dummy_per_point * cfg.count_in(lambda) as f64).ceil()
                as usize)
                .max(400);
            fit_tf(
                cfg,
                lambda,
                &prepared.h_tf,
                model,
                &TfOptions {
                    quadrature: QuadratureScheme::stratified(n_dummy),
                    simplex: SimplexOptions {
                        seed: config
                            .base_seed
                            .wrapping_add(0x51_7c_c1_b7_27_22_0a_95)
                            .wrapping_add(replicate as u64),
                        ..SimplexOptions::default()
                    },
                    fiksel_shortcut: false,
                },
            )
        }
    }
}

/// Run the replication experiment: simulate, estimate with every method on
/// every window, and aggregate.
pub fn run_replication(config: &ExperimentConfig) -> Result<ReplicationResult> {
    let prepared = config.validate()?;
    let mut taus = config.taus.clone();
    taus.sort_by(f64::total_cmp);
    let tau_max = *taus.last().unwrap();
    let erosion = prepared.erosion;
    let sim_window = Window::square(tau_max)?.dilated(erosion)?;

    let per_replicate: Vec<Vec<ReplicateRecord>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = config.base_seed.wrapping_add(r as u64);
            let sampler = config.sampler.config_with_seed(seed);
            let master = match sample_gibbs(
                prepared.model.as_dyn(),
                &config.theta_star,
                &sim_window,
                &sampler,
            ) {
                Ok(cfg) => cfg,
                Err(e) => {
                    // the whole replicate is lost; record one failure per cell
                    let message = format!("simulation failed: {e}");
                    return taus
                        .iter()
                        .flat_map(|&tau| {
                            let message = message.clone();
                            config.methods.iter().map(move |&method| ReplicateRecord {
                                tau,
                                method,
                                replicate: r,
                                seed,
                                outcome: Outcome::Failure {
                                    message: message.clone(),
                                },
                            })
                        })
                        .collect();
                }
            };
            let mut records = Vec::new();
            for &tau in &taus {
                let lambda = match Window::square(tau) {
                    Ok(w) => w,
                    Err(e) => {
                        records.push(ReplicateRecord {
                            tau,
                            method: config.methods[0],
                            replicate: r,
                            seed,
                            outcome: Outcome::Failure {
                                message: e.to_string(),
                            },
                        });
                        continue;
                    }
                };
                let sub_carrier = lambda.dilated(erosion).expect("nonnegative collar");
                let sub = master.restrict(&sub_carrier);
                for &method in &config.methods {
                    let outcome = match fit_one(method, &prepared, &sub, &lambda, config, r) {
                        Ok(report) => Outcome::Success {
                            theta: report.theta_hat,
                            converged: report.converged,
                            u_value: report.u_value,
                        },
                        Err(e) => Outcome::Failure {
                            message: e.to_string(),
                        },
                    };
                    records.push(ReplicateRecord {
                        tau,
                        method,
                        replicate: r,
                        seed,
                        outcome,
                    });
                }
            }
            records
        })
        .collect();

    let records: Vec<ReplicateRecord> = per_replicate.into_iter().flatten().collect();

    let p = prepared.model.as_dyn().param_count();
    let param_names: Vec<String> = match prepared.report {
        ReportParametrization::BetaGamma if p == 2 => vec!["beta".into(), "gamma".into()],
        _ => (1..=p).map(|i| format!("theta{i}")).collect(),
    };
    let transform = |theta: &[f64]| -> Vec<f64> {
        match prepared.report {
            ReportParametrization::BetaGamma if p == 2 => {
                vec![(-theta[0]).exp(), (-theta[1]).exp()]
            }
            _ => theta.to_vec(),
        }
    };

    let mut summary = Vec::new();
    for &tau in &taus {
        for &method in &config.methods {
            let values: Vec<Vec<f64>> = records
                .iter()
                .filter(|rec| rec.tau == tau && rec.method == method)
                .filter_map(|rec| match &rec.outcome {
                    Outcome::Success { theta, .. } => Some(transform(theta)),
                    Outcome::Failure { .. } => None,
                })
                .collect();
            let n_failed = records
                .iter()
                .filter(|rec| {
                    rec.tau == tau
                        && rec.method == method
                        && matches!(rec.outcome, Outcome::Failure { .. })
                })
                .count();
            let n = values.len();
            let params = param_names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let mean = if n > 0 {
                        values.iter().map(|v| v[j]).sum::<f64>() / n as f64
                    } else {
                        f64::NAN
                    };
                    let sd = if n > 1 {
                        Some(
                            (values.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>()
                                / (n - 1) as f64)
                                .sqrt(),
                        )
                    } else {
                        None
                    };
                    ParamSummary {
                        name: name.clone(),
                        mean,
                        sd,
                    }
                })
                .collect();
            summary.push(SummaryRow {
                tau,
                method,
                n_success: n,
                n_failed,
                params,
            });
        }
    }
    Ok(ReplicationResult { records, summary })
}

/// Per-replicate CSV: one row per (window, method, replicate).
pub fn records_to_csv(result: &ReplicationResult, p: usize) -> String {
    let mut out = String::from("tau,method,replicate,seed,status,converged,u_value");
    for i in 1..=p {
        out.push_str(&format!(",theta{i}"));
    }
    out.push('\n');
    for rec in &result.records {
        match &rec.outcome {
            Outcome::Success {
                theta,
                converged,
                u_value,
            } => {
                out.push_str(&format!(
                    "{},{},{},{},ok,{},{}",
                    rec.tau, rec.method, rec.replicate, rec.seed, converged, u_value
                ));
                for t in theta {
                    out.push_str(&format!(",{t}"));
                }
            }
            Outcome::Failure { message } => {
                out.push_str(&format!(
                    "{},{},{},{},failed: {},,",
                    rec.tau,
                    rec.method,
                    rec.replicate,
                    rec.seed,
                    message.replace(',', ";")
                ));
                for _ in 0..p.saturating_sub(1) {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Summary CSV: empirical means and standard deviations per window and
/// method, plus the failure count.
pub fn summary_to_csv(result: &ReplicationResult) -> String {
    let mut out = String::from("tau,method,n_success,n_failed");
    if let Some(first) = result.summary.first() {
        for p in &first.params {
            out.push_str(&format!(",mean_{},sd_{}", p.name, p.name));
        }
    }
    out.push('\n');
    for row in &result.summary {
        out.push_str(&format!(
            "{},{},{},{}",
            row.tau, row.method, row.n_success, row.n_failed
        ));
        for p in &row.params {
            out.push_str(&format!(",{}", p.mean));
            match p.sd {
                Some(sd) => out.push_str(&format!(",{sd}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct HistogramData {
    pub param: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Variance of the centered limiting Gaussian overlay.
    pub gaussian_variance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CovarianceStudy {
    pub tau: f64,
    pub method: MethodKind,
    pub replicates_used: usize,
    /// Sample covariance of `√|Λ| θ̂` across replicates.
    pub empirical: Vec<Vec<f64>>,
    /// Sandwich built from Monte-Carlo plug-in matrices at `θ⋆`.
    pub asymptotic: Vec<Vec<f64>>,
    pub e_mean: Vec<Vec<f64>>,
    pub sigma_mean: Vec<Vec<f64>>,
    pub standardizer: Vec<Vec<f64>>,
    pub histograms: Vec<HistogramData>,
}

/// Offset separating the seed stream of the plug-in simulations from the
/// replicate stream.
const COVARIANCE_SEED_OFFSET: u64 = 1_000_000;

/// Covariance study: empirical covariance of the scaled estimates across
/// replicates versus the Monte-Carlo approximation of the sandwich.
pub fn run_covariance_study(config: &ExperimentConfig) -> Result<CovarianceStudy> {
    let prepared = config.validate()?;
    let cov = config
        .covariance
        .clone()
        .ok_or_else(|| Error::Config("missing `covariance` section".into()))?;
    let erosion = prepared.erosion;
    let lambda = Window::square(cov.tau)?;
    let carrier = lambda.dilated(erosion)?;
    let scale = lambda.volume().sqrt();
    let p = prepared.model.as_dyn().param_count();

    // replicated estimates
    let estimates: Vec<Option<Vec<f64>>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = config.base_seed.wrapping_add(r as u64);
            let sampler = config.sampler.config_with_seed(seed);
            let master =
                sample_gibbs(prepared.model.as_dyn(), &config.theta_star, &carrier, &sampler)
                    .ok()?;
            fit_one(cov.method, &prepared, &master, &lambda, config, r)
                .ok()
                .map(|rep| rep.theta_hat)
        })
        .collect();
    let thetas: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    let m = thetas.len();
    if m < 2 {
        return Err(Error::Config(
            "fewer than two replicates succeeded; cannot form a covariance".into(),
        ));
    }
    let mut mean = vec![0.0f64; p];
    for t in &thetas {
        for j in 0..p {
            mean[j] += t[j] * scale;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut empirical = DMatrix::zeros(p, p);
    for t in &thetas {
        for a in 0..p {
            for b in 0..p {
                empirical[(a, b)] +=
                    (t[a] * scale - mean[a]) * (t[b] * scale - mean[b]);
            }
        }
    }
    empirical /= (m - 1) as f64;

    // plug-in matrices from independent long-run simulations at θ⋆
    let h_for_method: Vec<Arc<dyn TestFunction>> = match cov.method {
        MethodKind::Tf => prepared.h_tf.clone(),
        MethodKind::Mple => h_gradv(&prepared.model.to_arc()),
        MethodKind::Explicit => {
            let strauss = prepared.model.strauss().expect("validated");
            vec![
                h_strauss_indicator(1, strauss)?,
                h_strauss_indicator(2, strauss)?,
            ]
        }
    };
    let k = h_for_method.len();
    let plugins: Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> = (0..cov.simulations)
        .into_par_iter()
        .map(|s| {
            let seed = config
                .base_seed
                .wrapping_add(COVARIANCE_SEED_OFFSET)
                .wrapping_add(s as u64);
            let sampler = config.sampler.config_with_seed(seed);
            let cfg =
                sample_gibbs(prepared.model.as_dyn(), &config.theta_star, &carrier, &sampler)?;
            let n_dummy = ((config.dummy_per_point * cfg.count_in(&lambda) as f64).ceil()
                as usize)
                .max(400);
            let e = estimate_e(
                &cfg,
                &lambda,
                &h_for_method,
                prepared.model.as_dyn(),
                &config.theta_star,
                &QuadratureScheme::stratified(n_dummy),
            )?;
            let sigma = estimate_sigma(
                &cfg,
                &h_for_method,
                prepared.model.as_dyn(),
                &config.theta_star,
                &SigmaOptions {
                    block_side: cov.block_side,
                    ..Default::default()
                },
            )?;
            Ok((e, sigma.matrix))
        })
        .collect();
    let plugins = plugins?;
    let mut e_mean = DMatrix::zeros(p, k);
    let mut sigma_mean = DMatrix::zeros(k, k);
    for (e, s) in &plugins {
        e_mean += e;
        sigma_mean += s;
    }
    e_mean /= plugins.len() as f64;
    sigma_mean /= plugins.len() as f64;
    let sandwich = sandwich_covariance(&e_mean, &sigma_mean)?;

    // histogram data for the scaled estimation errors
    let histograms = (0..p)
        .map(|j| {
            let values: Vec<f64> = thetas
                .iter()
                .map(|t| scale * (t[j] - config.theta_star[j]))
                .collect();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            let bins = cov.histogram_bins.max(1);
            let width = span / bins as f64;
            let mut counts = vec![0usize; bins];
            for &v in &values {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            HistogramData {
                param: format!("theta{}", j + 1),
                edges: (0..=bins).map(|b| lo + b as f64 * width).collect(),
                counts,
                gaussian_variance: sandwich.matrix[(j, j)],
            }
        })
        .collect();

    Ok(CovarianceStudy {
        tau: cov.tau,
        method: cov.method,
        replicates_used: m,
        empirical: matrix_rows(&empirical),
        asymptotic: matrix_rows(&sandwich.matrix),
        e_mean: matrix_rows(&e_mean),
        sigma_mean: matrix_rows(&sigma_mean),
        standardizer: matrix_rows(&sandwich.standardizer),
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        serde_json::from_str(
            r#"{
                "model": {"model": "strauss", "R": 0.05,
                          "box": {"theta1": [-10, 10], "theta2": [0, 5]}},
                "theta_star": [-4.605170185988091, 0.6931471805599453],
                "taus": [1.0],
                "replicates": 3,
                "base_seed": 77,
                "methods": ["explicit", "mple"],
                "dummy_per_point": 4.0,
                "vk_resolution_per_unit": 128,
                "sampler": {"burn_in": 2000, "steps_per_point": 60}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn replication_is_deterministic() {
        let config = small_config();
        let a = run_replication(&config).unwrap();
        let b = run_replication(&config).unwrap();
        assert_eq!(summary_to_csv(&a), summary_to_csv(&b));
        assert_eq!(records_to_csv(&a, 2), records_to_csv(&b, 2));
    }

    #[test]
    fn single_replicate_has_no_sd() {
        let mut config = small_config();
        config.replicates = 1;
        config.methods = vec![MethodKind::Explicit];
        let result = run_replication(&config).unwrap();
        assert_eq!(result.summary.len(), 1);
        assert!(result.summary[0].params.iter().all(|p| p.sd.is_none()));
        let csv = summary_to_csv(&result);
        // the sd columns are empty
        let last = csv.lines().last().unwrap();
        assert!(last.ends_with(',') || last.contains(",,"), "{last}");
    }

    #[test]
    fn failures_are_aggregated_not_fatal() {
        // a nearly empty pattern starves the explicit estimator of counts
        let config: ExperimentConfig = serde_json::from_str(
            r#"{
                "model": {"model": "strauss", "R": 0.05},
                "theta_star": [-0.6931471805599453, 0.0],
                "taus": [0.5],
                "replicates": 4,
                "base_seed": 11,
                "methods": ["explicit"],
                "vk_resolution_per_unit": 256,
                "sampler": {"burn_in": 500, "steps_per_point": 40}
            }"#,
        )
        .unwrap();
        let result = run_replication(&config).unwrap();
        let failed: usize = result.summary.iter().map(|s| s.n_failed).sum();
        assert!(failed > 0, "expected degenerate-count failures");
        assert_eq!(result.records.len(), 4);
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let mut config = small_config();
        config.theta_star = vec![0.0];
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = small_config();
        config.methods = vec![MethodKind::Tf];
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let config: ExperimentConfig = serde_json::from_str(
            r#"{
                "model": {"model": "poisson"},
                "theta_star": [-3.0],
                "taus": [1.0],
                "replicates": 2,
                "base_seed": 5,
                "methods": ["explicit"]
            }"#,
        )
        .unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn beta_gamma_summary_reports_transformed_parameters() {
        let config = small_config();
        let result = run_replication(&config).unwrap();
        let row = &result.summary[0];
        assert_eq!(row.params[0].name, "beta");
        assert_eq!(row.params[1].name, "gamma");
        // β̂ should be in the vicinity of 100 even on a small window
        assert!(row.params[0].mean > 30.0 && row.params[0].mean < 300.0);
    }
}
