//! Runtime checks of the estimator's working assumptions: balance of the GNZ
//! residuals at the true parameter, contrast-profile scans for uniqueness of
//! the minimum, and Monte-Carlo sign checks of the determinant criterion that
//! underwrites identifiability when `K = p`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{QuadratureScheme, ResidualPlan};
use crate::geometry::{MarkedPoint, NeighborIndex, Neighborhood, Window};
use crate::models::GibbsModel;
use crate::sim::{sample_gibbs, SamplerConfig};
use crate::testfn::TestFunction;

fn dependence_range(model: &dyn GibbsModel, h: &[Arc<dyn TestFunction>]) -> f64 {
    h.iter()
        .map(|hk| hk.range())
        .fold(model.range(), f64::max)
}

#[derive(Clone, Debug)]
pub struct GnzOptions {
    pub replicates: usize,
    pub sampler: SamplerConfig,
    /// Dummy points per observed point for the Monte-Carlo integral.
    pub dummy_per_point: f64,
    /// Parameter at which the residuals are evaluated; defaults to the
    /// simulation parameter (the balance case).
    pub theta_eval: Option<Vec<f64>>,
}

impl Default for GnzOptions {
    fn default() -> Self {
        Self {
            replicates: 100,
            sampler: SamplerConfig::default(),
            dummy_per_point: 4.0,
            theta_eval: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GnzScore {
    pub label: String,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GnzReport {
    pub replicates: usize,
    pub scores: Vec<GnzScore>,
    pub pass: bool,
}

/// Simulate at `theta_star` and test whether the normalized residuals
/// `|Λ|⁻¹ C_Λ(Φ; h_k, θ)` are centered: `z = mean / SE` per test function,
/// passing when every `|z| < 3`.
pub fn gnz_balance(
    model: &dyn GibbsModel,
    theta_star: &[f64],
    h: &[Arc<dyn TestFunction>],
    carrier: &Window,
    options: &GnzOptions,
) -> Result<GnzReport> {
    if options.replicates < 30 {
        return Err(Error::InvalidArgument(
            "the balance test needs at least 30 replicates".into(),
        ));
    }
    for hk in h {
        hk.check_model(model)?;
    }
    let reach = dependence_range(model, h);
    let lambda = carrier.eroded(reach)?;
    let theta_eval = options
        .theta_eval
        .clone()
        .unwrap_or_else(|| theta_star.to_vec());

    let rows: Result<Vec<Vec<f64>>> = (0..options.replicates)
        .into_par_iter()
        .map(|r| {
            let mut sampler_cfg = options.sampler.clone();
            sampler_cfg.seed = options.sampler.seed.wrapping_add(r as u64);
            let cfg = sample_gibbs(model, theta_star, carrier, &sampler_cfg)?;
            let n_dummy =
                ((options.dummy_per_point * cfg.len() as f64).ceil() as usize).max(200);
            let quad = QuadratureScheme::MonteCarlo {
                n_dummy,
                seed: sampler_cfg.seed.wrapping_add(0x9e3779b97f4a7c15),
            };
            let plan = ResidualPlan::build(&cfg, &lambda, h, model, &quad, false)?;
            Ok(plan
                .residuals(&theta_eval)
                .into_iter()
                .map(|c| c / lambda.volume())
                .collect())
        })
        .collect();
    let rows = rows?;

    let m = rows.len() as f64;
    let mut scores = Vec::with_capacity(h.len());
    for (k, hk) in h.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|row| row[k]).collect();
        let mean = values.iter().sum::<f64>() / m;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt().max(1e-300);
        scores.push(GnzScore {
            label: hk.label().to_string(),
            mean,
            se,
            z: mean / se,
        });
    }
    let pass = scores.iter().all(|s| s.z.abs() < 3.0);
    Ok(GnzReport {
        replicates: rows.len(),
        scores,
        pass,
    })
}

/// Rectangular grid of parameter values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThetaGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub steps: Vec<usize>,
}

impl ThetaGrid {
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        let p = self.lower.len();
        if self.upper.len() != p || self.steps.len() != p || p == 0 {
            return Err(Error::InvalidArgument("inconsistent grid specification".into()));
        }
        if self.steps.iter().any(|&s| s < 1) {
            return Err(Error::InvalidArgument("grid needs at least one step per axis".into()));
        }
        let mut points = Vec::new();
        let mut idx = vec![0usize; p];
        loop {
            let point: Vec<f64> = (0..p)
                .map(|i| {
                    if self.steps[i] == 1 {
                        0.5 * (self.lower[i] + self.upper[i])
                    } else {
                        self.lower[i]
                            + idx[i] as f64 * (self.upper[i] - self.lower[i])
                                / (self.steps[i] - 1) as f64
                    }
                })
                .collect();
            points.push(point);
            let mut axis = p;
            loop {
                if axis == 0 {
                    return Ok(points);
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.steps[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub replicates: usize,
    pub sampler: SamplerConfig,
    pub dummy_per_point: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            replicates: 20,
            sampler: SamplerConfig::default(),
            dummy_per_point: 4.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProfilePoint {
    pub theta: Vec<f64>,
    pub u: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProfileReport {
    pub points: Vec<ProfilePoint>,
    pub min_index: usize,
    /// Indices (other than the argmin) whose value is within `3 SE` of the
    /// minimum; empty when the grid minimum is unique at that tolerance.
    pub near_minimum: Vec<usize>,
    pub unique_minimum: bool,
}

/// Monte-Carlo estimate of the limiting contrast
/// `U(θ) = Σ_k E[h_k (e^{−V(θ)} − e^{−V(θ⋆)})]²` over a grid, from patterns
/// simulated at `theta_star`.
pub fn contrast_profile(
    model: &dyn GibbsModel,
    theta_star: &[f64],
    h: &[Arc<dyn TestFunction>],
    carrier: &Window,
    grid: &ThetaGrid,
    options: &ProfileOptions,
) -> Result<ProfileReport> {
    for hk in h {
        hk.check_model(model)?;
    }
    let grid_points = grid.points()?;
    let reach = dependence_range(model, h);
    let lambda = carrier.eroded(reach)?;
    let k = h.len();

    // per replicate, the vector of A_k(θ_g) for every grid point
    let per_replicate: Result<Vec<Vec<Vec<f64>>>> = (0..options.replicates)
        .into_par_iter()
        .map(|r| {
            let mut sampler_cfg = options.sampler.clone();
            sampler_cfg.seed = options.sampler.seed.wrapping_add(r as u64);
            let cfg = sample_gibbs(model, theta_star, carrier, &sampler_cfg)?;
            let n_dummy =
                ((options.dummy_per_point * cfg.len() as f64).ceil() as usize).max(200);
            let quad = QuadratureScheme::MonteCarlo {
                n_dummy,
                seed: sampler_cfg.seed.wrapping_add(0x2545f4914f6cdd1d),
            };
            let plan = ResidualPlan::build(&cfg, &lambda, h, model, &quad, false)?;
            Ok(grid_points
                .iter()
                .map(|theta| plan.profile_terms(theta, theta_star))
                .collect())
        })
        .collect();
    let per_replicate = per_replicate?;
    let m = per_replicate.len() as f64;

    let mut points = Vec::with_capacity(grid_points.len());
    for (g, theta) in grid_points.iter().enumerate() {
        let mut u = 0.0;
        let mut var_u = 0.0;
        for j in 0..k {
            let values: Vec<f64> = per_replicate.iter().map(|rep| rep[g][j]).collect();
            let mean = values.iter().sum::<f64>() / m;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let var_mean = var / m;
            u += mean * mean;
            // delta method for mean², plus the χ²-type term near zero
            var_u += 4.0 * mean * mean * var_mean + 2.0 * var_mean * var_mean;
        }
        points.push(ProfilePoint {
            theta: theta.clone(),
            u,
            se: var_u.sqrt(),
        });
    }

    let min_index = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.u.total_cmp(&b.1.u))
        .map(|(i, _)| i)
        .unwrap();
    let u_min = points[min_index].u;
    let near_minimum: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(i, p)| *i != min_index && p.u <= u_min + 3.0 * p.se)
        .map(|(i, _)| i)
        .collect();
    Ok(ProfileReport {
        unique_minimum: near_minimum.is_empty(),
        min_index,
        near_minimum,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetVerdict {
    ConsistentWithDet,
    Violated,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetCheckReport {
    pub tuples: usize,
    pub bins_observed: usize,
    pub fraction_positive: f64,
    pub fraction_negative: f64,
    pub fraction_zero: f64,
    pub verdict: DetVerdict,
    /// `det` of the sample estimate of `E[Ψ(V) Vᵀ]`; reported, drives no
    /// verdict.
    pub det_mean_outer: f64,
}

#[derive(Clone, Debug)]
pub struct DetCheckOptions {
    pub replicates: usize,
    pub locations_per_replicate: usize,
    pub bins: usize,
    pub tuples: usize,
    pub sampler: SamplerConfig,
}

impl Default for DetCheckOptions {
    fn default() -> Self {
        Self {
            replicates: 20,
            locations_per_replicate: 500,
            bins: 50,
            tuples: 2000,
            sampler: SamplerConfig::default(),
        }
    }
}

struct StatisticSamples {
    /// sufficient statistics `v` per sampled location
    v: Vec<Vec<f64>>,
    /// test-function values per sampled location
    h: Vec<Vec<f64>>,
}

fn collect_statistic_samples(
    model: &dyn GibbsModel,
    theta_star: &[f64],
    theta_check: &[f64],
    h: &[Arc<dyn TestFunction>],
    carrier: &Window,
    options: &DetCheckOptions,
) -> Result<StatisticSamples> {
    let reach = dependence_range(model, h);
    let lambda = carrier.eroded(reach)?;
    let rows: Result<Vec<Vec<(Vec<f64>, Vec<f64>)>>> = (0..options.replicates)
        .into_par_iter()
        .map(|s| {
            let mut sampler_cfg = options.sampler.clone();
            sampler_cfg.seed = options.sampler.seed.wrapping_add(s as u64);
            let cfg = sample_gibbs(model, theta_star, carrier, &sampler_cfg)?;
            let index = NeighborIndex::build(&cfg, reach.max(1e-12));
            let nb = Neighborhood::new(&cfg, &index);
            let mut rng = ChaCha8Rng::seed_from_u64(
                sampler_cfg.seed.wrapping_add(0xd1342543de82ef95),
            );
            let mut out = Vec::with_capacity(options.locations_per_replicate);
            for _ in 0..options.locations_per_replicate {
                let position: Vec<f64> = (0..lambda.dim())
                    .map(|i| rng.random_range(lambda.lower()[i]..lambda.upper()[i]))
                    .collect();
                let x = MarkedPoint {
                    position,
                    mark: None,
                };
                let v = model.stats(&x, &nb, None);
                let hv: Vec<f64> = h
                    .iter()
                    .map(|hk| {
                        let s = hk.stat(&x, &nb, None);
                        hk.assemble(s, &v, theta_check)
                    })
                    .collect();
                out.push((v, hv));
            }
            Ok(out)
        })
        .collect();
    let mut v = Vec::new();
    let mut hv = Vec::new();
    for row in rows? {
        for (a, b) in row {
            v.push(a);
            hv.push(b);
        }
    }
    Ok(StatisticSamples { v, h: hv })
}

struct Bins {
    centers_v: Vec<Vec<f64>>,
    centers_h: Vec<Vec<f64>>,
}

fn bin_samples(samples: &StatisticSamples, bins: usize) -> Bins {
    let p = samples.v[0].len();
    let k = samples.h[0].len();
    let mut min = vec![f64::INFINITY; p];
    let mut max = vec![f64::NEG_INFINITY; p];
    for v in &samples.v {
        for i in 0..p {
            min[i] = min[i].min(v[i]);
            max[i] = max[i].max(v[i]);
        }
    }
    use std::collections::HashMap;
    struct Acc {
        n: f64,
        v: Vec<f64>,
        h: Vec<f64>,
    }
    let mut table: HashMap<Vec<usize>, Acc> = HashMap::new();
    for (v, h) in samples.v.iter().zip(&samples.h) {
        let key: Vec<usize> = (0..p)
            .map(|i| {
                let span = max[i] - min[i];
                if span <= 0.0 {
                    0
                } else {
                    (((v[i] - min[i]) / span * bins as f64) as usize).min(bins - 1)
                }
            })
            .collect();
        let acc = table.entry(key).or_insert_with(|| Acc {
            n: 0.0,
            v: vec![0.0; p],
            h: vec![0.0; k],
        });
        acc.n += 1.0;
        for i in 0..p {
            acc.v[i] += v[i];
        }
        for j in 0..k {
            acc.h[j] += h[j];
        }
    }
    let mut centers_v = Vec::with_capacity(table.len());
    let mut centers_h = Vec::with_capacity(table.len());
    let mut entries: Vec<(Vec<usize>, Acc)> = table.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, acc) in entries {
        centers_v.push(acc.v.iter().map(|s| s / acc.n).collect());
        centers_h.push(acc.h.iter().map(|s| s / acc.n).collect());
    }
    Bins {
        centers_v,
        centers_h,
    }
}

fn det_of_columns(columns: &[&[f64]]) -> f64 {
    let p = columns.len();
    let mut m = DMatrix::zeros(p, p);
    for (j, col) in columns.iter().enumerate() {
        for i in 0..p {
            m[(i, j)] = col[i];
        }
    }
    m.determinant()
}

/// Monte-Carlo sign check of the determinant criterion at the parameter
/// `theta_check`, for `K = p` test functions: approximates the conditional
/// expectation map `Ψ(v) = E[h | V = v]` by binning and samples the sign of
/// `det(v₁…v_p) · det(Ψ(v₁)…Ψ(v_p))` over tuples of distinct bins.
pub fn det_check(
    model: &dyn GibbsModel,
    theta_star: &[f64],
    theta_check: &[f64],
    h: &[Arc<dyn TestFunction>],
    carrier: &Window,
    options: &DetCheckOptions,
) -> Result<DetCheckReport> {
    let p = model.param_count();
    if h.len() != p {
        return Err(Error::InvalidArgument(format!(
            "the determinant check needs exactly K = p = {p} test functions, got {}",
            h.len()
        )));
    }
    let samples = collect_statistic_samples(model, theta_star, theta_check, h, carrier, options)?;
    // sample estimate of E[Ψ(V) Vᵀ] = E[h Vᵀ], computable without binning
    let det_mean_outer = {
        let n = samples.v.len() as f64;
        let mut m = DMatrix::zeros(p, p);
        for (v, hv) in samples.v.iter().zip(&samples.h) {
            for a in 0..p {
                for b in 0..p {
                    m[(a, b)] += hv[a] * v[b];
                }
            }
        }
        (m / n).determinant()
    };

    let bins = bin_samples(&samples, options.bins.max(2));
    let found = bins.centers_v.len();
    if found < p {
        return Err(Error::InsufficientSupport { needed: p, found });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.sampler.seed.wrapping_add(0x853c49e6748fea9b));
    let mut products = Vec::with_capacity(options.tuples);
    for _ in 0..options.tuples {
        let pick = rand::seq::index::sample(&mut rng, found, p);
        let v_cols: Vec<&[f64]> = pick.iter().map(|i| bins.centers_v[i].as_slice()).collect();
        let h_cols: Vec<&[f64]> = pick.iter().map(|i| bins.centers_h[i].as_slice()).collect();
        products.push(det_of_columns(&v_cols) * det_of_columns(&h_cols));
    }
    let scale = products.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
    let tol = 1e-12 * scale;
    let n = products.len() as f64;
    let positive = products.iter().filter(|&&s| s > tol).count() as f64 / n;
    let negative = products.iter().filter(|&&s| s < -tol).count() as f64 / n;
    let zero = 1.0 - positive - negative;

    let verdict = if zero > 0.5 {
        DetVerdict::Inconclusive
    } else {
        let nonzero = positive + negative;
        if nonzero <= 0.0 {
            DetVerdict::Inconclusive
        } else if positive / nonzero >= 0.95 || negative / nonzero >= 0.95 {
            DetVerdict::ConsistentWithDet
        } else {
            DetVerdict::Violated
        }
    };
    Ok(DetCheckReport {
        tuples: products.len(),
        bins_observed: found,
        fraction_positive: positive,
        fraction_negative: negative,
        fraction_zero: zero,
        verdict,
        det_mean_outer,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DetPrimeReport {
    pub found: bool,
    pub objective: f64,
    pub subsets: Vec<Vec<usize>>,
    pub coefficients: Option<Vec<f64>>,
}

fn combinations(k: usize, p: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..p).collect();
    loop {
        out.push(current.clone());
        // advance the lexicographic combination cursor
        let mut i = p;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if current[i] < k - (p - i) {
                current[i] += 1;
                for j in i + 1..p {
                    current[j] = current[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Feasibility search for the `K > p` determinant criterion: look for
/// coefficients `c_I` (one per `p`-subset `I` of the test functions) making
/// every sampled sum `Σ_I c_I det(v…) det(Ψ^I…)` nonnegative with at least
/// one strictly positive. Solved as a small linear program.
pub fn det_prime_check(
    model: &dyn GibbsModel,
    theta_star: &[f64],
    theta_check: &[f64],
    h: &[Arc<dyn TestFunction>],
    carrier: &Window,
    options: &DetCheckOptions,
) -> Result<DetPrimeReport> {
    let p = model.param_count();
    if h.len() <= p {
        return Err(Error::InvalidArgument(format!(
            "the feasibility search applies to K > p (got K = {}, p = {p})",
            h.len()
        )));
    }
    let samples = collect_statistic_samples(model, theta_star, theta_check, h, carrier, options)?;
    let bins = bin_samples(&samples, options.bins.max(2));
    let found = bins.centers_v.len();
    if found < p {
        return Err(Error::InsufficientSupport { needed: p, found });
    }
    let subsets = combinations(h.len(), p);

    let mut rng = ChaCha8Rng::seed_from_u64(options.sampler.seed.wrapping_add(0xda3e39cb94b95bdb));
    let n_tuples = options.tuples.min(400).max(50);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_tuples);
    for _ in 0..n_tuples {
        let pick = rand::seq::index::sample(&mut rng, found, p);
        let v_cols: Vec<&[f64]> = pick.iter().map(|i| bins.centers_v[i].as_slice()).collect();
        let det_v = det_of_columns(&v_cols);
        let row: Vec<f64> = subsets
            .iter()
            .map(|subset| {
                let h_cols: Vec<Vec<f64>> = pick
                    .iter()
                    .map(|i| subset.iter().map(|&j| bins.centers_h[i][j]).collect())
                    .collect();
                let refs: Vec<&[f64]> = h_cols.iter().map(|c| c.as_slice()).collect();
                det_v * det_of_columns(&refs)
            })
            .collect();
        rows.push(row);
    }
    let scale = rows
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, d| acc.max(d.abs()));
    if scale <= 0.0 {
        return Ok(DetPrimeReport {
            found: false,
            objective: 0.0,
            subsets,
            coefficients: None,
        });
    }
    for row in &mut rows {
        for d in row.iter_mut() {
            *d /= scale;
        }
    }

    // maximize t  s.t.  Σ_I c_I d_{τ,I} ≥ 0 for every tuple τ,
    //                   Σ_τ Σ_I c_I d_{τ,I} ≥ t,  c ∈ [−1, 1]^{|A|}
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let c_vars: Vec<_> = subsets
        .iter()
        .map(|_| problem.add_var(0.0, (-1.0, 1.0)))
        .collect();
    let t_var = problem.add_var(1.0, (0.0, 1e9));
    let mut total: Vec<f64> = vec![0.0; subsets.len()];
    for row in &rows {
        let constraint: Vec<_> = c_vars
            .iter()
            .zip(row)
            .map(|(&var, &coeff)| (var, coeff))
            .collect();
        problem.add_constraint(&constraint, ComparisonOp::Ge, 0.0);
        for (acc, &d) in total.iter_mut().zip(row) {
            *acc += d;
        }
    }
    let mut strict: Vec<_> = c_vars
        .iter()
        .zip(&total)
        .map(|(&var, &coeff)| (var, coeff))
        .collect();
    strict.push((t_var, -1.0));
    problem.add_constraint(&strict, ComparisonOp::Ge, 0.0);

    match problem.solve() {
        Ok(microlp::SolveOutcome::Solution(solution)) => {
            let objective = solution.objective();
            let found = objective > 1e-9;
            let coefficients = found
                .then(|| c_vars.iter().map(|&v| solution[v]).collect::<Vec<f64>>());
            Ok(DetPrimeReport {
                found,
                objective,
                subsets,
                coefficients,
            })
        }
        Ok(microlp::SolveOutcome::Interrupted(_)) | Err(_) => Ok(DetPrimeReport {
            found: false,
            objective: 0.0,
            subsets,
            coefficients: None,
        }),
    }
}
