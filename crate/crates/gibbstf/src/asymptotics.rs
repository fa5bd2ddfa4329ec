//! Plug-in estimation of the matrices behind the estimator's limiting normal
//! distribution, and the sandwich covariance built from them.
//!
//! For test functions `h = (h_1 … h_K)` and a fitted `θ̂`:
//!
//! - `E` is the `p×K` matrix of window averages
//!   `|Λ|⁻¹ ∫_Λ h_k V_i e^{−⟨θ̂,V⟩} dx`;
//! - `Σ` is the `K×K` block covariance of the residual vector: the eroded
//!   carrier is tiled into cubes of side `D ≥` the interaction range, each
//!   cube gets its own residual vector, and products of neighboring cubes
//!   (sup-norm distance ≤ 1) are averaged and scaled by `D^{−d}`;
//! - the asymptotic covariance of `θ̂` is
//!   `|Λ|⁻¹ (E Eᵀ)⁻¹ E Σ Eᵀ (E Eᵀ)⁻¹`, and
//!   `S = [E Σ Eᵀ]^{−1/2} E Eᵀ` standardizes `√|Λ| (θ̂ − θ⋆)` to unit
//!   covariance.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{QuadratureScheme, ResidualPlan};
use crate::geometry::{Configuration, Window};
use crate::models::GibbsModel;
use crate::testfn::TestFunction;

/// Plug-in `p×K` matrix `E(h, θ)`.
pub fn estimate_e(
    cfg: &Configuration,
    lambda: &Window,
    h: &[Arc<dyn TestFunction>],
    model: &dyn GibbsModel,
    theta: &[f64],
    quadrature: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    let plan = ResidualPlan::build(cfg, lambda, h, model, quadrature, false)?;
    Ok(plan.e_matrix(theta))
}

#[derive(Clone, Debug)]
pub struct SigmaOptions {
    /// Cube side; defaults to `max(interaction range, min eroded side / 10)`.
    pub block_side: Option<f64>,
    /// Dummy intensity per block; defaults to `max(4 N/|W|, 256 / block area)`.
    pub dummy_per_unit_area: Option<f64>,
}

impl Default for SigmaOptions {
    fn default() -> Self {
        Self {
            block_side: None,
            dummy_per_unit_area: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SigmaEstimate {
    pub matrix: DMatrix<f64>,
    pub block_side: f64,
    pub interior_blocks: usize,
    pub total_blocks: usize,
}

/// Block estimate of the residual-process covariance `Σ(h, θ)`.
pub fn estimate_sigma(
    cfg: &Configuration,
    h: &[Arc<dyn TestFunction>],
    model: &dyn GibbsModel,
    theta: &[f64],
    options: &SigmaOptions,
) -> Result<SigmaEstimate> {
    let carrier = cfg.carrier();
    let d = carrier.dim();
    let k = h.len();
    let h_range = h.iter().map(|hk| hk.range()).fold(0.0, f64::max);
    let reach = model.range().max(h_range);
    let inner = if reach > 0.0 {
        carrier.eroded(reach)?
    } else {
        carrier.clone()
    };

    let block = options
        .block_side
        .unwrap_or_else(|| reach.max(inner.min_side() / 10.0));
    if block < reach {
        return Err(Error::InvalidArgument(format!(
            "block side {block} is below the dependence range {reach}"
        )));
    }
    let per_axis: Vec<usize> = (0..d).map(|i| (inner.side(i) / block) as usize).collect();
    let total: usize = per_axis.iter().product();
    let interior: usize = per_axis.iter().map(|&n| n.saturating_sub(2)).product();
    if per_axis.iter().any(|&n| n < 3) || interior < 9 {
        return Err(Error::TooFewBlocks { found: interior });
    }

    // center the tiling inside the eroded carrier
    let start: Vec<f64> = (0..d)
        .map(|i| inner.lower()[i] + 0.5 * (inner.side(i) - per_axis[i] as f64 * block))
        .collect();

    let density = options.dummy_per_unit_area.unwrap_or_else(|| {
        let ambient = 4.0 * cfg.len() as f64 / carrier.volume();
        ambient.max(256.0 / block.powi(d as i32))
    });
    let n_dummy_block = ((density * block.powi(d as i32)).ceil() as usize).max(16);

    // residual vector of every block in the tiling
    let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut cursor = vec![0usize; d];
    loop {
        let lower: Vec<f64> = (0..d)
            .map(|i| start[i] + cursor[i] as f64 * block)
            .collect();
        let upper: Vec<f64> = lower.iter().map(|&l| l + block).collect();
        let cell = Window::new(lower, upper)?;
        let plan = ResidualPlan::build(
            cfg,
            &cell,
            h,
            model,
            &QuadratureScheme::stratified(n_dummy_block),
            false,
        )?;
        residuals.push(plan.residuals(theta));
        let mut axis = d;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            cursor[axis] += 1;
            if cursor[axis] < per_axis[axis] {
                break;
            }
            cursor[axis] = 0;
        }
        if cursor.iter().all(|&c| c == 0) {
            break;
        }
    }

    let flat = |idx: &[usize]| -> usize {
        let mut f = 0usize;
        for i in 0..d {
            f = f * per_axis[i] + idx[i];
        }
        f
    };

    let mut sigma = DMatrix::zeros(k, k);
    let mut center = vec![1usize; d];
    let mut n_centers = 0usize;
    'centers: loop {
        n_centers += 1;
        let c0 = &residuals[flat(&center)];
        // neighbors at sup-norm distance ≤ 1, diagonals included
        let mut offset = vec![-1isize; d];
        loop {
            let neighbor: Vec<usize> = (0..d)
                .map(|i| (center[i] as isize + offset[i]) as usize)
                .collect();
            let cl = &residuals[flat(&neighbor)];
            for a in 0..k {
                for b in 0..k {
                    sigma[(a, b)] += c0[a] * cl[b];
                }
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    break;
                }
                axis -= 1;
                offset[axis] += 1;
                if offset[axis] <= 1 {
                    break;
                }
                offset[axis] = -1;
            }
            if offset.iter().all(|&o| o == -1) {
                break;
            }
        }
        // advance the interior center
        let mut axis = d;
        loop {
            if axis == 0 {
                break 'centers;
            }
            axis -= 1;
            center[axis] += 1;
            if center[axis] < per_axis[axis] - 1 {
                break;
            }
            center[axis] = 1;
        }
        if center.iter().all(|&c| c == 1) {
            break;
        }
    }
    debug_assert_eq!(n_centers, interior);

    sigma /= n_centers as f64 * block.powi(d as i32);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(SigmaEstimate {
        matrix: sigma,
        block_side: block,
        interior_blocks: interior,
        total_blocks: total,
    })
}

#[derive(Clone, Debug)]
pub struct SandwichCovariance {
    /// `(E Eᵀ)⁻¹ E Σ Eᵀ (E Eᵀ)⁻¹`; divide by `|Λ|` for the covariance of `θ̂`.
    pub matrix: DMatrix<f64>,
    /// `S = [E Σ Eᵀ]^{−1/2} E Eᵀ`.
    pub standardizer: DMatrix<f64>,
}

const MAX_CONDITION: f64 = 1e8;

/// Sandwich covariance and the standardizing matrix from plug-in `E` and `Σ`.
pub fn sandwich_covariance(
    e: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<SandwichCovariance> {
    let p = e.nrows();
    let k = e.ncols();
    if sigma.nrows() != k || sigma.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "Σ must be {k}×{k} to match E ({p}×{k})"
        )));
    }
    let gram = e * e.transpose();
    let eig = gram.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.amax();
    let lam_min = eig.eigenvalues.min();
    let cond = if lam_min > 0.0 {
        lam_max / lam_min
    } else {
        f64::INFINITY
    };
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::SingularE { cond });
    }

    let meat = e * sigma * e.transpose();
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(Error::SingularE { cond })?;
    let half = chol.solve(&meat); // (EEᵀ)⁻¹ (EΣEᵀ)
    let sandwich = chol.solve(&half.transpose()).transpose(); // … (EEᵀ)⁻¹
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;

    // meat^{−1/2} by symmetric eigendecomposition with eigenvalue clamping
    let meat_sym = (&meat + meat.transpose()) * 0.5;
    let meig = meat_sym.symmetric_eigen();
    let mut inv_sqrt: DMatrix<f64> = DMatrix::zeros(p, p);
    for i in 0..p {
        let lam = meig.eigenvalues[i].max(1e-12);
        let col = meig.eigenvectors.column(i);
        let scale = 1.0 / lam.sqrt();
        for a in 0..p {
            for b in 0..p {
                inv_sqrt[(a, b)] += scale * col[a] * col[b];
            }
        }
    }
    let standardizer = inv_sqrt * gram;
    Ok(SandwichCovariance {
        matrix: sandwich,
        standardizer,
    })
}

/// Serializable summary of a covariance computation.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceReport {
    pub p: usize,
    pub k: usize,
    pub e_hat: Vec<Vec<f64>>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub sandwich: Vec<Vec<f64>>,
    pub standardizer: Vec<Vec<f64>>,
    pub block_side: f64,
    pub interior_blocks: usize,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// One-call covariance pipeline: `E`, `Σ`, sandwich and standardizer.
pub fn covariance_report(
    cfg: &Configuration,
    lambda: &Window,
    h: &[Arc<dyn TestFunction>],
    model: &dyn GibbsModel,
    theta: &[f64],
    quadrature: &QuadratureScheme,
    sigma_options: &SigmaOptions,
) -> Result<CovarianceReport> {
    let e = estimate_e(cfg, lambda, h, model, theta, quadrature)?;
    let sigma = estimate_sigma(cfg, h, model, theta, sigma_options)?;
    let sandwich = sandwich_covariance(&e, &sigma.matrix)?;
    Ok(CovarianceReport {
        p: e.nrows(),
        k: e.ncols(),
        e_hat: matrix_rows(&e),
        sigma_hat: matrix_rows(&sigma.matrix),
        sandwich: matrix_rows(&sandwich.matrix),
        standardizer: matrix_rows(&sandwich.standardizer),
        block_side: sigma.block_side,
        interior_blocks: sigma.interior_blocks,
    })
}
