//! Samplers: homogeneous Poisson draws and a birth–death Metropolis-Hastings
//! chain targeting the finite-volume Gibbs density with free boundary.
//!
//! The chain proposes a birth with probability `birth_probability` (a uniform
//! location in the window) and otherwise a death (a uniformly chosen point).
//! Acceptance ratios are the standard ones for a unit-rate Poisson reference:
//!
//! ```text
//! birth:  min(1, e^{−V(x|φ;θ)} |W| / (n+1) · (1−q)/q)
//! death:  min(1, e^{+V(x|φ∖x;θ)} n / |W| · q/(1−q))
//! ```
//!
//! Every sampler owns its RNG; replication harnesses run one sampler per
//! replicate with seed `base_seed + r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Configuration, MarkedPoint, NeighborLookup, Window};
use crate::models::{dot, GibbsModel};

/// Knobs of the birth–death chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Steps discarded before the state is read.
    pub burn_in: u64,
    /// Expected sweeps per point: total steps = burn_in +
    /// steps_per_point × (reference Poisson count of the model at θ).
    pub steps_per_point: u64,
    /// Probability of proposing a birth, in (0, 1).
    pub birth_probability: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            burn_in: 10_000,
            steps_per_point: 200,
            birth_probability: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.birth_probability > 0.0 && self.birth_probability < 1.0) {
            return Err(Error::InvalidArgument(
                "birth probability must lie strictly between 0 and 1".into(),
            ));
        }
        if self.steps_per_point < 1 {
            return Err(Error::InvalidArgument(
                "steps_per_point must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Homogeneous Poisson sample on `window` with the given intensity.
pub fn sample_poisson(window: &Window, intensity: f64, seed: u64) -> Result<Configuration> {
    if !(intensity > 0.0) {
        return Err(Error::InvalidArgument("intensity must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = intensity * window.volume();
    let n = Poisson::new(mean)
        .map_err(|e| Error::InvalidArgument(format!("bad Poisson mean {mean}: {e}")))?
        .sample(&mut rng) as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(uniform_point(window, &mut rng));
    }
    Configuration::new(points, window.clone())
}

fn uniform_point<R: Rng>(window: &Window, rng: &mut R) -> MarkedPoint {
    let position = (0..window.dim())
        .map(|i| rng.random_range(window.lower()[i]..window.upper()[i]))
        .collect();
    MarkedPoint {
        position,
        mark: None,
    }
}

/// Mutable cell grid holding the chain state; supports O(1) expected
/// fixed-radius neighbor queries under insertions and deletions.
struct DynamicGrid {
    window: Window,
    cell_side: f64,
    cells_per_axis: Vec<usize>,
    cells: Vec<Vec<u32>>,
    points: Vec<MarkedPoint>,
    home_cell: Vec<usize>,
}

impl DynamicGrid {
    fn new(window: Window, interaction_range: f64) -> Self {
        let d = window.dim();
        let cell_side = interaction_range
            .max(window.max_side() / 64.0)
            .max(1e-12);
        let cells_per_axis: Vec<usize> = (0..d)
            .map(|i| ((window.side(i) / cell_side).ceil() as usize).max(1))
            .collect();
        let total = cells_per_axis.iter().product();
        Self {
            window,
            cell_side,
            cells_per_axis,
            cells: vec![Vec::new(); total],
            points: Vec::new(),
            home_cell: Vec::new(),
        }
    }

    fn cell_of(&self, pos: &[f64]) -> usize {
        let mut flat = 0usize;
        for i in 0..self.window.dim() {
            let c = (((pos[i] - self.window.lower()[i]) / self.cell_side) as usize)
                .min(self.cells_per_axis[i] - 1);
            flat = flat * self.cells_per_axis[i] + c;
        }
        flat
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, p: MarkedPoint) {
        let cell = self.cell_of(&p.position);
        let idx = self.points.len() as u32;
        self.points.push(p);
        self.home_cell.push(cell);
        self.cells[cell].push(idx);
    }

    fn remove(&mut self, idx: usize) {
        let cell = self.home_cell[idx];
        let slot = self.cells[cell]
            .iter()
            .position(|&i| i as usize == idx)
            .expect("point is registered in its home cell");
        self.cells[cell].swap_remove(slot);
        let last = self.points.len() - 1;
        if idx != last {
            // the point moved from `last` to `idx`: patch its cell entry
            let moved_cell = self.home_cell[last];
            let moved_slot = self.cells[moved_cell]
                .iter()
                .position(|&i| i as usize == last)
                .expect("moved point is registered");
            self.cells[moved_cell][moved_slot] = idx as u32;
        }
        self.points.swap_remove(idx);
        self.home_cell.swap_remove(idx);
    }
}

impl NeighborLookup for DynamicGrid {
    fn dim(&self) -> usize {
        self.window.dim()
    }

    fn for_each_within(&self, center: &[f64], radius: f64, visit: &mut dyn FnMut(&MarkedPoint)) {
        let d = self.window.dim();
        let r2 = radius * radius;
        let lo: Vec<isize> = (0..d)
            .map(|i| ((center[i] - radius - self.window.lower()[i]) / self.cell_side).floor() as isize)
            .collect();
        let hi: Vec<isize> = (0..d)
            .map(|i| ((center[i] + radius - self.window.lower()[i]) / self.cell_side).floor() as isize)
            .collect();
        let mut cursor = lo.clone();
        'outer: loop {
            let mut flat = 0usize;
            let mut in_range = true;
            for i in 0..d {
                if cursor[i] < 0 || cursor[i] >= self.cells_per_axis[i] as isize {
                    in_range = false;
                    break;
                }
                flat = flat * self.cells_per_axis[i] + cursor[i] as usize;
            }
            if in_range {
                for &pi in &self.cells[flat] {
                    let p = &self.points[pi as usize];
                    if squared_distance(&p.position, center) <= r2 {
                        visit(p);
                    }
                }
            }
            for i in (0..d).rev() {
                cursor[i] += 1;
                if cursor[i] <= hi[i] {
                    continue 'outer;
                }
                cursor[i] = lo[i];
            }
            break;
        }
    }
}

/// A running birth–death chain; expose the step loop so validation code can
/// trace the state.
pub struct GibbsSampler<'m> {
    model: &'m dyn GibbsModel,
    theta: Vec<f64>,
    grid: DynamicGrid,
    rng: ChaCha8Rng,
    birth_probability: f64,
    volume: f64,
}

impl<'m> GibbsSampler<'m> {
    pub fn new(
        model: &'m dyn GibbsModel,
        theta: &[f64],
        window: &Window,
        config: &SamplerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !model.parameter_box().contains(theta) {
            return Err(Error::InvalidArgument(
                "theta lies outside the model's parameter box".into(),
            ));
        }
        let mut sampler = Self {
            model,
            theta: theta.to_vec(),
            grid: DynamicGrid::new(window.clone(), model.range()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            birth_probability: config.birth_probability,
            volume: window.volume(),
        };
        // start from a Poisson draw at the model's empty-pattern intensity
        let z = sampler.reference_intensity();
        let mean = (z * sampler.volume).max(1e-9);
        let n = Poisson::new(mean)
            .map_err(|e| Error::InvalidArgument(format!("bad reference mean {mean}: {e}")))?
            .sample(&mut sampler.rng) as usize;
        for _ in 0..n {
            let p = uniform_point(window, &mut sampler.rng);
            sampler.grid.insert(p);
        }
        Ok(sampler)
    }

    /// Conditional intensity of an insertion into the empty pattern.
    pub fn reference_intensity(&self) -> f64 {
        let x = MarkedPoint {
            position: self.grid.window.lower().to_vec(),
            mark: None,
        };
        let empty = DynamicGrid::new(self.grid.window.clone(), self.model.range());
        (-dot(&self.theta, &self.model.stats(&x, &empty, None))).exp()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.len() == 0
    }

    /// One birth–death proposal.
    pub fn step(&mut self) -> Result<()> {
        let q = self.birth_probability;
        if self.rng.random::<f64>() < q {
            let x = uniform_point(&self.grid.window, &mut self.rng);
            let energy = dot(&self.theta, &self.model.stats(&x, &self.grid, None));
            if energy.is_nan() {
                return Err(Error::NonFiniteEnergy);
            }
            let n = self.grid.len() as f64;
            let ratio = (-energy).exp() * self.volume / (n + 1.0) * ((1.0 - q) / q);
            if ratio >= 1.0 || self.rng.random::<f64>() < ratio {
                self.grid.insert(x);
            }
        } else if self.grid.len() > 0 {
            let n = self.grid.len();
            let idx = self.rng.random_range(0..n);
            let x = self.grid.points[idx].clone();
            let energy = dot(&self.theta, &self.model.stats(&x, &self.grid, Some(&x)));
            if energy.is_nan() {
                return Err(Error::NonFiniteEnergy);
            }
            let ratio = energy.exp() * n as f64 / self.volume * (q / (1.0 - q));
            if ratio >= 1.0 || self.rng.random::<f64>() < ratio {
                self.grid.remove(idx);
            }
        }
        Ok(())
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_configuration(self) -> Result<Configuration> {
        Configuration::new(self.grid.points, self.grid.window)
    }
}

/// Run the birth–death chain and return its final state.
pub fn sample_gibbs(
    model: &dyn GibbsModel,
    theta: &[f64],
    window: &Window,
    config: &SamplerConfig,
) -> Result<Configuration> {
    let mut sampler = GibbsSampler::new(model, theta, window, config)?;
    let reference_count = sampler.reference_intensity() * window.volume();
    let steps = config.burn_in + (config.steps_per_point as f64 * reference_count).ceil() as u64;
    sampler.run(steps)?;
    sampler.into_configuration()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{PoissonModel, StraussModel};

    #[test]
    fn poisson_sample_is_deterministic_given_seed() {
        let w = Window::square(1.0).unwrap();
        let a = sample_poisson(&w, 80.0, 42).unwrap();
        let b = sample_poisson(&w, 80.0, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_poisson(&w, 80.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_mean_count_matches_intensity() {
        let w = Window::rect(0.0, 3.1, 0.0, 3.1).unwrap();
        let intensity = 100.0;
        let m = 1000usize;
        let mut counts = Vec::with_capacity(m);
        for r in 0..m {
            counts.push(sample_poisson(&w, intensity, 1000 + r as u64).unwrap().len() as f64);
        }
        let mean: f64 = counts.iter().sum::<f64>() / m as f64;
        let target = intensity * w.volume();
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        let se = sd / (m as f64).sqrt();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "mean {mean}, target {target}, se {se}"
        );
    }

    #[test]
    fn gibbs_sampler_is_deterministic_given_seed() {
        let w = Window::square(1.0).unwrap();
        let model = StraussModel::new(0.05).unwrap();
        let theta = StraussModel::theta_from_beta_gamma(50.0, 0.5).unwrap();
        let cfg = SamplerConfig {
            seed: 9,
            burn_in: 2000,
            steps_per_point: 50,
            birth_probability: 0.5,
        };
        let a = sample_gibbs(&model, &theta, &w, &cfg).unwrap();
        let b = sample_gibbs(&model, &theta, &w, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strauss_chain_with_zero_interaction_reduces_to_poisson() {
        let w = Window::square(1.0).unwrap();
        let model = StraussModel::new(0.05).unwrap();
        let beta = 50.0;
        let theta = [-(beta.ln()), 0.0];
        let m = 200usize;
        let mut counts = Vec::with_capacity(m);
        for r in 0..m {
            let cfg = SamplerConfig {
                seed: 5000 + r as u64,
                burn_in: 4000,
                steps_per_point: 150,
                birth_probability: 0.5,
            };
            counts.push(sample_gibbs(&model, &theta, &w, &cfg).unwrap().len() as f64);
        }
        let mean: f64 = counts.iter().sum::<f64>() / m as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        let se = sd / (m as f64).sqrt();
        let target = beta * w.volume();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "mean {mean}, target {target}, se {se}"
        );
    }

    #[test]
    fn repulsion_decreases_the_mean_count() {
        let w = Window::square(1.0).unwrap();
        let model = StraussModel::new(0.1).unwrap();
        let beta = 80.0;
        let m = 60usize;
        let mean_at = |theta2: f64| -> f64 {
            let theta = [-(beta.ln()), theta2];
            (0..m)
                .map(|r| {
                    let cfg = SamplerConfig {
                        seed: 31_000 + r as u64,
                        burn_in: 4000,
                        steps_per_point: 120,
                        birth_probability: 0.5,
                    };
                    sample_gibbs(&model, &theta, &w, &cfg).unwrap().len() as f64
                })
                .sum::<f64>()
                / m as f64
        };
        let weak = mean_at(0.2);
        let strong = mean_at(2.0);
        assert!(
            strong < weak,
            "stronger repulsion should thin the pattern: {strong} vs {weak}"
        );
    }

    #[test]
    fn chain_count_distribution_matches_analytic_law_on_small_window() {
        // window [0,1]², interaction radius √2 (every pair interacts):
        // stationary law of the count is Z⁻¹ βⁿ γ^{n(n−1)/2} / n!
        let w = Window::square(1.0).unwrap();
        let r = 1.5;
        let model = StraussModel::new(r).unwrap();
        let beta = 2.0f64;
        let gamma = 0.3f64;
        let theta = [-(beta.ln()), -(gamma.ln())];

        let cfg = SamplerConfig {
            seed: 77,
            burn_in: 10_000,
            steps_per_point: 1,
            birth_probability: 0.5,
        };
        let mut sampler = GibbsSampler::new(&model, &theta, &w, &cfg).unwrap();
        sampler.run(cfg.burn_in).unwrap();
        let steps = 1_000_000u64;
        let mut hist = vec![0u64; 64];
        for _ in 0..steps {
            sampler.step().unwrap();
            let n = sampler.len().min(hist.len() - 1);
            hist[n] += 1;
        }
        let empirical: Vec<f64> = hist.iter().map(|&c| c as f64 / steps as f64).collect();

        let n_max = 30usize;
        let mut weights = Vec::with_capacity(n_max + 1);
        let mut log_fact = 0.0f64;
        for n in 0..=n_max {
            if n > 0 {
                log_fact += (n as f64).ln();
            }
            let log_w = (n as f64) * beta.ln()
                + (n * (n.saturating_sub(1)) / 2) as f64 * gamma.ln()
                - log_fact;
            weights.push(log_w.exp());
        }
        let z: f64 = weights.iter().sum();
        let mut tv = 0.0f64;
        for n in 0..hist.len() {
            let analytic = if n <= n_max { weights[n] / z } else { 0.0 };
            tv += (empirical[n] - analytic).abs();
        }
        tv *= 0.5;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn poisson_model_chain_matches_closed_form_intensity() {
        let w = Window::square(1.0).unwrap();
        let model = PoissonModel::new();
        let theta = [-(30.0f64).ln()];
        let m = 150usize;
        let mut counts = Vec::with_capacity(m);
        for r in 0..m {
            let cfg = SamplerConfig {
                seed: 9000 + r as u64,
                burn_in: 3000,
                steps_per_point: 120,
                birth_probability: 0.5,
            };
            counts.push(sample_gibbs(&model, &theta, &w, &cfg).unwrap().len() as f64);
        }
        let mean: f64 = counts.iter().sum::<f64>() / m as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        let se = sd / (m as f64).sqrt();
        assert!((mean - 30.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }
}
