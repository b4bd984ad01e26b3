//! Benchmark simulators with explicit uniform box priors.
//!
//! Each simulator defines p(θ) (uniform over a box) and a stochastic
//! forward model p(x|θ). Simulators are stateless; every call receives
//! its own RNG stream so parallel generation is deterministic.

pub mod dataset;
pub mod gillespie;
pub mod oracle;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, DatasetMeta};
pub use oracle::TruncatedGaussianPosterior;

use crate::error::{Result, SbiError};
use crate::numcore::Array;
use crate::rng::{derive_seed, rng_from_seed, seed_for_label, Rng};
use crate::stats::correlation;

pub const GAUSSIAN_LINEAR_NOISE_STD: f64 = 0.25;
const LV_T_END: f64 = 20.0;
const LV_GRID_POINTS: usize = 201;
const PILOT_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    TwoMoons,
    Slcp,
    LotkaVolterra,
    GaussianLinear,
}

/// A benchmark simulator: uniform box prior plus stochastic forward model.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub kind: SimulatorKind,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub prior_low: Vec<f64>,
    pub prior_high: Vec<f64>,
}

/// Per-feature observation support, estimated from pilot draws and used
/// to sample measurement sets without further simulation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObsBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Simulator {
    pub fn by_name(name: &str) -> Result<Simulator> {
        let kind = match name {
            "two_moons" => SimulatorKind::TwoMoons,
            "slcp" => SimulatorKind::Slcp,
            "lotka_volterra" => SimulatorKind::LotkaVolterra,
            "gaussian_linear" => SimulatorKind::GaussianLinear,
            other => return Err(SbiError::UnknownSimulator(other.into())),
        };
        Ok(Simulator::new(kind))
    }

    pub fn new(kind: SimulatorKind) -> Simulator {
        match kind {
            SimulatorKind::TwoMoons => Simulator {
                kind,
                theta_dim: 2,
                x_dim: 2,
                prior_low: vec![-1.0; 2],
                prior_high: vec![1.0; 2],
            },
            SimulatorKind::Slcp => Simulator {
                kind,
                theta_dim: 5,
                x_dim: 8,
                prior_low: vec![-3.0; 5],
                prior_high: vec![3.0; 5],
            },
            // θ are log-rates; the forward model exponentiates them.
            SimulatorKind::LotkaVolterra => Simulator {
                kind,
                theta_dim: 4,
                x_dim: 9,
                prior_low: vec![-4.0; 4],
                prior_high: vec![1.0; 4],
            },
            SimulatorKind::GaussianLinear => Simulator {
                kind,
                theta_dim: 2,
                x_dim: 2,
                prior_low: vec![-1.0; 2],
                prior_high: vec![1.0; 2],
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SimulatorKind::TwoMoons => "two_moons",
            SimulatorKind::Slcp => "slcp",
            SimulatorKind::LotkaVolterra => "lotka_volterra",
            SimulatorKind::GaussianLinear => "gaussian_linear",
        }
    }

    /// Indices of the θ columns the estimator infers (the marginal target).
    pub fn marginal_indices(&self) -> Vec<usize> {
        match self.kind {
            // SLCP: marginal over the two mean parameters.
            SimulatorKind::Slcp => vec![0, 1],
            // Lotka-Volterra: the predator birth/death log-rates.
            SimulatorKind::LotkaVolterra => vec![2, 3],
            _ => (0..self.theta_dim).collect(),
        }
    }

    /// Prior box of the marginal target.
    pub fn marginal_box(&self) -> (Vec<f64>, Vec<f64>) {
        let idx = self.marginal_indices();
        (
            idx.iter().map(|&i| self.prior_low[i]).collect(),
            idx.iter().map(|&i| self.prior_high[i]).collect(),
        )
    }

    /// Uniform log density of the marginal prior (constant inside the box).
    pub fn marginal_prior_logpdf(&self, theta: &[f64]) -> f64 {
        let (low, high) = self.marginal_box();
        let mut acc = 0.0;
        for ((&t, &lo), &hi) in theta.iter().zip(&low).zip(&high) {
            if t < lo || t > hi {
                return f64::NEG_INFINITY;
            }
            acc -= (hi - lo).ln();
        }
        acc
    }

    /// Constant marginal prior density inside the box.
    pub fn marginal_prior_density(&self) -> f64 {
        let (low, high) = self.marginal_box();
        let vol: f64 = low.iter().zip(&high).map(|(l, h)| h - l).product();
        1.0 / vol
    }

    pub fn prior_logpdf(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&t, &lo), &hi) in theta.iter().zip(&self.prior_low).zip(&self.prior_high) {
            if t < lo || t > hi {
                return f64::NEG_INFINITY;
            }
            acc -= (hi - lo).ln();
        }
        acc
    }

    pub fn in_prior_box(&self, theta: &[f64]) -> bool {
        theta.len() == self.theta_dim
            && theta
                .iter()
                .zip(&self.prior_low)
                .zip(&self.prior_high)
                .all(|((&t, &lo), &hi)| t >= lo && t <= hi)
    }

    /// i.i.d. uniform draws over the prior box, [n × theta_dim].
    pub fn sample_prior(&self, n: usize, rng: &mut Rng) -> Array {
        let mut data = Vec::with_capacity(n * self.theta_dim);
        for _ in 0..n {
            for d in 0..self.theta_dim {
                data.push(rng.gen_range(self.prior_low[d]..self.prior_high[d]));
            }
        }
        Array::matrix(n, self.theta_dim, data)
    }

    /// One draw from p(x|θ).
    pub fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if !self.in_prior_box(theta) {
            return Err(SbiError::OutsidePriorBox);
        }
        Ok(match self.kind {
            SimulatorKind::TwoMoons => {
                let a = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
                let r = 0.1 + 0.01 * rng.sample::<f64, _>(StandardNormal);
                two_moons_forward(theta, a, r)
            }
            SimulatorKind::Slcp => {
                let (m, chol) = slcp_moments(theta);
                let mut x = Vec::with_capacity(8);
                for _ in 0..4 {
                    let z0: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    x.push(m[0] + chol[0] * z0);
                    x.push(m[1] + chol[1] * z0 + chol[2] * z1);
                }
                x
            }
            SimulatorKind::LotkaVolterra => {
                let rates = [
                    theta[0].exp(),
                    theta[1].exp(),
                    theta[2].exp(),
                    theta[3].exp(),
                ];
                let run = gillespie::simulate_lotka_volterra(
                    &rates,
                    LV_T_END,
                    LV_GRID_POINTS,
                    rng,
                );
                lv_summary(&run.prey, &run.predators)
            }
            SimulatorKind::GaussianLinear => theta
                .iter()
                .map(|&t| t + GAUSSIAN_LINEAR_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        })
    }

    /// `budget` i.i.d. joint samples, bit-reproducible for a given seed.
    /// Row i uses its own derived RNG stream.
    pub fn generate_dataset(&self, budget: usize, seed: u64) -> Result<Dataset> {
        let mut prior_rng = rng_from_seed(derive_seed(seed, u64::MAX));
        let thetas = self.sample_prior(budget, &mut prior_rng);
        let mut xs = Vec::with_capacity(budget * self.x_dim);
        for i in 0..budget {
            let mut row_rng = rng_from_seed(derive_seed(seed, i as u64));
            let x = self.simulate(thetas.row(i), &mut row_rng)?;
            xs.extend_from_slice(&x);
        }
        Ok(Dataset {
            simulator: self.name().into(),
            seed,
            thetas,
            xs: Array::matrix(budget, self.x_dim, xs),
        })
    }

    /// Per-feature observation support from pilot draws, widened by 10%.
    /// Deterministic: the pilot seed is derived from the simulator name.
    pub fn pilot_obs_bounds(&self, draws: usize) -> Result<ObsBounds> {
        let seed = seed_for_label(self.name(), 0xB0);
        let mut rng = rng_from_seed(seed);
        let thetas = self.sample_prior(draws, &mut rng);
        let mut low = vec![f64::INFINITY; self.x_dim];
        let mut high = vec![f64::NEG_INFINITY; self.x_dim];
        for i in 0..draws {
            let mut row_rng = rng_from_seed(derive_seed(seed, i as u64));
            let x = self.simulate(thetas.row(i), &mut row_rng)?;
            for (d, &v) in x.iter().enumerate() {
                low[d] = low[d].min(v);
                high[d] = high[d].max(v);
            }
        }
        for d in 0..self.x_dim {
            let c = 0.5 * (low[d] + high[d]);
            let h = 0.5 * (high[d] - low[d]);
            let h = if h > 0.0 { h * 1.1 } else { 1.0 };
            low[d] = c - h;
            high[d] = c + h;
        }
        Ok(ObsBounds { low, high })
    }

    pub fn default_pilot_draws(&self) -> usize {
        PILOT_DRAWS
    }

    /// Exact posterior of the Gaussian-linear oracle:
    /// N(x, σ²·I) truncated to the prior box.
    pub fn analytic_posterior(&self, x: &[f64]) -> Result<TruncatedGaussianPosterior> {
        if self.kind != SimulatorKind::GaussianLinear {
            return Err(SbiError::InvalidArgument(
                "analytic_posterior is only defined for the gaussian_linear oracle".into(),
            ));
        }
        Ok(TruncatedGaussianPosterior::new(
            x.to_vec(),
            vec![GAUSSIAN_LINEAR_NOISE_STD; self.theta_dim],
            self.prior_low.clone(),
            self.prior_high.clone(),
        ))
    }
}

/// Two Moons generative equations for fixed latents (a, r).
pub fn two_moons_forward(theta: &[f64], a: f64, r: f64) -> Vec<f64> {
    let p = [r * a.cos() + 0.25, r * a.sin()];
    let s = std::f64::consts::SQRT_2;
    vec![
        p[0] - (theta[0] + theta[1]).abs() / s,
        p[1] + (-theta[0] + theta[1]) / s,
    ]
}

/// SLCP mean and the lower-triangular Cholesky (l00, l10, l11) of the
/// 2×2 covariance built from θ. Scales are clamped away from zero so the
/// factor stays defined.
pub fn slcp_moments(theta: &[f64]) -> ([f64; 2], [f64; 3]) {
    let m = [theta[0], theta[1]];
    let s1 = (theta[2] * theta[2]).max(1e-3);
    let s2 = (theta[3] * theta[3]).max(1e-3);
    let rho = theta[4].tanh();
    // S = [[s1², ρ s1 s2], [ρ s1 s2, s2²]]
    let l00 = s1;
    let l10 = rho * s2;
    let l11 = s2 * (1.0 - rho * rho).max(1e-12).sqrt();
    (m, [l00, l10, l11])
}

/// 9-feature summary of a Lotka-Volterra trajectory pair: log-means,
/// log-variances, lag-1/lag-2 autocorrelations and the cross-correlation.
pub fn lv_summary(prey: &[f64], predators: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9);
    for series in [prey, predators] {
        out.push((crate::stats::mean(series) + 1.0).ln());
        out.push((crate::stats::variance(series) + 1.0).ln());
    }
    for series in [prey, predators] {
        for lag in [1usize, 2] {
            let n = series.len();
            out.push(correlation(&series[..n - lag], &series[lag..]));
        }
    }
    out.push(correlation(prey, predators));
    out
}
