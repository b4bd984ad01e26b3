//! Functional prior over posterior estimates: a Gaussian process centered
//! on the simulator's parameter prior, plus the machinery to tune a
//! weight-space Gaussian prior so the estimator's induced distribution
//! over posterior functions matches it — functional KL descent with
//! spectral Stein gradient estimates for the entropy term.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bnn::WeightDistribution;
use crate::error::{Result, SbiError};
use crate::estimators::optim::Adam;
use crate::estimators::PosteriorEstimator;
use crate::numcore::linalg::{cholesky, symmetric_eigen};
use crate::numcore::{Array, GraphBuilder};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::simulators::{ObsBounds, Simulator};
use crate::stats::quantile;

pub const DEFAULT_MEASUREMENT_SIZE: usize = 64;
pub const DEFAULT_TUNE_ITERS: usize = 2000;
pub const DEFAULT_N_FUNC: usize = 32;
pub const DEFAULT_TUNE_LR: f64 = 1e-3;
/// Initial weight-prior scale before tuning: function draws start
/// near-flat.
pub const INIT_PRIOR_STD: f64 = 0.1;
const LN_2PI: f64 = 1.8378770664093453;
/// Cap on distance pairs entering the lengthscale quantile.
const MAX_LENGTHSCALE_PAIRS: usize = 10_000;

/// Points (θ_i, x_i) at which functional distributions are compared.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub thetas: Array,
    pub xs: Array,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// θ uniform over the (marginal) prior box, x uniform over the
/// observation support bounds.
pub fn sample_measurement_set(
    sim: &Simulator,
    bounds: &ObsBounds,
    m: usize,
    rng: &mut Rng,
) -> MeasurementSet {
    let (low, high) = sim.marginal_box();
    let d = low.len();
    let mut t = Vec::with_capacity(m * d);
    let mut x = Vec::with_capacity(m * sim.x_dim);
    for _ in 0..m {
        for j in 0..d {
            t.push(rng.gen_range(low[j]..high[j]));
        }
        for j in 0..sim.x_dim {
            if bounds.high[j] > bounds.low[j] {
                x.push(rng.gen_range(bounds.low[j]..bounds.high[j]));
            } else {
                x.push(bounds.low[j]);
            }
        }
    }
    MeasurementSet {
        thetas: Array::matrix(m, d, t),
        xs: Array::matrix(m, sim.x_dim, x),
    }
}

/// Per-feature lengthscales from the 0.1 quantile of squared pairwise
/// distances: 2·l² = q₀.₁. Constant features get l = 1; degenerate
/// (mostly-repeated) features are floored at 1e-3.
pub fn lengthscales_from_measurements(samples: &Array) -> Vec<f64> {
    let n = samples.rows();
    let d = samples.cols();
    assert!(n >= 2, "lengthscales need at least two samples");
    // thin rows evenly so the pair count stays bounded
    let max_rows = ((2.0 * MAX_LENGTHSCALE_PAIRS as f64).sqrt() as usize + 1).max(2);
    let stride = n.div_ceil(max_rows).max(1);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    (0..d)
        .map(|f| {
            let vals: Vec<f64> = rows.iter().map(|&i| samples.get2(i, f)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                return 1.0;
            }
            let mut sq = Vec::with_capacity(vals.len() * (vals.len() - 1) / 2);
            for a in 0..vals.len() {
                for b in a + 1..vals.len() {
                    let dlt = vals[a] - vals[b];
                    sq.push(dlt * dlt);
                }
            }
            let q = quantile(&mut sq, 0.1);
            (q / 2.0).sqrt().max(1e-3)
        })
        .collect()
}

/// GP over posterior-density values with constant mean C (the uniform
/// prior density) and a separable RBF kernel √RBF(θ)·√RBF(x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpFunctionalPrior {
    /// Mean function value: density of the uniform prior over the box.
    pub mean_value: f64,
    pub sigma: f64,
    pub lengthscales_theta: Vec<f64>,
    pub lengthscales_x: Vec<f64>,
    pub jitter: f64,
}

impl GpFunctionalPrior {
    /// Fit lengthscales from uniformly sampled measurement points.
    pub fn fit(sim: &Simulator, bounds: &ObsBounds, n_samples: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, 0x6F));
        let mset = sample_measurement_set(sim, bounds, n_samples, &mut rng);
        let c = sim.marginal_prior_density();
        let sigma = c / 2.0;
        GpFunctionalPrior {
            mean_value: c,
            sigma,
            lengthscales_theta: lengthscales_from_measurements(&mset.thetas),
            lengthscales_x: lengthscales_from_measurements(&mset.xs),
            jitter: 1e-6 * sigma * sigma,
        }
    }

    fn rbf_exponent(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
        let n = a.len() as f64;
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            acc += d * d / (2.0 * ls[i] * ls[i]);
        }
        -acc / n
    }

    /// K((θ₁,x₁),(θ₂,x₂)) = √RBF_θ · √RBF_x; identical inputs give σ².
    pub fn kernel(&self, t1: &[f64], x1: &[f64], t2: &[f64], x2: &[f64]) -> f64 {
        let et = Self::rbf_exponent(t1, t2, &self.lengthscales_theta);
        let ex = Self::rbf_exponent(x1, x2, &self.lengthscales_x);
        self.sigma * self.sigma * (0.5 * (et + ex)).exp()
    }

    pub fn gram(&self, mset: &MeasurementSet) -> Array {
        let m = mset.len();
        let mut k = Array::zeros(&[m, m]);
        for i in 0..m {
            for j in i..m {
                let v = self.kernel(
                    mset.thetas.row(i),
                    mset.xs.row(i),
                    mset.thetas.row(j),
                    mset.xs.row(j),
                );
                k.set2(i, j, v);
                k.set2(j, i, v);
            }
        }
        k
    }

    /// Gram + jitter·I with the jitter escalated (×100) once if the
    /// Cholesky factorization fails.
    pub fn covariance(&self, mset: &MeasurementSet) -> Result<Array> {
        let base = self.gram(mset);
        for jitter in [self.jitter, 1e-4 * self.sigma * self.sigma] {
            let mut cov = base.clone();
            for i in 0..cov.rows() {
                let v = cov.get2(i, i) + jitter;
                cov.set2(i, i, v);
            }
            if cholesky(&cov).is_ok() {
                return Ok(cov);
            }
        }
        Err(SbiError::CholeskyFailure(
            "functional prior covariance not positive definite after jitter escalation".into(),
        ))
    }

    /// log N(f; C·1, Gram + jitter·I).
    pub fn gp_log_density(&self, f: &[f64], mset: &MeasurementSet) -> Result<f64> {
        let m = mset.len();
        if f.len() != m {
            return Err(SbiError::ShapeMismatch {
                context: "gp_log_density".into(),
                expected: vec![m],
                got: vec![f.len()],
            });
        }
        let cov = self.covariance(mset)?;
        let chol = cholesky(&cov)?;
        let dev: Vec<f64> = f.iter().map(|&v| v - self.mean_value).collect();
        let alpha = chol.solve(&dev);
        let quad: f64 = dev.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        Ok(-0.5 * quad - chol.log_det_sqrt() - 0.5 * m as f64 * LN_2PI)
    }

    /// A draw from the GP over a measurement set (for oracles/tests).
    pub fn sample_function(&self, mset: &MeasurementSet, rng: &mut Rng) -> Result<Vec<f64>> {
        let cov = self.covariance(mset)?;
        let chol = cholesky(&cov)?;
        let z: Vec<f64> = (0..mset.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Ok(chol
            .lower_mul(&z)
            .iter()
            .map(|v| v + self.mean_value)
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsgeConfig {
    /// Eigenfunctions kept; effective J is capped at the numerical rank.
    pub n_eigen: usize,
    /// RBF bandwidth; median pairwise distance when absent.
    pub bandwidth: Option<f64>,
}

impl Default for SsgeConfig {
    fn default() -> Self {
        SsgeConfig { n_eigen: 6, bandwidth: None }
    }
}

/// Spectral Stein gradient estimator: ∇_f log q(f) at each sample row,
/// from samples alone, via the Nyström eigenfunctions of an RBF Gram
/// matrix.
pub fn ssge_scores(samples: &Array, cfg: &SsgeConfig) -> Result<Array> {
    let n = samples.rows();
    let d = samples.cols();
    if n < 2 {
        return Err(SbiError::InvalidArgument(
            "SSGE needs at least two samples".into(),
        ));
    }
    // pairwise squared distances
    let mut sq = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for f in 0..d {
                let dv = samples.get2(i, f) - samples.get2(j, f);
                acc += dv * dv;
            }
            sq.set2(i, j, acc);
            sq.set2(j, i, acc);
        }
    }
    let h = match cfg.bandwidth {
        Some(b) => b,
        None => {
            let mut dists: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| sq.get2(i, j).sqrt())
                .collect();
            let med = quantile(&mut dists, 0.5);
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let h2 = h * h;
    let gram = sq.map(|v| (-v / (2.0 * h2)).exp());
    let (eigvals, eigvecs) = symmetric_eigen(&gram);
    let lam_max = eigvals[0].max(0.0);
    if lam_max <= 0.0 {
        return Err(SbiError::InvalidArgument("SSGE Gram has no positive eigenvalues".into()));
    }
    let j_max = cfg.n_eigen.min(n - 1).max(1);
    // drop eigenpairs below numerical rank
    let kept: Vec<usize> = (0..j_max)
        .filter(|&j| eigvals[j] > 1e-10 * lam_max)
        .collect();
    let sqrt_n = (n as f64).sqrt();
    // ψ_j at the samples: ψ_j(f_m) = √N · u_{mj}
    // β_{jd} = −(1/N) Σ_m ∂_d ψ_j(f_m), with
    // ∂_d ψ_j(f) = (√N/λ_j) Σ_m u_{mj} · k(f, f_m) · (f_{m,d} − f_d)/h²
    let mut beta = vec![vec![0.0; d]; kept.len()];
    for (ki, &j) in kept.iter().enumerate() {
        let lam = eigvals[j];
        for m_i in 0..n {
            for f in 0..d {
                let mut acc = 0.0;
                for mm in 0..n {
                    acc += eigvecs.get2(mm, j)
                        * gram.get2(m_i, mm)
                        * (samples.get2(mm, f) - samples.get2(m_i, f))
                        / h2;
                }
                beta[ki][f] -= sqrt_n / lam * acc / n as f64;
            }
        }
    }
    let mut scores = Array::zeros(&[n, d]);
    for i in 0..n {
        for f in 0..d {
            let mut acc = 0.0;
            for (ki, &j) in kept.iter().enumerate() {
                acc += beta[ki][f] * sqrt_n * eigvecs.get2(i, j);
            }
            scores.set2(i, f, acc);
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneConfig {
    pub iters: usize,
    pub n_func: usize,
    pub measurement_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub ssge: Option<SsgeConfig>,
}

impl TuneConfig {
    pub fn new(seed: u64) -> TuneConfig {
        TuneConfig {
            iters: DEFAULT_TUNE_ITERS,
            n_func: DEFAULT_N_FUNC,
            measurement_size: DEFAULT_MEASUREMENT_SIZE,
            lr: DEFAULT_TUNE_LR,
            seed,
            ssge: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub iters: usize,
    pub initial_cross_term: f64,
    pub final_cross_term: f64,
}

/// Tune a factorized Gaussian weight prior φ so that posterior functions
/// sampled through it match the GP functional prior: descend the
/// functional KL, with the entropy gradient estimated by SSGE and the
/// cross term backpropagated through the GP log density.
pub fn tune_prior(
    est: &PosteriorEstimator,
    sim: &Simulator,
    bounds: &ObsBounds,
    gp: &GpFunctionalPrior,
    cfg: &TuneConfig,
) -> Result<(WeightDistribution, TuneReport)> {
    let n = est.n_weights();
    let mut phi = WeightDistribution::isotropic(n, 0.0, INIT_PRIOR_STD);
    let mut opt_mu = Adam::new(n, cfg.lr);
    let mut opt_rho = Adam::new(n, cfg.lr);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x7C9));
    let ssge_cfg = cfg.ssge.clone().unwrap_or_default();
    let mut first_cross = f64::NAN;
    let mut last_cross = f64::NAN;
    let mut ema = f64::NAN;
    for it in 0..cfg.iters {
        let mset = sample_measurement_set(sim, bounds, cfg.measurement_size, &mut rng);
        let cov = gp.covariance(&mset)?;
        let m = mset.len();
        // function samples through the current prior (plain path)
        let mut noises = Vec::with_capacity(cfg.n_func);
        let mut f_rows = Vec::with_capacity(cfg.n_func);
        for _ in 0..cfg.n_func {
            let (w, eps) = phi.sample_with_noise(&mut rng);
            let lp = est.log_posterior_batch(&w, &mset.thetas, &mset.xs)?;
            f_rows.push(lp.iter().map(|v| v.exp()).collect::<Vec<f64>>());
            noises.push(eps);
        }
        let f_samples = Array::from_rows(&f_rows);
        if !f_samples.all_finite() {
            return Err(SbiError::Divergence(
                "non-finite function sample during prior tuning".into(),
            ));
        }
        let scores = ssge_scores(&f_samples, &ssge_cfg)?;
        // surrogate whose φ-gradient is ∇KL: mean over function samples of
        // ĝᵀf (entropy part, scores held constant) − log p_GP(f)
        let mut gb = GraphBuilder::new();
        let mu = gb.leaf("mu", &[n]);
        let rho = gb.leaf("rho", &[n]);
        let soft = gb.softplus(rho);
        let sigma = gb.add_const(soft, crate::bnn::STD_FLOOR);
        let mean_node = gb.constant(Array::vector(vec![gp.mean_value; m]));
        let cov_node = gb.constant(cov);
        let mut terms = Vec::with_capacity(cfg.n_func);
        for s in 0..cfg.n_func {
            let eps = gb.constant(Array::vector(noises[s].clone()));
            let noise = gb.mul(sigma, eps);
            let w = gb.add(mu, noise);
            let f = est.build_density_vector(&mut gb, w, &mset.thetas, &mset.xs);
            let g_const = gb.constant(Array::vector(scores.row(s).to_vec()));
            let entropy_part = gb.dot(g_const, f);
            let gp_part = gb.mvn_log_density(f, mean_node, cov_node);
            terms.push(gb.sub(entropy_part, gp_part));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = gb.add(total, t);
        }
        let loss = gb.scale(total, 1.0 / cfg.n_func as f64);
        let graph = gb.finish(loss);
        let mut inputs = HashMap::new();
        inputs.insert("mu".to_string(), Array::vector(phi.mean.clone()));
        inputs.insert("rho".to_string(), Array::vector(phi.raw_std.clone()));
        let eval = graph.forward(&inputs)?;
        let grads = graph.backward(&eval, 1.0)?;
        let gmu = grads["mu"].data().to_vec();
        let grho = grads["rho"].data().to_vec();
        if gmu.iter().chain(&grho).any(|g| !g.is_finite()) {
            return Err(SbiError::Divergence(
                "non-finite gradient during prior tuning".into(),
            ));
        }
        opt_mu.step(&mut phi.mean, &gmu);
        opt_rho.step(&mut phi.raw_std, &grho);
        // monitor the cross term −E[log p_GP(f)]
        let mut cross = 0.0;
        for row in &f_rows {
            cross -= gp.gp_log_density(row, &mset)?;
        }
        cross /= cfg.n_func as f64;
        if !cross.is_finite() {
            return Err(SbiError::Divergence("cross term diverged".into()));
        }
        if it == 0 {
            first_cross = cross;
            ema = cross;
        } else {
            ema = 0.9 * ema + 0.1 * cross;
        }
        if it > 20 && ema > first_cross + 10.0 * first_cross.abs().max(1.0) {
            return Err(SbiError::Divergence(format!(
                "cross term moving average worsened from {first_cross:.3} to {ema:.3}"
            )));
        }
        last_cross = cross;
    }
    Ok((
        phi,
        TuneReport {
            iters: cfg.iters,
            initial_cross_term: first_cross,
            final_cross_term: last_cross,
        },
    ))
}
