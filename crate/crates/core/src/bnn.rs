//! Bayesian treatment of the estimator weights: factorized Gaussian
//! weight distributions, mean-field variational inference against a
//! (possibly tuned) Gaussian weight prior, Bayesian model averaging and
//! deep-ensemble baselines.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbiError};
use crate::estimators::train::{make_batches, TrainConfig};
use crate::estimators::optim::Adam;
use crate::estimators::PosteriorEstimator;
use crate::numcore::graph::NodeId;
use crate::numcore::{Array, GraphBuilder};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Floor added to the softplus std so scales cannot collapse to zero.
pub const STD_FLOOR: f64 = 0.001;
/// Monte Carlo samples per gradient step.
pub const DEFAULT_MC_TRAIN: usize = 4;
/// Weight draws for the Bayesian model average.
pub const DEFAULT_BMA_SAMPLES: usize = 100;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

// Must stay numerically identical to the graph softplus primitive so
// that plain-path weight samples match in-graph reparameterized ones.
fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

/// Inverse of softplus(ρ) + STD_FLOOR = σ.
fn raw_from_std(sigma: f64) -> f64 {
    let s = (sigma - STD_FLOOR).max(1e-12);
    if s > 30.0 {
        s
    } else {
        (s.exp() - 1.0).ln()
    }
}

/// Factorized Gaussian over a flat weight vector, scales stored through
/// the softplus parameterization σ = softplus(ρ) + floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub mean: Vec<f64>,
    pub raw_std: Vec<f64>,
}

impl WeightDistribution {
    pub fn isotropic(n: usize, mean: f64, std: f64) -> WeightDistribution {
        WeightDistribution {
            mean: vec![mean; n],
            raw_std: vec![raw_from_std(std); n],
        }
    }

    pub fn from_moments(mean: Vec<f64>, std: &[f64]) -> WeightDistribution {
        let raw_std = std.iter().map(|&s| raw_from_std(s)).collect();
        WeightDistribution { mean, raw_std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.raw_std.iter().map(|&r| softplus(r) + STD_FLOOR).collect()
    }

    /// Reparameterized draw; returns the weights and the noise used.
    pub fn sample_with_noise(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..self.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let std = self.std();
        let w = self
            .mean
            .iter()
            .zip(std.iter().zip(&eps))
            .map(|(&m, (&s, &e))| m + s * e)
            .collect();
        (w, eps)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.sample_with_noise(rng).0
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        const LN_2PI: f64 = 1.8378770664093453;
        let std = self.std();
        w.iter()
            .zip(self.mean.iter().zip(&std))
            .map(|(&v, (&m, &s))| {
                let z = (v - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Closed-form KL(self ‖ other) between factorized Gaussians.
    pub fn kl_to(&self, other: &WeightDistribution) -> f64 {
        let sq = self.std();
        let sp = other.std();
        let mut acc = 0.0;
        for i in 0..self.len() {
            let dm = self.mean[i] - other.mean[i];
            acc += (sp[i] / sq[i]).ln() + (sq[i] * sq[i] + dm * dm) / (2.0 * sp[i] * sp[i]) - 0.5;
        }
        acc
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mc_train: usize,
    /// Multiplier on the KL term (cold posterior when < 1).
    pub temperature: f64,
    pub seed: u64,
}

impl ViConfig {
    pub fn new(seed: u64) -> ViConfig {
        let base = TrainConfig::new(seed);
        ViConfig {
            epochs: base.epochs,
            lr: base.lr,
            batch_size: base.batch_size,
            mc_train: DEFAULT_MC_TRAIN,
            temperature: 1.0,
            seed,
        }
    }
}

/// Graph for KL(q‖p) with q = (mu, rho) leaves and p constant.
fn build_kl_term(
    gb: &mut GraphBuilder,
    mu: NodeId,
    rho: NodeId,
    prior: &WeightDistribution,
) -> NodeId {
    let n = prior.len();
    let sp = prior.std();
    let sp_node = gb.constant(Array::vector(sp.clone()));
    let mup = gb.constant(Array::vector(prior.mean.clone()));
    let soft = gb.softplus(rho);
    let sq = gb.add_const(soft, STD_FLOOR);
    let log_sq = gb.log(sq);
    let log_sp = gb.log(sp_node);
    let log_ratio = gb.sub(log_sp, log_sq);
    let dm = gb.sub(mu, mup);
    let dm2 = gb.square(dm);
    let sq2 = gb.square(sq);
    let num = gb.add(sq2, dm2);
    let inv_2sp2: Vec<f64> = sp.iter().map(|&s| 1.0 / (2.0 * s * s)).collect();
    let inv_node = gb.constant(Array::vector(inv_2sp2));
    let quad = gb.mul(num, inv_node);
    let terms = gb.add(log_ratio, quad);
    let summed = gb.sum_all(terms);
    gb.add_const(summed, -0.5 * n as f64)
}

/// One stochastic estimate of the tempered negative ELBO and its
/// gradient with respect to (mu, rho), using `mc_train` reparameterized
/// weight draws on one mini-batch.
#[allow(clippy::too_many_arguments)]
fn vi_step_loss_grad(
    est: &PosteriorEstimator,
    q: &WeightDistribution,
    prior: &WeightDistribution,
    batch: &crate::estimators::TrainingBatch,
    n_total: usize,
    mc_train: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = q.len();
    let b = batch.xs.rows();
    let mut gb = GraphBuilder::new();
    let mu = gb.leaf("mu", &[n]);
    let rho = gb.leaf("rho", &[n]);
    let soft = gb.softplus(rho);
    let sigma = gb.add_const(soft, STD_FLOOR);
    let mut ll_terms = Vec::with_capacity(mc_train);
    for _ in 0..mc_train {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = gb.constant(Array::vector(eps));
        let noise = gb.mul(sigma, eps);
        let w = gb.add(mu, noise);
        ll_terms.push(est.build_batch_loglik_sum(&mut gb, w, batch));
    }
    let mut ll_sum = ll_terms[0];
    for &t in &ll_terms[1..] {
        ll_sum = gb.add(ll_sum, t);
    }
    // −(N/B)·(1/S)·Σ log p + T·KL
    let scale = -(n_total as f64) / (b as f64 * mc_train as f64);
    let data_term = gb.scale(ll_sum, scale);
    let kl = build_kl_term(&mut gb, mu, rho, prior);
    let kl_term = gb.scale(kl, temperature);
    let loss = gb.add(data_term, kl_term);
    let graph = gb.finish(loss);
    let mut inputs = HashMap::new();
    inputs.insert("mu".to_string(), Array::vector(q.mean.clone()));
    inputs.insert("rho".to_string(), Array::vector(q.raw_std.clone()));
    let eval = graph.forward(&inputs)?;
    let loss_val = graph.output_value(&eval).item();
    let grads = graph.backward(&eval, 1.0)?;
    let gmu = grads["mu"].data().to_vec();
    let grho = grads["rho"].data().to_vec();
    if !loss_val.is_finite()
        || gmu.iter().any(|g| !g.is_finite())
        || grho.iter().any(|g| !g.is_finite())
    {
        return Err(SbiError::Divergence(
            "non-finite variational loss or gradient".into(),
        ));
    }
    Ok((loss_val, gmu, grho))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViReport {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_kl: f64,
}

/// Mean-field variational inference over the estimator weights. The
/// variational distribution is initialized at the prior.
pub fn train_vi(
    est: &PosteriorEstimator,
    prior: &WeightDistribution,
    thetas: &Array,
    xs: &Array,
    cfg: &ViConfig,
) -> Result<(WeightDistribution, ViReport)> {
    let n = est.n_weights();
    if prior.len() != n {
        return Err(SbiError::ShapeMismatch {
            context: "weight prior".into(),
            expected: vec![n],
            got: vec![prior.len()],
        });
    }
    let n_total = thetas.rows();
    let mut q = prior.clone();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x5651));
    let mut opt_mu = Adam::new(n, cfg.lr);
    let mut opt_rho = Adam::new(n, cfg.lr);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(est, thetas, xs, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (loss, gmu, grho) = vi_step_loss_grad(
                est,
                &q,
                prior,
                batch,
                n_total,
                cfg.mc_train,
                cfg.temperature,
                &mut rng,
            )?;
            opt_mu.step(&mut q.mean, &gmu);
            opt_rho.step(&mut q.raw_std, &grho);
            epoch_loss += loss;
        }
        epoch_loss /= batches.len() as f64;
        if epoch == 0 {
            first = epoch_loss;
        }
        last = epoch_loss;
    }
    let report = ViReport {
        epochs: cfg.epochs,
        initial_loss: first,
        final_loss: last,
        final_kl: q.kl_to(prior),
    };
    Ok((q, report))
}

/// Draw weight sets for a Bayesian model average.
pub fn bma_weight_sets(
    q: &WeightDistribution,
    n_samples: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(derive_seed(seed, 0xB3A));
    (0..n_samples).map(|_| q.sample(&mut rng)).collect()
}

/// log[(1/M) Σ_m p(θ|x, w_m)] over a collection of weight sets.
pub fn bma_log_density(
    est: &PosteriorEstimator,
    weight_sets: &[Vec<f64>],
    theta: &[f64],
    x: &[f64],
) -> Result<f64> {
    let terms: Result<Vec<f64>> = weight_sets
        .iter()
        .map(|w| est.log_posterior(theta, x, w))
        .collect();
    Ok(crate::numcore::logsumexp(&terms?) - (weight_sets.len() as f64).ln())
}

/// Independent MAP fits from different initializations.
pub fn train_ensemble(
    est: &PosteriorEstimator,
    thetas: &Array,
    xs: &Array,
    cfg: &TrainConfig,
    n_members: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut members = Vec::with_capacity(n_members);
    for m in 0..n_members {
        let mut member_cfg = cfg.clone();
        member_cfg.seed = derive_seed(cfg.seed, 0xE5 + m as u64);
        let (w, _) = crate::estimators::train::train_map(est, thetas, xs, &member_cfg)?;
        members.push(w);
    }
    Ok(members)
}
