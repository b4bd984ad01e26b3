//! Conditional posterior surrogates: a mixture-density posterior estimator
//! (NPE role) and a classifier-based likelihood-to-evidence ratio estimator
//! (NRE role). Both are deterministic functions of a flat weight vector, so
//! the same estimator serves MAP training, ensembles and variational
//! weight posteriors.

pub mod optim;
pub mod train;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbiError};
use crate::numcore::graph::{GraphBuilder, NodeId};
use crate::numcore::{logsumexp, Array};
use crate::rng::Rng;
use crate::simulators::{ObsBounds, Simulator};

const LN_2PI: f64 = 1.8378770664093453;

/// How far outside the prior box MDN component means may drift, as a
/// multiple of the box half-width.
const MEAN_RANGE_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network shape; the weight vector layout is
/// `[W0, b0, W1, b1, ...]` with each `W` stored row-major `[in × out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// (fan_in, fan_out) per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_units));
            prev = self.hidden_units;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn n_weights(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Xavier-style init: W ~ N(0, 1/fan_in), biases zero, final layer
    /// zeroed so a fresh MDN starts at a unit Gaussian on the box center.
    pub fn init_weights(&self, rng: &mut Rng) -> Vec<f64> {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut w = Vec::with_capacity(self.n_weights());
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                if li == last {
                    w.push(0.0);
                } else {
                    w.push(std * rng.sample::<f64, _>(StandardNormal));
                }
            }
            w.extend(std::iter::repeat(0.0).take(fan_out));
        }
        w
    }

    fn activate(&self, v: f64) -> f64 {
        match self.activation {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Plain batched forward pass: x [B×in] -> [B×out].
    pub fn forward(&self, w: &[f64], x: &Array) -> Array {
        debug_assert_eq!(w.len(), self.n_weights());
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut h = x.clone();
        let mut off = 0;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let wmat = Array::matrix(fan_in, fan_out, w[off..off + fan_in * fan_out].to_vec());
            off += fan_in * fan_out;
            let bias = &w[off..off + fan_out];
            off += fan_out;
            let mut out = h.matmul(&wmat);
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bias[i % fan_out];
                if li != last {
                    *v = self.activate(*v);
                }
            }
            h = out;
        }
        h
    }

    /// Same computation as [`forward`](Self::forward) expressed as graph
    /// nodes, with the weight vector as a differentiable input.
    pub fn build_forward(&self, gb: &mut GraphBuilder, w: NodeId, x: NodeId) -> NodeId {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut h = x;
        let mut off = 0;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let wmat = gb.slice_flat(w, off, &[fan_in, fan_out]);
            off += fan_in * fan_out;
            let bias = gb.slice_flat(w, off, &[fan_out]);
            off += fan_out;
            let mm = gb.matmul(h, wmat);
            let z = gb.add_row(mm, bias);
            h = if li != last {
                match self.activation {
                    Activation::Tanh => gb.tanh(z),
                    Activation::Relu => gb.relu(z),
                }
            } else {
                z
            };
        }
        h
    }
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Moments of a uniform distribution over [low, high].
    pub fn from_uniform_box(low: &[f64], high: &[f64]) -> Standardizer {
        let mean = low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect();
        let std = low
            .iter()
            .zip(high)
            .map(|(l, h)| ((h - l) / 12f64.sqrt()).max(1e-12))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }

    pub fn apply(&self, m: &Array) -> Array {
        let c = m.cols();
        let mut out = m.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let d = i % c;
            *v = (*v - self.mean[d]) / self.std[d];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Mixture-density network modeling p(θ|x) directly.
    NpeMdn,
    /// Classifier whose raw score estimates the log likelihood-to-evidence
    /// ratio; posterior = ratio × prior.
    Nre,
}

/// A conditional posterior surrogate over the marginal inference target of
/// a simulator. Holds architecture and standardization constants; weights
/// live outside as flat vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimator {
    pub kind: EstimatorKind,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    /// Mixture components (MDN only).
    pub n_components: usize,
    pub x_standardizer: Standardizer,
    pub theta_standardizer: Standardizer,
    /// Prior box of the marginal target.
    pub box_low: Vec<f64>,
    pub box_high: Vec<f64>,
    /// Uniform log prior density inside the box (NRE posterior offset).
    pub prior_log_density: f64,
}

/// Mixture parameters produced by an MDN for one observation.
#[derive(Debug, Clone)]
pub struct MdnParams {
    pub log_weights: Vec<f64>,
    /// [K × d], row-major.
    pub means: Vec<f64>,
    /// [K × d], row-major.
    pub log_stds: Vec<f64>,
    pub dim: usize,
}

pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN_UNITS: usize = 64;
pub const DEFAULT_COMPONENTS: usize = 8;

impl PosteriorEstimator {
    pub fn new(
        kind: EstimatorKind,
        sim: &Simulator,
        bounds: &ObsBounds,
        hidden_layers: usize,
        hidden_units: usize,
        n_components: usize,
    ) -> PosteriorEstimator {
        let (box_low, box_high) = sim.marginal_box();
        let vol: f64 = box_low
            .iter()
            .zip(&box_high)
            .map(|(l, h)| h - l)
            .product();
        PosteriorEstimator {
            kind,
            theta_dim: box_low.len(),
            x_dim: sim.x_dim,
            hidden_layers,
            hidden_units,
            activation: Activation::Tanh,
            n_components,
            x_standardizer: Standardizer::from_uniform_box(&bounds.low, &bounds.high),
            theta_standardizer: Standardizer::from_uniform_box(&box_low, &box_high),
            box_low,
            box_high,
            prior_log_density: -vol.ln(),
        }
    }

    pub fn mdn(sim: &Simulator, bounds: &ObsBounds) -> PosteriorEstimator {
        Self::new(
            EstimatorKind::NpeMdn,
            sim,
            bounds,
            DEFAULT_HIDDEN_LAYERS,
            DEFAULT_HIDDEN_UNITS,
            DEFAULT_COMPONENTS,
        )
    }

    pub fn nre(sim: &Simulator, bounds: &ObsBounds) -> PosteriorEstimator {
        Self::new(
            EstimatorKind::Nre,
            sim,
            bounds,
            DEFAULT_HIDDEN_LAYERS,
            DEFAULT_HIDDEN_UNITS,
            0,
        )
    }

    pub fn mlp(&self) -> MlpSpec {
        let (input_dim, output_dim) = match self.kind {
            EstimatorKind::NpeMdn => (
                self.x_dim,
                self.n_components * (1 + 2 * self.theta_dim),
            ),
            EstimatorKind::Nre => (self.theta_dim + self.x_dim, 1),
        };
        MlpSpec {
            input_dim,
            output_dim,
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            activation: self.activation,
        }
    }

    pub fn n_weights(&self) -> usize {
        self.mlp().n_weights()
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(SbiError::ShapeMismatch {
                context: "weight vector".into(),
                expected: vec![self.n_weights()],
                got: vec![w.len()],
            });
        }
        Ok(())
    }

    fn mean_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let center: Vec<f64> = self
            .box_low
            .iter()
            .zip(&self.box_high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        let scale: Vec<f64> = self
            .box_low
            .iter()
            .zip(&self.box_high)
            .map(|(l, h)| MEAN_RANGE_FACTOR * 0.5 * (h - l))
            .collect();
        (center, scale)
    }

    /// Mixture parameters for one observation (MDN only).
    pub fn mdn_params(&self, w: &[f64], x: &[f64]) -> Result<MdnParams> {
        self.check_weights(w)?;
        let x_std = Array::matrix(1, self.x_dim, self.x_standardizer.apply_row(x));
        let head = self.mlp().forward(w, &x_std);
        self.mdn_params_from_head(head.data())
    }

    fn mdn_params_from_head(&self, head: &[f64]) -> Result<MdnParams> {
        if head.iter().any(|v| !v.is_finite()) {
            return Err(SbiError::NonFinite { context: "MDN head output".into() });
        }
        let k = self.n_components;
        let d = self.theta_dim;
        let (center, scale) = self.mean_scale();
        let lse = logsumexp(&head[..k]);
        let log_weights = head[..k].iter().map(|&v| v - lse).collect();
        let means = head[k..k + k * d]
            .iter()
            .enumerate()
            .map(|(i, &v)| center[i % d] + scale[i % d] * v.tanh())
            .collect();
        let log_stds = head[k + k * d..k + 2 * k * d].to_vec();
        Ok(MdnParams { log_weights, means, log_stds, dim: d })
    }

    /// Mixture parameters for every row of xs (one network forward).
    pub fn mdn_params_batch(&self, w: &[f64], xs: &Array) -> Result<Vec<MdnParams>> {
        self.check_weights(w)?;
        let xs_std = self.x_standardizer.apply(xs);
        let heads = self.mlp().forward(w, &xs_std);
        (0..heads.rows())
            .map(|i| self.mdn_params_from_head(heads.row(i)))
            .collect()
    }

    /// Raw classifier score log r(θ, x) (NRE only).
    pub fn nre_score(&self, w: &[f64], theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        let mut row = self.theta_standardizer.apply_row(theta);
        row.extend(self.x_standardizer.apply_row(x));
        let input = Array::matrix(1, row.len(), row);
        let out = self.mlp().forward(w, &input);
        let s = out.item();
        if !s.is_finite() {
            return Err(SbiError::NonFinite { context: "NRE score output".into() });
        }
        Ok(s)
    }

    /// log p(θ_i|x_i, w) for paired rows, one batched network forward.
    pub fn log_posterior_batch(
        &self,
        w: &[f64],
        thetas: &Array,
        xs: &Array,
    ) -> Result<Vec<f64>> {
        match self.kind {
            EstimatorKind::NpeMdn => {
                let params = self.mdn_params_batch(w, xs)?;
                Ok(params
                    .iter()
                    .zip(0..thetas.rows())
                    .map(|(p, i)| p.log_density(thetas.row(i)))
                    .collect())
            }
            EstimatorKind::Nre => {
                self.check_weights(w)?;
                let b = xs.rows();
                let mut rows = Vec::with_capacity(b);
                for i in 0..b {
                    let mut row = self.theta_standardizer.apply_row(thetas.row(i));
                    row.extend(self.x_standardizer.apply_row(xs.row(i)));
                    rows.push(row);
                }
                let out = self.mlp().forward(w, &Array::from_rows(&rows));
                (0..b)
                    .map(|i| {
                        let s = out.data()[i];
                        if !s.is_finite() {
                            return Err(SbiError::NonFinite {
                                context: "NRE score output".into(),
                            });
                        }
                        Ok(s + uniform_box_logpdf(thetas.row(i), &self.box_low, &self.box_high))
                    })
                    .collect()
            }
        }
    }

    /// log p(θ|x, w).
    pub fn log_posterior(&self, theta: &[f64], x: &[f64], w: &[f64]) -> Result<f64> {
        match self.kind {
            EstimatorKind::NpeMdn => Ok(self.mdn_params(w, x)?.log_density(theta)),
            EstimatorKind::Nre => {
                let lp = uniform_box_logpdf(theta, &self.box_low, &self.box_high);
                if lp == f64::NEG_INFINITY {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(self.nre_score(w, theta, x)? + lp)
            }
        }
    }

    pub fn posterior_density(&self, theta: &[f64], x: &[f64], w: &[f64]) -> Result<f64> {
        Ok(self.log_posterior(theta, x, w)?.exp())
    }

    /// Graph: per-row log posterior over paired constant rows
    /// (xs [B×x_dim], thetas [B×θ_dim], original units) -> [B].
    /// Only the weight node carries gradients.
    pub fn build_log_posterior_rows(
        &self,
        gb: &mut GraphBuilder,
        w: NodeId,
        xs: &Array,
        thetas: &Array,
    ) -> NodeId {
        match self.kind {
            EstimatorKind::NpeMdn => {
                let xs_std = gb.constant(self.x_standardizer.apply(xs));
                let theta_node = gb.constant(thetas.clone());
                self.build_mdn_log_density_rows(gb, w, xs_std, theta_node)
            }
            EstimatorKind::Nre => {
                let scores = self.build_nre_scores(gb, w, xs, thetas);
                let prior: Vec<f64> = (0..thetas.rows())
                    .map(|i| uniform_box_logpdf(thetas.row(i), &self.box_low, &self.box_high))
                    .collect();
                let prior = gb.constant(Array::vector(prior));
                gb.add(scores, prior)
            }
        }
    }

    /// MDN: log density rows given a standardized-x node and a θ node
    /// (θ in original units; may itself be a graph computation).
    pub fn build_mdn_log_density_rows(
        &self,
        gb: &mut GraphBuilder,
        w: NodeId,
        xs_std: NodeId,
        thetas: NodeId,
    ) -> NodeId {
        let k = self.n_components;
        let d = self.theta_dim;
        let head = self.mlp().build_forward(gb, w, xs_std);
        let logits = gb.slice_cols(head, 0, k);
        let logw = gb.log_softmax_rows(logits);
        let raw_means = gb.slice_cols(head, k, k * d);
        let tanh_means = gb.tanh(raw_means);
        let (center, scale) = self.mean_scale();
        let scale_row: Vec<f64> = (0..k * d).map(|i| scale[i % d]).collect();
        let center_row: Vec<f64> = (0..k * d).map(|i| center[i % d]).collect();
        let scale_node = gb.constant(Array::vector(scale_row));
        let center_node = gb.constant(Array::vector(center_row));
        let scaled = gb.mul_row(tanh_means, scale_node);
        let means = gb.add_row(scaled, center_node);
        let log_stds = gb.slice_cols(head, k + k * d, k * d);
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let mean_c = gb.slice_cols(means, c * d, d);
            let std_c = gb.slice_cols(log_stds, c * d, d);
            comps.push(gb.diag_gauss_log_density_rows(thetas, mean_c, std_c));
        }
        let stacked = gb.concat_cols(&comps);
        let weighted = gb.add(stacked, logw);
        gb.logsumexp_rows(weighted)
    }

    /// NRE: raw scores [B] for paired constant rows.
    pub fn build_nre_scores(
        &self,
        gb: &mut GraphBuilder,
        w: NodeId,
        xs: &Array,
        thetas: &Array,
    ) -> NodeId {
        let b = xs.rows();
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let mut row = self.theta_standardizer.apply_row(thetas.row(i));
            row.extend(self.x_standardizer.apply_row(xs.row(i)));
            rows.push(row);
        }
        let input = gb.constant(Array::from_rows(&rows));
        let out = self.mlp().build_forward(gb, w, input);
        gb.reshape(out, &[b])
    }

    /// Graph: summed data log likelihood of a training batch, the
    /// quantity Σ_i log p(θ_i|x_i, w) (MDN) or the negative contrastive
    /// cross-entropy summed over pairs (NRE surrogate).
    pub fn build_batch_loglik_sum(
        &self,
        gb: &mut GraphBuilder,
        w: NodeId,
        batch: &TrainingBatch,
    ) -> NodeId {
        match self.kind {
            EstimatorKind::NpeMdn => {
                let rows = self.build_log_posterior_rows(gb, w, &batch.xs, &batch.thetas);
                gb.sum_all(rows)
            }
            EstimatorKind::Nre => {
                let marg = batch
                    .marginal_thetas
                    .as_ref()
                    .expect("NRE batch needs marginal pairs");
                let joint = self.build_nre_scores(gb, w, &batch.xs, &batch.thetas);
                let margs = self.build_nre_scores(gb, w, &batch.xs, marg);
                // log σ(s_joint) + log(1 − σ(s_marg)) = −softplus(−s) − softplus(s')
                let neg_joint = gb.neg(joint);
                let sp_joint = gb.softplus(neg_joint);
                let sp_marg = gb.softplus(margs);
                let total = gb.add(sp_joint, sp_marg);
                let sum = gb.sum_all(total);
                gb.neg(sum)
            }
        }
    }

    /// Graph: posterior density values f = p(θ_i|x_i, w) at measurement
    /// points (original units) -> [M]. The function outputs fed to the
    /// functional prior.
    pub fn build_density_vector(
        &self,
        gb: &mut GraphBuilder,
        w: NodeId,
        thetas: &Array,
        xs: &Array,
    ) -> NodeId {
        let rows = self.build_log_posterior_rows(gb, w, xs, thetas);
        gb.exp(rows)
    }
}

/// One mini-batch in original units; NRE batches carry the deranged
/// marginal pairing.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub xs: Array,
    pub thetas: Array,
    pub marginal_thetas: Option<Array>,
}

pub fn uniform_box_logpdf(theta: &[f64], low: &[f64], high: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&t, &lo), &hi) in theta.iter().zip(low).zip(high) {
        if t < lo || t > hi {
            return f64::NEG_INFINITY;
        }
        acc -= (hi - lo).ln();
    }
    acc
}

impl MdnParams {
    pub fn n_components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let d = self.dim;
        let mut terms = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let mut acc = self.log_weights[k] - 0.5 * d as f64 * LN_2PI;
            for j in 0..d {
                let ls = self.log_stds[k * d + j];
                let z = (theta[j] - self.means[k * d + j]) * (-ls).exp();
                acc += -ls - 0.5 * z * z;
            }
            terms.push(acc);
        }
        logsumexp(&terms)
    }

    pub fn density(&self, theta: &[f64]) -> f64 {
        self.log_density(theta).exp()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut comp = self.n_components() - 1;
        for k in 0..self.n_components() {
            acc += self.log_weights[k].exp();
            if u < acc {
                comp = k;
                break;
            }
        }
        let d = self.dim;
        (0..d)
            .map(|j| {
                self.means[comp * d + j]
                    + self.log_stds[comp * d + j].exp() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::simulators::SimulatorKind;

    fn two_moons_est(kind: EstimatorKind) -> (Simulator, PosteriorEstimator) {
        let sim = Simulator::new(SimulatorKind::TwoMoons);
        let bounds = ObsBounds { low: vec![-2.0, -2.0], high: vec![1.0, 2.0] };
        let est = match kind {
            EstimatorKind::NpeMdn => PosteriorEstimator::mdn(&sim, &bounds),
            EstimatorKind::Nre => PosteriorEstimator::nre(&sim, &bounds),
        };
        (sim, est)
    }

    #[test]
    fn weight_flattening_roundtrips() {
        let (_, est) = two_moons_est(EstimatorKind::NpeMdn);
        let spec = est.mlp();
        let mut rng = rng_from_seed(0);
        let w = spec.init_weights(&mut rng);
        assert_eq!(w.len(), spec.n_weights());
    }

    #[test]
    fn zeroed_final_layer_gives_standard_normal() {
        // Zero head: uniform mixture of identical unit Gaussians at the
        // box center (0,0): log density at 0 is −ln(2π).
        let (_, est) = two_moons_est(EstimatorKind::NpeMdn);
        let w = vec![0.0; est.n_weights()];
        let lp = est.log_posterior(&[0.0, 0.0], &[0.3, 0.1], &w).unwrap();
        assert!((lp - (-LN_2PI)).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn nre_zero_weights_returns_prior() {
        let (sim, est) = two_moons_est(EstimatorKind::Nre);
        let w = vec![0.0; est.n_weights()];
        let lp = est.log_posterior(&[0.2, -0.4], &[0.3, 0.1], &w).unwrap();
        assert!((lp - sim.marginal_prior_logpdf(&[0.2, -0.4])).abs() < 1e-12);
        // density = 1/4 inside the box
        let dens = est.posterior_density(&[0.2, -0.4], &[0.3, 0.1], &w).unwrap();
        assert!((dens - 0.25).abs() < 1e-12);
    }

    #[test]
    fn density_is_exp_of_log_density() {
        let (_, est) = two_moons_est(EstimatorKind::NpeMdn);
        let mut rng = rng_from_seed(1);
        let w = est.mlp().init_weights(&mut rng);
        let lp = est.log_posterior(&[0.1, 0.2], &[0.0, 0.0], &w).unwrap();
        let d = est.posterior_density(&[0.1, 0.2], &[0.0, 0.0], &w).unwrap();
        assert!((d - lp.exp()).abs() <= f64::EPSILON * d.abs().max(1.0));
    }

    #[test]
    fn density_non_negative_for_random_inputs() {
        let (sim, est) = two_moons_est(EstimatorKind::NpeMdn);
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let w: Vec<f64> = (0..est.n_weights())
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3)
                .collect();
            let th = sim.sample_prior(1, &mut rng);
            let x = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let d = est.posterior_density(th.row(0), &x, &w).unwrap();
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn standardizer_roundtrip_is_identity() {
        let s = Standardizer::from_uniform_box(&[-3.0, 0.5], &[3.0, 2.0]);
        let row = vec![1.25, 0.75];
        let back = s.invert_row(&s.apply_row(&row));
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_log_posterior_matches_plain_path() {
        use std::collections::HashMap;
        for kind in [EstimatorKind::NpeMdn, EstimatorKind::Nre] {
            let (sim, est) = two_moons_est(kind);
            let mut rng = rng_from_seed(3);
            let mut w = est.mlp().init_weights(&mut rng);
            for v in w.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            let thetas = sim.sample_prior(5, &mut rng);
            let xs = Array::matrix(
                5,
                2,
                (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let mut gb = GraphBuilder::new();
            let wn = gb.leaf("w", &[w.len()]);
            let rows = est.build_log_posterior_rows(&mut gb, wn, &xs, &thetas);
            let g = gb.finish(rows);
            let mut inputs = HashMap::new();
            inputs.insert("w".to_string(), Array::vector(w.clone()));
            let eval = g.forward(&inputs).unwrap();
            let out = g.output_value(&eval);
            for i in 0..5 {
                let lp = est.log_posterior(thetas.row(i), xs.row(i), &w).unwrap();
                assert!(
                    (out.data()[i] - lp).abs() < 1e-10,
                    "row {i}: graph {} plain {lp}",
                    out.data()[i]
                );
            }
        }
    }

    #[test]
    fn mdn_sampling_matches_density_moments() {
        let params = MdnParams {
            log_weights: vec![(0.5f64).ln(), (0.5f64).ln()],
            means: vec![-1.0, 0.0, 1.0, 0.0],
            log_stds: vec![0.0, 0.0, 0.0, 0.0],
            dim: 2,
        };
        let mut rng = rng_from_seed(9);
        let n = 20_000;
        let mut m0 = 0.0;
        for _ in 0..n {
            m0 += params.sample(&mut rng)[0];
        }
        m0 /= n as f64;
        // mixture mean of first coordinate is 0, std of the mean ~ 1.4/√n
        assert!(m0.abs() < 4.0 * 1.5 / (n as f64).sqrt(), "{m0}");
    }
}
