//! Calibration and quality diagnostics: highest-posterior-density
//! credibility levels, expected coverage curves and their AUC, nominal
//! log posterior density, and the aleatoric/epistemic decomposition of
//! predictive uncertainty.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbiError};
use crate::estimators::{EstimatorKind, MdnParams, PosteriorEstimator};
use crate::numcore::{logsumexp, Array};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::simulators::Simulator;

pub const DEFAULT_GRID_RESOLUTION: usize = 200;
pub const DEFAULT_SAMPLE_COUNT: usize = 2000;
pub const DEFAULT_ALPHA_POINTS: usize = 101;
/// Relative tolerance for density ties in the credibility rank statistic.
const TIE_REL_TOL: f64 = 1e-9;

/// Tensor-product grid of cell centers over a box; dimensions ≤ 2.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(low: &[f64], high: &[f64], resolution: usize) -> Result<GridSpec> {
        if low.len() > 2 || low.is_empty() {
            return Err(SbiError::InvalidArgument(format!(
                "grid quadrature supports 1 or 2 dimensions, got {}",
                low.len()
            )));
        }
        Ok(GridSpec {
            low: low.to_vec(),
            high: high.to_vec(),
            resolution,
        })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn n_cells(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| (h - l) / self.resolution as f64)
            .product()
    }

    /// Cell-center coordinates along each axis.
    pub fn axes(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|d| {
                let w = (self.high[d] - self.low[d]) / self.resolution as f64;
                (0..self.resolution)
                    .map(|i| self.low[d] + (i as f64 + 0.5) * w)
                    .collect()
            })
            .collect()
    }

    /// All cell centers as rows, axis 0 slowest.
    pub fn cells(&self) -> Array {
        let axes = self.axes();
        let mut rows = Vec::with_capacity(self.n_cells());
        match self.dim() {
            1 => {
                for &a in &axes[0] {
                    rows.push(vec![a]);
                }
            }
            _ => {
                for &a in &axes[0] {
                    for &b in &axes[1] {
                        rows.push(vec![a, b]);
                    }
                }
            }
        }
        Array::from_rows(&rows)
    }
}

/// Anything that can play the role of an amortized posterior: a trained
/// estimator (possibly averaged over weight samples), the prior itself,
/// or an analytic reference.
pub trait DensityModel: Sync {
    fn box_low(&self) -> &[f64];
    fn box_high(&self) -> &[f64];
    fn log_density(&self, theta: &[f64], x: &[f64]) -> Result<f64>;

    /// Density at every grid cell center; override when a batched or
    /// structured evaluation exists.
    fn grid_density(&self, x: &[f64], grid: &GridSpec) -> Result<Vec<f64>> {
        let cells = grid.cells();
        (0..cells.rows())
            .map(|i| Ok(self.log_density(cells.row(i), x)?.exp()))
            .collect()
    }

    /// Posterior draw, where supported (needed by the sample-based
    /// credibility method).
    fn sample(&self, _x: &[f64], _rng: &mut Rng) -> Result<Vec<f64>> {
        Err(SbiError::InvalidArgument(
            "this density model does not support sampling".into(),
        ))
    }

    fn theta_dim(&self) -> usize {
        self.box_low().len()
    }
}

/// The prior density presented as a posterior; the Prop.-1 reference
/// point for calibration checks.
#[derive(Debug, Clone)]
pub struct PriorAsPosterior {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    log_dens: f64,
}

impl PriorAsPosterior {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> PriorAsPosterior {
        let vol: f64 = low.iter().zip(&high).map(|(l, h)| h - l).product();
        PriorAsPosterior {
            low,
            high,
            log_dens: -vol.ln(),
        }
    }

    pub fn for_simulator(sim: &Simulator) -> PriorAsPosterior {
        let (low, high) = sim.marginal_box();
        PriorAsPosterior::new(low, high)
    }
}

impl DensityModel for PriorAsPosterior {
    fn box_low(&self) -> &[f64] {
        &self.low
    }

    fn box_high(&self) -> &[f64] {
        &self.high
    }

    fn log_density(&self, theta: &[f64], _x: &[f64]) -> Result<f64> {
        let inside = theta
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(&t, (&l, &h))| t >= l && t <= h);
        Ok(if inside { self.log_dens } else { f64::NEG_INFINITY })
    }

    fn grid_density(&self, _x: &[f64], grid: &GridSpec) -> Result<Vec<f64>> {
        Ok(vec![self.log_dens.exp(); grid.n_cells()])
    }

    fn sample(&self, _x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self
            .low
            .iter()
            .zip(&self.high)
            .map(|(&l, &h)| rng.gen_range(l..h))
            .collect())
    }
}

/// A trained estimator averaged over one or more weight sets (Bayesian
/// model average; a single set is the point-estimate case).
pub struct EstimatorPosterior {
    pub estimator: PosteriorEstimator,
    pub weight_sets: Vec<Vec<f64>>,
}

impl EstimatorPosterior {
    pub fn new(estimator: PosteriorEstimator, weight_sets: Vec<Vec<f64>>) -> EstimatorPosterior {
        assert!(!weight_sets.is_empty());
        EstimatorPosterior {
            estimator,
            weight_sets,
        }
    }
}

/// Mixture density over a tensor grid via per-axis 1D component
/// densities and outer products — avoids one exp per (cell, component).
pub fn mdn_grid_density(params: &MdnParams, axes: &[Vec<f64>]) -> Vec<f64> {
    const LN_2PI: f64 = 1.8378770664093453;
    let d = params.dim;
    debug_assert_eq!(axes.len(), d);
    let n: usize = axes.iter().map(|a| a.len()).product();
    let mut out = vec![0.0; n];
    for k in 0..params.n_components() {
        let wk = params.log_weights[k].exp();
        let axis_dens: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let mu = params.means[k * d + j];
                let ls = params.log_stds[k * d + j];
                let inv = (-ls).exp();
                axes[j]
                    .iter()
                    .map(|&g| {
                        let z = (g - mu) * inv;
                        (-0.5 * z * z - ls - 0.5 * LN_2PI).exp()
                    })
                    .collect()
            })
            .collect();
        match d {
            1 => {
                for (o, v) in out.iter_mut().zip(&axis_dens[0]) {
                    *o += wk * v;
                }
            }
            _ => {
                let nb = axis_dens[1].len();
                for (ia, &va) in axis_dens[0].iter().enumerate() {
                    let base = ia * nb;
                    for (ib, &vb) in axis_dens[1].iter().enumerate() {
                        out[base + ib] += wk * va * vb;
                    }
                }
            }
        }
    }
    out
}

impl DensityModel for EstimatorPosterior {
    fn box_low(&self) -> &[f64] {
        &self.estimator.box_low
    }

    fn box_high(&self) -> &[f64] {
        &self.estimator.box_high
    }

    fn log_density(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let terms: Result<Vec<f64>> = self
            .weight_sets
            .iter()
            .map(|w| self.estimator.log_posterior(theta, x, w))
            .collect();
        Ok(logsumexp(&terms?) - (self.weight_sets.len() as f64).ln())
    }

    fn grid_density(&self, x: &[f64], grid: &GridSpec) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; grid.n_cells()];
        match self.estimator.kind {
            EstimatorKind::NpeMdn => {
                let axes = grid.axes();
                for w in &self.weight_sets {
                    let params = self.estimator.mdn_params(w, x)?;
                    for (a, v) in acc.iter_mut().zip(mdn_grid_density(&params, &axes)) {
                        *a += v;
                    }
                }
            }
            EstimatorKind::Nre => {
                let cells = grid.cells();
                let xs = Array::from_rows(&vec![x.to_vec(); cells.rows()]);
                for w in &self.weight_sets {
                    let lp = self.estimator.log_posterior_batch(w, &cells, &xs)?;
                    for (a, v) in acc.iter_mut().zip(lp) {
                        *a += v.exp();
                    }
                }
            }
        }
        let m = self.weight_sets.len() as f64;
        for a in acc.iter_mut() {
            *a /= m;
        }
        Ok(acc)
    }

    fn sample(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if self.estimator.kind != EstimatorKind::NpeMdn {
            return Err(SbiError::InvalidArgument(
                "sampling is only supported for the mixture-density estimator".into(),
            ));
        }
        let idx = rng.gen_range(0..self.weight_sets.len());
        let params = self.estimator.mdn_params(&self.weight_sets[idx], x)?;
        Ok(params.sample(rng))
    }
}

/// The exact posterior of the Gaussian-linear oracle, as a model.
pub struct AnalyticPosterior {
    pub sim: Simulator,
}

impl DensityModel for AnalyticPosterior {
    fn box_low(&self) -> &[f64] {
        &self.sim.prior_low
    }

    fn box_high(&self) -> &[f64] {
        &self.sim.prior_high
    }

    fn log_density(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.sim.analytic_posterior(x)?.log_density(theta))
    }

    fn sample(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.sim.analytic_posterior(x)?.sample(rng))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CredibilityMethod {
    /// Normalized mass of grid cells whose density exceeds the density
    /// at θ*; ties split by a seeded uniform (rank-randomization), which
    /// makes constant densities exactly calibrated.
    Grid { resolution: usize },
    /// Fraction of posterior draws whose density exceeds the density at
    /// θ*.
    Sample { n_samples: usize },
}

impl Default for CredibilityMethod {
    fn default() -> Self {
        CredibilityMethod::Grid {
            resolution: DEFAULT_GRID_RESOLUTION,
        }
    }
}

fn randomized_rank_mass(weights: &[f64], reference: f64, u: f64) -> Result<f64> {
    let mut above = 0.0;
    let mut tied = 0.0;
    let mut total = 0.0;
    for &w in weights {
        total += w;
        let scale = w.abs().max(reference.abs());
        if (w - reference).abs() <= TIE_REL_TOL * scale {
            tied += w;
        } else if w > reference {
            above += w;
        }
    }
    if total <= 0.0 {
        return Err(SbiError::InvalidArgument(
            "credibility grid carries zero mass".into(),
        ));
    }
    Ok((above + u * tied) / total)
}

/// HPD credibility level of θ* under the model's posterior for x: the
/// smallest α whose highest-density region contains θ*.
pub fn hpd_credibility(
    model: &dyn DensityModel,
    theta_star: &[f64],
    x: &[f64],
    method: CredibilityMethod,
    rng: &mut Rng,
) -> Result<f64> {
    let d_star = model.log_density(theta_star, x)?.exp();
    match method {
        CredibilityMethod::Grid { resolution } => {
            let grid = GridSpec::new(model.box_low(), model.box_high(), resolution)?;
            let dens = model.grid_density(x, &grid)?;
            if dens.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(SbiError::NonFinite {
                    context: "credibility grid density".into(),
                });
            }
            let u: f64 = rng.gen_range(0.0..1.0);
            randomized_rank_mass(&dens, d_star, u)
        }
        CredibilityMethod::Sample { n_samples } => {
            let mut above = 0usize;
            let mut tied = 0usize;
            for _ in 0..n_samples {
                let draw = model.sample(x, rng)?;
                let d = model.log_density(&draw, x)?.exp();
                let scale = d.abs().max(d_star.abs());
                if (d - d_star).abs() <= TIE_REL_TOL * scale {
                    tied += 1;
                } else if d > d_star {
                    above += 1;
                }
            }
            let u: f64 = rng.gen_range(0.0..1.0);
            Ok((above as f64 + u * tied as f64) / n_samples as f64)
        }
    }
}

/// EC(α) over a grid of α values, with its signed area to the diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub alphas: Vec<f64>,
    pub ec: Vec<f64>,
    pub auc: f64,
    pub n_test: usize,
}

impl CoverageCurve {
    pub fn max_deviation(&self) -> f64 {
        self.alphas
            .iter()
            .zip(&self.ec)
            .map(|(a, e)| (e - a).abs())
            .fold(0.0, f64::max)
    }
}

pub fn default_alphas() -> Vec<f64> {
    (0..DEFAULT_ALPHA_POINTS)
        .map(|i| i as f64 / (DEFAULT_ALPHA_POINTS - 1) as f64)
        .collect()
}

/// 99% binomial band half-width for an empirical CDF value at level α.
pub fn binomial_band_99(alpha: f64, n: usize) -> f64 {
    2.5758 * (alpha * (1.0 - alpha) / n as f64).sqrt()
}

/// Expected coverage of the model over paired test rows: the empirical
/// CDF of per-pair credibility levels, and its area above the diagonal.
pub fn expected_coverage(
    model: &dyn DensityModel,
    thetas: &Array,
    xs: &Array,
    alphas: &[f64],
    method: CredibilityMethod,
    seed: u64,
) -> Result<CoverageCurve> {
    let n = thetas.rows();
    if n == 0 {
        return Err(SbiError::InvalidArgument("empty test set".into()));
    }
    let creds: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            hpd_credibility(model, thetas.row(i), xs.row(i), method, &mut rng)
        })
        .collect();
    let creds = creds?;
    let ec: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                // boundary convention: the level-0 HPD region is empty
                0.0
            } else {
                creds.iter().filter(|&&c| c <= a).count() as f64 / n as f64
            }
        })
        .collect();
    let mut auc = 0.0;
    for i in 1..alphas.len() {
        let da = alphas[i] - alphas[i - 1];
        auc += 0.5 * ((ec[i] - alphas[i]) + (ec[i - 1] - alphas[i - 1])) * da;
    }
    Ok(CoverageCurve {
        alphas: alphas.to_vec(),
        ec,
        auc,
        n_test: n,
    })
}

/// Mean log posterior density at the data-generating parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalLogProb {
    /// Mean over the finite contributions.
    pub mean: f64,
    /// Test pairs whose nominal parameter received zero density.
    pub n_neg_inf: usize,
    pub n_test: usize,
}

pub fn nominal_log_prob(
    model: &dyn DensityModel,
    thetas: &Array,
    xs: &Array,
) -> Result<NominalLogProb> {
    let n = thetas.rows();
    if n == 0 {
        return Err(SbiError::InvalidArgument("empty test set".into()));
    }
    let vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| model.log_density(thetas.row(i), xs.row(i)))
        .collect();
    let vals = vals?;
    let mut acc = 0.0;
    let mut finite = 0usize;
    let mut neg_inf = 0usize;
    for v in vals {
        if v == f64::NEG_INFINITY {
            neg_inf += 1;
        } else if v.is_finite() {
            acc += v;
            finite += 1;
        } else {
            return Err(SbiError::NonFinite {
                context: "nominal log probability".into(),
            });
        }
    }
    Ok(NominalLogProb {
        mean: if finite > 0 {
            acc / finite as f64
        } else {
            f64::NEG_INFINITY
        },
        n_neg_inf: neg_inf,
        n_test: n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub predictive_entropy: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub n_test: usize,
}

fn grid_entropy(dens: &[f64], cell_volume: f64) -> Result<f64> {
    let total: f64 = dens.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SbiError::NonFinite {
            context: "grid entropy normalization".into(),
        });
    }
    let mut h = 0.0;
    for &v in dens {
        if v > 0.0 {
            let mass = v / total;
            h -= mass * (mass / cell_volume).ln();
        }
    }
    Ok(h)
}

/// Decompose the entropy-decomposition members over one grid: the
/// predictive entropy of the average density, the mean member entropy
/// (aleatoric), and their gap (epistemic / mutual information).
pub fn entropy_decomposition_from_grids(
    member_grids: &[Vec<f64>],
    cell_volume: f64,
) -> Result<(f64, f64, f64)> {
    let m = member_grids.len();
    assert!(m > 0);
    let n = member_grids[0].len();
    // the average density goes through the exact same entropy routine as
    // the members; identical members shortcut the averaging so their
    // epistemic term is 0 exactly, not merely to rounding
    let avg = if member_grids.iter().all(|g| g == &member_grids[0]) {
        member_grids[0].clone()
    } else {
        let mut avg = vec![0.0; n];
        for g in member_grids {
            for (a, &v) in avg.iter_mut().zip(g) {
                *a += v;
            }
        }
        for a in avg.iter_mut() {
            *a /= m as f64;
        }
        avg
    };
    let predictive = grid_entropy(&avg, cell_volume)?;
    let mut aleatoric = 0.0;
    for g in member_grids {
        aleatoric += grid_entropy(g, cell_volume)?;
    }
    aleatoric /= m as f64;
    Ok((predictive, aleatoric, predictive - aleatoric))
}

/// Average predictive/aleatoric/epistemic entropy over test
/// observations, with member densities evaluated on the prior-box grid.
pub fn decompose_uncertainty(
    est: &PosteriorEstimator,
    weight_sets: &[Vec<f64>],
    xs: &Array,
    resolution: usize,
) -> Result<UncertaintyReport> {
    if weight_sets.is_empty() || xs.rows() == 0 {
        return Err(SbiError::InvalidArgument(
            "uncertainty decomposition needs weight sets and observations".into(),
        ));
    }
    let grid = GridSpec::new(&est.box_low, &est.box_high, resolution)?;
    let vol = grid.cell_volume();
    let per_x: Result<Vec<(f64, f64, f64)>> = (0..xs.rows())
        .into_par_iter()
        .map(|i| {
            let x = xs.row(i);
            let members: Result<Vec<Vec<f64>>> = weight_sets
                .iter()
                .map(|w| {
                    let single = EstimatorPosterior::new(est.clone(), vec![w.clone()]);
                    single.grid_density(x, &grid)
                })
                .collect();
            entropy_decomposition_from_grids(&members?, vol)
        })
        .collect();
    let per_x = per_x?;
    let n = per_x.len() as f64;
    let (mut p, mut a, mut e) = (0.0, 0.0, 0.0);
    for (pp, aa, ee) in &per_x {
        p += pp;
        a += aa;
        e += ee;
    }
    Ok(UncertaintyReport {
        predictive_entropy: p / n,
        aleatoric: a / n,
        epistemic: e / n,
        n_test: per_x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::SimulatorKind;

    fn oracle() -> AnalyticPosterior {
        AnalyticPosterior {
            sim: Simulator::new(SimulatorKind::GaussianLinear),
        }
    }

    #[test]
    fn mode_has_zero_credibility() {
        let model = oracle();
        let mut rng = rng_from_seed(0);
        let c = hpd_credibility(
            &model,
            &[0.0, 0.0],
            &[0.0, 0.0],
            CredibilityMethod::default(),
            &mut rng,
        )
        .unwrap();
        assert!(c < 5e-4, "credibility at the mode: {c}");
    }

    #[test]
    fn gaussian_credibility_matches_chi_square() {
        // θ* at Mahalanobis radius r: credibility = 1 − exp(−r²/2);
        // r = 2.4477 → 0.95 (x=0 keeps truncation negligible: box edge is
        // 4σ away)
        let model = oracle();
        let mut rng = rng_from_seed(1);
        let r = 2.4477f64;
        let step = 0.25 * r / 2f64.sqrt();
        let c = hpd_credibility(
            &model,
            &[step, step],
            &[0.0, 0.0],
            CredibilityMethod::Grid { resolution: 400 },
            &mut rng,
        )
        .unwrap();
        assert!((c - 0.95).abs() < 0.01, "credibility {c}");
        let r1 = 1.1774f64; // 50% contour
        let step1 = 0.25 * r1 / 2f64.sqrt();
        let c1 = hpd_credibility(
            &model,
            &[step1, step1],
            &[0.0, 0.0],
            CredibilityMethod::Grid { resolution: 400 },
            &mut rng,
        )
        .unwrap();
        assert!((c1 - 0.5).abs() < 0.01, "credibility {c1}");
    }

    #[test]
    fn grid_and_sample_methods_agree_on_oracle() {
        let model = oracle();
        let mut rng = rng_from_seed(2);
        for x in [[0.1, -0.3], [0.6, 0.2]] {
            let theta = [x[0] + 0.2, x[1] - 0.15];
            let g = hpd_credibility(
                &model,
                &theta,
                &x,
                CredibilityMethod::default(),
                &mut rng,
            )
            .unwrap();
            let s = hpd_credibility(
                &model,
                &theta,
                &x,
                CredibilityMethod::Sample { n_samples: 4000 },
                &mut rng,
            )
            .unwrap();
            assert!((g - s).abs() < 0.02, "grid {g} sample {s}");
        }
    }

    #[test]
    fn credibility_invariant_under_monotone_density_transform() {
        // rank statistic: scaling all weights leaves the mass unchanged
        let weights = vec![0.1, 0.4, 0.2, 0.3];
        let a = randomized_rank_mass(&weights, 0.2, 0.5).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| w * 7.5).collect();
        let b = randomized_rank_mass(&scaled, 1.5, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prior_as_posterior_is_exactly_calibrated() {
        let sim = Simulator::new(SimulatorKind::TwoMoons);
        let model = PriorAsPosterior::for_simulator(&sim);
        let data = sim.generate_dataset(300, 40).unwrap();
        let curve = expected_coverage(
            &model,
            &data.thetas,
            &data.xs,
            &default_alphas(),
            CredibilityMethod::default(),
            40,
        )
        .unwrap();
        assert!(curve.auc.abs() < 0.05, "auc {}", curve.auc);
        for (a, e) in curve.alphas.iter().zip(&curve.ec) {
            let band = binomial_band_99(*a, 300).max(1.0 / 300.0);
            assert!((e - a).abs() <= band + 1e-12, "EC({a}) = {e}");
        }
        assert_eq!(curve.ec[0], 0.0);
        assert_eq!(*curve.ec.last().unwrap(), 1.0);
    }

    struct Overconfident;

    impl DensityModel for Overconfident {
        fn box_low(&self) -> &[f64] {
            &[-1.0, -1.0]
        }
        fn box_high(&self) -> &[f64] {
            &[1.0, 1.0]
        }
        fn log_density(&self, theta: &[f64], _x: &[f64]) -> Result<f64> {
            // tiny σ at a fixed wrong location
            let (m, s) = (0.7, 1e-3);
            let z0 = (theta[0] - m) / s;
            let z1 = (theta[1] - m) / s;
            Ok(-0.5 * (z0 * z0 + z1 * z1) - 2.0 * s.ln() - 1.8378770664093453)
        }
    }

    #[test]
    fn overconfident_model_has_minimal_auc() {
        let sim = Simulator::new(SimulatorKind::GaussianLinear);
        let data = sim.generate_dataset(100, 8).unwrap();
        let curve = expected_coverage(
            &Overconfident,
            &data.thetas,
            &data.xs,
            &default_alphas(),
            CredibilityMethod::default(),
            8,
        )
        .unwrap();
        assert!(curve.auc < -0.45, "auc {}", curve.auc);
    }

    #[test]
    fn nominal_log_prob_of_prior_is_log_volume() {
        let sim = Simulator::new(SimulatorKind::TwoMoons);
        let model = PriorAsPosterior::for_simulator(&sim);
        let data = sim.generate_dataset(50, 9).unwrap();
        let nlp = nominal_log_prob(&model, &data.thetas, &data.xs).unwrap();
        assert!((nlp.mean - (0.25f64).ln()).abs() < 1e-12);
        assert_eq!(nlp.n_neg_inf, 0);
        // permutation invariance
        let mut rows_t: Vec<Vec<f64>> =
            (0..50).map(|i| data.thetas.row(i).to_vec()).collect();
        let mut rows_x: Vec<Vec<f64>> = (0..50).map(|i| data.xs.row(i).to_vec()).collect();
        rows_t.reverse();
        rows_x.reverse();
        let nlp2 = nominal_log_prob(
            &model,
            &Array::from_rows(&rows_t),
            &Array::from_rows(&rows_x),
        )
        .unwrap();
        assert_eq!(nlp.mean, nlp2.mean);
    }

    #[test]
    fn analytic_posterior_beats_prior_nominal_log_prob() {
        let sim = Simulator::new(SimulatorKind::GaussianLinear);
        let data = sim.generate_dataset(200, 10).unwrap();
        let post = nominal_log_prob(&oracle(), &data.thetas, &data.xs).unwrap();
        let prior = nominal_log_prob(
            &PriorAsPosterior::for_simulator(&sim),
            &data.thetas,
            &data.xs,
        )
        .unwrap();
        assert!(post.mean > prior.mean, "{} vs {}", post.mean, prior.mean);
    }

    #[test]
    fn analytic_posterior_is_calibrated() {
        let sim = Simulator::new(SimulatorKind::GaussianLinear);
        let data = sim.generate_dataset(500, 12).unwrap();
        let curve = expected_coverage(
            &oracle(),
            &data.thetas,
            &data.xs,
            &default_alphas(),
            CredibilityMethod::default(),
            12,
        )
        .unwrap();
        assert!(curve.auc.abs() < 0.03, "auc {}", curve.auc);
    }

    #[test]
    fn identical_members_have_zero_epistemic() {
        let g = vec![0.3, 0.9, 1.4, 0.1];
        let (p, a, e) = entropy_decomposition_from_grids(&[g.clone(), g.clone(), g], 0.25)
            .unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(p, a);
    }

    #[test]
    fn separated_mixture_epistemic_is_ln_two() {
        // two unit Gaussians ±5 apart: predictive entropy ≈ member + ln 2
        let grid = GridSpec::new(&[-12.0], &[12.0], 2400).unwrap();
        let axes = grid.axes();
        let member = |mu: f64| -> Vec<f64> {
            axes[0]
                .iter()
                .map(|&t| {
                    let z = t - mu;
                    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
                })
                .collect()
        };
        let (_, _, e) =
            entropy_decomposition_from_grids(&[member(-5.0), member(5.0)], grid.cell_volume())
                .unwrap();
        assert!((e - std::f64::consts::LN_2).abs() < 1e-3, "epistemic {e}");
    }

    #[test]
    fn single_weight_set_gives_exactly_zero_epistemic() {
        let sim = Simulator::new(SimulatorKind::TwoMoons);
        let bounds = crate::simulators::ObsBounds {
            low: vec![-2.0, -2.0],
            high: vec![1.5, 2.0],
        };
        let est = PosteriorEstimator::mdn(&sim, &bounds);
        let mut rng = rng_from_seed(21);
        let mut w = est.mlp().init_weights(&mut rng);
        for v in w.iter_mut() {
            *v += 0.1;
        }
        let xs = Array::from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.5]]);
        let rep = decompose_uncertainty(&est, &[w], &xs, 100).unwrap();
        assert_eq!(rep.epistemic, 0.0);
        assert!(rep.predictive_entropy.is_finite());
    }
}
