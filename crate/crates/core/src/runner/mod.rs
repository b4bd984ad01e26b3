//! Experiment orchestration: JSON configs, on-disk artifact layout, and
//! the generate / tune-prior / train / evaluate / sweep commands behind
//! the CLI.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bnn::{
    bma_weight_sets, train_ensemble, train_vi, ViConfig, DEFAULT_BMA_SAMPLES,
    DEFAULT_ENSEMBLE_SIZE,
};
use crate::bnn::WeightDistribution;
use crate::diagnostics::{
    decompose_uncertainty, default_alphas, expected_coverage, nominal_log_prob, CoverageCurve,
    CredibilityMethod, DensityModel, EstimatorPosterior, GridSpec, UncertaintyReport,
    DEFAULT_GRID_RESOLUTION,
};
use crate::error::{Result, SbiError};
use crate::estimators::train::{train_map, TrainConfig, DEFAULT_EPOCHS, DEFAULT_LR};
use crate::estimators::{EstimatorKind, PosteriorEstimator};
use crate::functional_prior::{
    tune_prior, GpFunctionalPrior, SsgeConfig, TuneConfig, TuneReport, DEFAULT_MEASUREMENT_SIZE,
    DEFAULT_N_FUNC, DEFAULT_TUNE_ITERS, DEFAULT_TUNE_LR,
};
use crate::rng::seed_for_label;
use crate::simulators::dataset::{format_float, Dataset};
use crate::simulators::{ObsBounds, Simulator};

pub const DEFAULT_N_TEST: usize = 500;
pub const ENV_DATA_DIR: &str = "SBI_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "sbi-data";

fn code_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Map,
    Ensemble,
    Bnn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Map => "map",
            Method::Ensemble => "ensemble",
            Method::Bnn => "bnn",
        }
    }
}

fn default_temperature() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_mc_samples() -> usize {
    DEFAULT_BMA_SAMPLES
}
fn default_n_test() -> usize {
    DEFAULT_N_TEST
}
fn default_tune_iters() -> usize {
    DEFAULT_TUNE_ITERS
}
fn default_n_func() -> usize {
    DEFAULT_N_FUNC
}
fn default_measurement_size() -> usize {
    DEFAULT_MEASUREMENT_SIZE
}
fn default_tune_lr() -> f64 {
    DEFAULT_TUNE_LR
}
fn default_budgets() -> Vec<usize> {
    vec![32, 128, 512, 1024]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Hyperparameters of the functional-prior tuning stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningBlock {
    #[serde(default = "default_tune_iters")]
    pub iters: usize,
    #[serde(default = "default_n_func")]
    pub n_func: usize,
    #[serde(default = "default_measurement_size")]
    pub measurement_size: usize,
    #[serde(default = "default_tune_lr")]
    pub lr: f64,
    #[serde(default)]
    pub ssge: Option<SsgeConfig>,
}

impl Default for TuningBlock {
    fn default() -> Self {
        TuningBlock {
            iters: DEFAULT_TUNE_ITERS,
            n_func: DEFAULT_N_FUNC,
            measurement_size: DEFAULT_MEASUREMENT_SIZE,
            lr: DEFAULT_TUNE_LR,
            ssge: None,
        }
    }
}

/// One experiment cell: everything needed to generate data, train one
/// model and evaluate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulator: String,
    pub estimator: EstimatorKind,
    pub method: Method,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub budget: usize,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Weight draws in the Bayesian model average.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub prior_path: Option<PathBuf>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub tuning: Option<TuningBlock>,
    /// Artifact root; falls back to $SBI_DATA_DIR, then ./sbi-data.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| SbiError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(SbiError::Config("budget must be ≥ 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(SbiError::Config("mc_samples must be ≥ 1".into()));
        }
        if self.n_test == 0 {
            return Err(SbiError::Config("n_test must be ≥ 1".into()));
        }
        Simulator::by_name(&self.simulator)?;
        Ok(())
    }

    pub fn estimator_name(&self) -> &'static str {
        match self.estimator {
            EstimatorKind::NpeMdn => "npe-mdn",
            EstimatorKind::Nre => "nre",
        }
    }

    /// Stable file tag for this cell.
    pub fn tag(&self) -> String {
        format!(
            "{}_{}_{}_T{}_b{}_s{}",
            self.simulator,
            self.estimator_name(),
            self.method.name(),
            self.temperature,
            self.budget,
            self.seed
        )
    }
}

/// Artifact layout under one root directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn resolve(out_dir: &Option<PathBuf>) -> Paths {
        let root = out_dir.clone().unwrap_or_else(|| {
            std::env::var_os(ENV_DATA_DIR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
        });
        Paths { root }
    }

    fn sub(&self, dir: &str, file: String) -> PathBuf {
        self.root.join(dir).join(file)
    }

    pub fn train_dataset(&self, sim: &str, budget: usize, seed: u64) -> PathBuf {
        self.sub("datasets", format!("{sim}_train_b{budget}_s{seed}.csv"))
    }

    pub fn test_dataset(&self, sim: &str, n_test: usize, seed: u64) -> PathBuf {
        self.sub("datasets", format!("{sim}_test_n{n_test}_s{seed}.csv"))
    }

    pub fn bounds(&self, sim: &str) -> PathBuf {
        self.sub("bounds", format!("{sim}.json"))
    }

    pub fn prior(&self, sim: &str, est: &str) -> PathBuf {
        self.sub("priors", format!("{sim}_{est}.json"))
    }

    pub fn prior_coverage(&self, sim: &str, est: &str) -> PathBuf {
        self.sub("priors", format!("{sim}_{est}_coverage.csv"))
    }

    pub fn model(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.sub("models", format!("model_{}.json", cfg.tag()))
    }

    pub fn coverage(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.sub("results", format!("coverage_{}.csv", cfg.tag()))
    }

    pub fn result_row(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.sub("results", format!("result_{}.csv", cfg.tag()))
    }

    pub fn uncertainty(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.sub("results", format!("uncertainty_{}.json", cfg.tag()))
    }

    pub fn posterior_grid(&self, cfg: &ExperimentConfig, x_index: usize) -> PathBuf {
        self.sub("results", format!("postgrid_{}_x{}.csv", cfg.tag(), x_index))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.sub("results", "results.csv".into())
    }

    pub fn medians_csv(&self) -> PathBuf {
        self.sub("results", "medians.csv".into())
    }

    pub fn sweep_cell(&self, hash: &str) -> PathBuf {
        self.sub("results/cells", format!("{hash}.json"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(SbiError::AlreadyExists(path.display().to_string()));
    }
    ensure_parent(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Observation support bounds, computed from pilot draws once per
/// simulator and cached on disk.
pub fn obs_bounds(paths: &Paths, sim: &Simulator) -> Result<ObsBounds> {
    let cache = paths.bounds(sim.name());
    if cache.exists() {
        return read_json(&cache);
    }
    let bounds = sim.pilot_obs_bounds(sim.default_pilot_draws())?;
    write_json(&cache, &bounds)?;
    Ok(bounds)
}

pub fn build_estimator(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    bounds: &ObsBounds,
) -> PosteriorEstimator {
    match cfg.estimator {
        EstimatorKind::NpeMdn => PosteriorEstimator::mdn(sim, bounds),
        EstimatorKind::Nre => PosteriorEstimator::nre(sim, bounds),
    }
}

/// Tuned functional prior artifact: the GP, the tuned weight prior, and
/// the config that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorArtifact {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub gp: GpFunctionalPrior,
    pub phi: WeightDistribution,
    pub report: TuneReport,
    pub prior_coverage_auc: f64,
}

/// Trained model artifact; `weight_sets` holds the MAP weights, the
/// ensemble members, or is empty for BNNs (whose weight distribution is
/// stored and sampled at evaluation time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub weight_sets: Vec<Vec<f64>>,
    pub weight_distribution: Option<WeightDistribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub simulator: String,
    pub estimator: String,
    pub method: String,
    pub temperature: f64,
    pub budget: usize,
    pub seed: u64,
    pub nominal_log_prob: f64,
    pub coverage_auc: f64,
    pub wall_time_seconds: f64,
}

pub const RESULT_HEADER: &str =
    "simulator,estimator,method,temperature,budget,seed,nominal_log_prob,coverage_auc,wall_time_seconds";

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.simulator,
            self.estimator,
            self.method,
            format_float(self.temperature),
            self.budget,
            self.seed,
            format_float(self.nominal_log_prob),
            format_float(self.coverage_auc),
            format_float(self.wall_time_seconds)
        )
    }
}

pub fn write_coverage_csv(path: &Path, curve: &CoverageCurve) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("alpha,ec\n");
    for (a, e) in curve.alphas.iter().zip(&curve.ec) {
        out.push_str(&format!("{},{}\n", format_float(*a), format_float(*e)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generate train and test datasets (disjoint seed streams).
pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<(PathBuf, PathBuf)> {
    let paths = Paths::resolve(&cfg.out_dir);
    let sim = Simulator::by_name(&cfg.simulator)?;
    let train_path = paths.train_dataset(sim.name(), cfg.budget, cfg.seed);
    let test_path = paths.test_dataset(sim.name(), cfg.n_test, cfg.seed);
    guard_overwrite(&train_path, force)?;
    guard_overwrite(&test_path, force)?;
    let train = sim.generate_dataset(cfg.budget, cfg.seed)?;
    let test = sim.generate_dataset(cfg.n_test, seed_for_label("test-set", cfg.seed))?;
    train.save(&train_path)?;
    test.save(&test_path)?;
    Ok((train_path, test_path))
}

fn load_or_generate_test_set(paths: &Paths, cfg: &ExperimentConfig, sim: &Simulator) -> Result<Dataset> {
    let path = paths.test_dataset(sim.name(), cfg.n_test, cfg.seed);
    if path.exists() {
        Dataset::load(&path)
    } else {
        sim.generate_dataset(cfg.n_test, seed_for_label("test-set", cfg.seed))
    }
}

/// Tune the weight prior against the GP functional prior, persist it,
/// and emit the a-priori BMA coverage report.
pub fn cmd_tune_prior(cfg: &ExperimentConfig, force: bool) -> Result<PriorArtifact> {
    let paths = Paths::resolve(&cfg.out_dir);
    let sim = Simulator::by_name(&cfg.simulator)?;
    let prior_path = cfg
        .prior_path
        .clone()
        .unwrap_or_else(|| paths.prior(sim.name(), cfg.estimator_name()));
    guard_overwrite(&prior_path, force)?;
    let bounds = obs_bounds(&paths, &sim)?;
    let est = build_estimator(cfg, &sim, &bounds);
    let gp = GpFunctionalPrior::fit(&sim, &bounds, 1000, cfg.seed);
    let block = cfg.tuning.clone().unwrap_or_default();
    let tune_cfg = TuneConfig {
        iters: block.iters,
        n_func: block.n_func,
        measurement_size: block.measurement_size,
        lr: block.lr,
        seed: cfg.seed,
        ssge: block.ssge,
    };
    let (phi, report) = tune_prior(&est, &sim, &bounds, &gp, &tune_cfg)?;
    // a-priori calibration report over a fresh joint test set
    let eval = sim.generate_dataset(cfg.n_test, seed_for_label("prior-eval", cfg.seed))?;
    let idx = sim.marginal_indices();
    let marg = eval.with_theta_columns(&idx);
    let sets = bma_weight_sets(&phi, cfg.mc_samples, seed_for_label("prior-bma", cfg.seed));
    let model = EstimatorPosterior::new(est, sets);
    let curve = expected_coverage(
        &model,
        &marg.thetas,
        &marg.xs,
        &default_alphas(),
        CredibilityMethod::default(),
        seed_for_label("prior-coverage", cfg.seed),
    )?;
    let cov_path = paths.prior_coverage(sim.name(), cfg.estimator_name());
    write_coverage_csv(&cov_path, &curve)?;
    let artifact = PriorArtifact {
        config: cfg.clone(),
        code_version: code_version(),
        gp,
        phi,
        report,
        prior_coverage_auc: curve.auc,
    };
    write_json(&prior_path, &artifact)?;
    Ok(artifact)
}

fn resolve_prior_path(cfg: &ExperimentConfig, paths: &Paths, sim: &Simulator) -> PathBuf {
    cfg.prior_path
        .clone()
        .unwrap_or_else(|| paths.prior(sim.name(), cfg.estimator_name()))
}

/// Train one model per the config's method and persist the artifact.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<ModelArtifact> {
    let paths = Paths::resolve(&cfg.out_dir);
    let sim = Simulator::by_name(&cfg.simulator)?;
    let model_path = paths.model(cfg);
    guard_overwrite(&model_path, force)?;
    let bounds = obs_bounds(&paths, &sim)?;
    let est = build_estimator(cfg, &sim, &bounds);
    let train_path = paths.train_dataset(sim.name(), cfg.budget, cfg.seed);
    let data = if train_path.exists() {
        Dataset::load(&train_path)?
    } else {
        sim.generate_dataset(cfg.budget, cfg.seed)?
    };
    if data.x_dim() != sim.x_dim {
        return Err(SbiError::ArtifactMismatch(format!(
            "dataset x dim {} does not match simulator {}",
            data.x_dim(),
            sim.x_dim
        )));
    }
    let marg = data.with_theta_columns(&sim.marginal_indices());
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: 64,
        seed: seed_for_label("train", cfg.seed),
    };
    let (weight_sets, weight_distribution) = match cfg.method {
        Method::Map => {
            let (w, _) = train_map(&est, &marg.thetas, &marg.xs, &train_cfg)?;
            (vec![w], None)
        }
        Method::Ensemble => {
            let members = train_ensemble(
                &est,
                &marg.thetas,
                &marg.xs,
                &train_cfg,
                DEFAULT_ENSEMBLE_SIZE,
            )?;
            (members, None)
        }
        Method::Bnn => {
            let prior_path = resolve_prior_path(cfg, &paths, &sim);
            if !prior_path.exists() {
                return Err(SbiError::Config(format!(
                    "method \"bnn\" needs a tuned prior at {} (run tune-prior first)",
                    prior_path.display()
                )));
            }
            let prior: PriorArtifact = read_json(&prior_path)?;
            if prior.phi.len() != est.n_weights() {
                return Err(SbiError::ArtifactMismatch(format!(
                    "prior dimension {} does not match architecture ({})",
                    prior.phi.len(),
                    est.n_weights()
                )));
            }
            let vi_cfg = ViConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                batch_size: 64,
                mc_train: crate::bnn::DEFAULT_MC_TRAIN,
                temperature: cfg.temperature,
                seed: seed_for_label("train", cfg.seed),
            };
            let (q, _) = train_vi(&est, &prior.phi, &marg.thetas, &marg.xs, &vi_cfg)?;
            (Vec::new(), Some(q))
        }
    };
    let artifact = ModelArtifact {
        config: cfg.clone(),
        code_version: code_version(),
        weight_sets,
        weight_distribution,
    };
    write_json(&model_path, &artifact)?;
    Ok(artifact)
}

/// Weight sets used at evaluation time for a trained artifact.
pub fn evaluation_weight_sets(cfg: &ExperimentConfig, artifact: &ModelArtifact) -> Result<Vec<Vec<f64>>> {
    match cfg.method {
        Method::Bnn => {
            let q = artifact.weight_distribution.as_ref().ok_or_else(|| {
                SbiError::ArtifactMismatch("BNN artifact lacks a weight distribution".into())
            })?;
            Ok(bma_weight_sets(q, cfg.mc_samples, seed_for_label("bma", cfg.seed)))
        }
        _ => {
            if artifact.weight_sets.is_empty() {
                return Err(SbiError::ArtifactMismatch("artifact holds no weights".into()));
            }
            Ok(artifact.weight_sets.clone())
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub force: bool,
    /// Dump the normalized posterior density grid for this test index.
    pub posterior_grid: Option<usize>,
    /// Also write the uncertainty decomposition report.
    pub decompose: bool,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            force: false,
            posterior_grid: None,
            decompose: false,
        }
    }
}

/// Evaluate a trained model on the held-out test set: nominal log
/// probability, coverage curve + AUC, and optional extras.
pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: &EvaluateOptions) -> Result<ResultRow> {
    let start = Instant::now();
    let paths = Paths::resolve(&cfg.out_dir);
    let sim = Simulator::by_name(&cfg.simulator)?;
    let cov_path = paths.coverage(cfg);
    let row_path = paths.result_row(cfg);
    guard_overwrite(&cov_path, opts.force)?;
    guard_overwrite(&row_path, opts.force)?;
    let model_path = paths.model(cfg);
    if !model_path.exists() {
        return Err(SbiError::Config(format!(
            "model artifact {} not found (run train first)",
            model_path.display()
        )));
    }
    let artifact: ModelArtifact = read_json(&model_path)?;
    let bounds = obs_bounds(&paths, &sim)?;
    let est = build_estimator(cfg, &sim, &bounds);
    let sets = evaluation_weight_sets(cfg, &artifact)?;
    for s in &sets {
        if s.len() != est.n_weights() {
            return Err(SbiError::ArtifactMismatch(format!(
                "weight set length {} does not match architecture ({})",
                s.len(),
                est.n_weights()
            )));
        }
    }
    let test = load_or_generate_test_set(&paths, cfg, &sim)?;
    let marg = test.with_theta_columns(&sim.marginal_indices());
    let model = EstimatorPosterior::new(est.clone(), sets.clone());
    let nlp = nominal_log_prob(&model, &marg.thetas, &marg.xs)?;
    let curve = expected_coverage(
        &model,
        &marg.thetas,
        &marg.xs,
        &default_alphas(),
        CredibilityMethod::default(),
        seed_for_label("coverage", cfg.seed),
    )?;
    write_coverage_csv(&cov_path, &curve)?;
    if let Some(ix) = opts.posterior_grid {
        if ix >= marg.xs.rows() {
            return Err(SbiError::InvalidArgument(format!(
                "posterior-grid index {ix} out of range (test set has {} rows)",
                marg.xs.rows()
            )));
        }
        let grid_path = paths.posterior_grid(cfg, ix);
        guard_overwrite(&grid_path, opts.force)?;
        write_posterior_grid(&grid_path, &model, marg.xs.row(ix))?;
    }
    if opts.decompose {
        let unc_path = paths.uncertainty(cfg);
        guard_overwrite(&unc_path, opts.force)?;
        let report: UncertaintyReport =
            decompose_uncertainty(&est, &sets, &marg.xs, DEFAULT_GRID_RESOLUTION)?;
        write_json(&unc_path, &report)?;
    }
    let row = ResultRow {
        simulator: sim.name().to_string(),
        estimator: cfg.estimator_name().to_string(),
        method: cfg.method.name().to_string(),
        temperature: cfg.temperature,
        budget: cfg.budget,
        seed: cfg.seed,
        nominal_log_prob: nlp.mean,
        coverage_auc: curve.auc,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(&row_path, format!("{RESULT_HEADER}\n{}\n", row.to_csv_line()))?;
    append_result(&paths.results_csv(), &row)?;
    Ok(row)
}

fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    ensure_parent(path)?;
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{RESULT_HEADER}")?;
    }
    writeln!(f, "{}", row.to_csv_line())?;
    Ok(())
}

/// Normalized density over the credibility grid, as `theta_0,theta_1,density`.
fn write_posterior_grid(path: &Path, model: &EstimatorPosterior, x: &[f64]) -> Result<()> {
    let grid = GridSpec::new(model.box_low(), model.box_high(), DEFAULT_GRID_RESOLUTION)?;
    let dens = model.grid_density(x, &grid)?;
    let total: f64 = dens.iter().sum::<f64>() * grid.cell_volume();
    if !(total > 0.0) {
        return Err(SbiError::InvalidArgument("posterior grid carries zero mass".into()));
    }
    let cells = grid.cells();
    let mut out = String::from("theta_0,theta_1,density\n");
    for i in 0..cells.rows() {
        let r = cells.row(i);
        let t1 = if r.len() > 1 { r[1] } else { 0.0 };
        out.push_str(&format!(
            "{},{},{}\n",
            format_float(r[0]),
            format_float(t1),
            format_float(dens[i] / total)
        ));
    }
    ensure_parent(path)?;
    std::fs::write(path, out)?;
    Ok(())
}

/// A sweep over budgets × methods × seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub simulator: String,
    pub estimator: EstimatorKind,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub prior_path: Option<PathBuf>,
    #[serde(default)]
    pub tuning: Option<TuningBlock>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<SweepConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SweepConfig = serde_json::from_str(&text)
            .map_err(|e| SbiError::Config(format!("{}: {e}", path.display())))?;
        Simulator::by_name(&cfg.simulator)?;
        if cfg.methods.is_empty() || cfg.budgets.is_empty() || cfg.seeds.is_empty() {
            return Err(SbiError::Config(
                "sweep needs at least one method, budget and seed".into(),
            ));
        }
        Ok(cfg)
    }

    /// The experiment config of one cell.
    pub fn cell(&self, spec: &MethodSpec, budget: usize, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            simulator: self.simulator.clone(),
            estimator: self.estimator,
            method: spec.method,
            temperature: spec.temperature,
            budget,
            seed,
            epochs: self.epochs,
            lr: self.lr,
            mc_samples: self.mc_samples,
            prior_path: self.prior_path.clone(),
            n_test: self.n_test,
            tuning: self.tuning.clone(),
            out_dir: self.out_dir.clone(),
        }
    }
}

/// Cell identity for resumability: hash of the semantic config (paths
/// excluded).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut scrubbed = cfg.clone();
    scrubbed.out_dir = None;
    scrubbed.prior_path = None;
    let bytes = serde_json::to_vec(&scrubbed).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepCell {
    hash: String,
    row: ResultRow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub completed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
    pub results_csv: PathBuf,
    pub medians_csv: PathBuf,
}

/// Run (or resume) the full grid; each cell generates data if missing,
/// trains, evaluates, and records its row keyed by config hash.
pub fn cmd_sweep(sweep: &SweepConfig, jobs: Option<usize>) -> Result<SweepSummary> {
    let paths = Paths::resolve(&sweep.out_dir);
    // one tuned prior shared by every bnn cell
    if sweep.methods.iter().any(|m| m.method == Method::Bnn) {
        let probe = sweep.cell(&sweep.methods[0], sweep.budgets[0], sweep.seeds[0]);
        let sim = Simulator::by_name(&sweep.simulator)?;
        let prior_path = resolve_prior_path(&probe, &paths, &sim);
        if !prior_path.exists() {
            let mut tune_cfg = probe.clone();
            tune_cfg.method = Method::Bnn;
            tune_cfg.seed = sweep.seeds[0];
            cmd_tune_prior(&tune_cfg, false)?;
        }
    }
    let mut cells = Vec::new();
    for spec in &sweep.methods {
        for &budget in &sweep.budgets {
            for &seed in &sweep.seeds {
                cells.push(sweep.cell(spec, budget, seed));
            }
        }
    }
    let run_cell = |cfg: &ExperimentConfig| -> Result<(ResultRow, bool)> {
        let hash = config_hash(cfg);
        let cell_path = paths.sweep_cell(&hash);
        if cell_path.exists() {
            let cell: SweepCell = read_json(&cell_path)?;
            return Ok((cell.row, true));
        }
        let sim = Simulator::by_name(&cfg.simulator)?;
        let train_path = paths.train_dataset(sim.name(), cfg.budget, cfg.seed);
        let test_path = paths.test_dataset(sim.name(), cfg.n_test, cfg.seed);
        if !train_path.exists() || !test_path.exists() {
            // concurrent cells may have raced to create the shared datasets
            match cmd_generate(cfg, false) {
                Ok(_) | Err(SbiError::AlreadyExists(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if !paths.model(cfg).exists() {
            cmd_train(cfg, false)?;
        }
        let opts = EvaluateOptions {
            force: true,
            ..EvaluateOptions::default()
        };
        let row = cmd_evaluate(cfg, &opts)?;
        write_json(&cell_path, &SweepCell { hash, row: row.clone() })?;
        Ok((row, false))
    };
    let outcomes: Vec<(String, Result<(ResultRow, bool)>)> = if let Some(n) = jobs {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SbiError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            cells
                .par_iter()
                .map(|cfg| (cfg.tag(), run_cell(cfg)))
                .collect()
        })
    } else {
        cells
            .par_iter()
            .map(|cfg| (cfg.tag(), run_cell(cfg)))
            .collect()
    };
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let mut skipped = 0;
    for (tag, outcome) in outcomes {
        match outcome {
            Ok((row, was_cached)) => {
                if was_cached {
                    skipped += 1;
                }
                rows.push(row);
            }
            Err(e) => failed.push(format!("{tag}: {e}")),
        }
    }
    // deterministic ordering: method list order, then budget, then seed
    let order_key = |r: &ResultRow| {
        let mi = sweep
            .methods
            .iter()
            .position(|m| m.method.name() == r.method && m.temperature == r.temperature)
            .unwrap_or(usize::MAX);
        (mi, r.budget, r.seed)
    };
    rows.sort_by(|a, b| order_key(a).cmp(&order_key(b)));
    let results_csv = paths.results_csv();
    ensure_parent(&results_csv)?;
    let mut out = String::from(RESULT_HEADER);
    out.push('\n');
    for r in &rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    std::fs::write(&results_csv, out)?;
    // medians per (method, temperature, budget)
    let mut groups: BTreeMap<(usize, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        let mi = sweep
            .methods
            .iter()
            .position(|m| m.method.name() == r.method && m.temperature == r.temperature)
            .unwrap_or(usize::MAX);
        groups.entry((mi, r.budget)).or_default().push(r);
    }
    let medians_csv = paths.medians_csv();
    let mut out = String::from(
        "simulator,estimator,method,temperature,budget,n_seeds,median_nominal_log_prob,median_coverage_auc\n",
    );
    for ((mi, budget), group) in &groups {
        let spec = &sweep.methods[(*mi).min(sweep.methods.len() - 1)];
        let mut nlp: Vec<f64> = group.iter().map(|r| r.nominal_log_prob).collect();
        let mut auc: Vec<f64> = group.iter().map(|r| r.coverage_auc).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            sweep.simulator,
            group[0].estimator,
            spec.method.name(),
            format_float(spec.temperature),
            budget,
            group.len(),
            format_float(crate::stats::median(&mut nlp)),
            format_float(crate::stats::median(&mut auc)),
        ));
    }
    std::fs::write(&medians_csv, out)?;
    Ok(SweepSummary {
        completed: rows.len(),
        skipped,
        failed,
        results_csv,
        medians_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            simulator: "gaussian_linear".into(),
            estimator: EstimatorKind::NpeMdn,
            method: Method::Map,
            temperature: 1.0,
            budget: 32,
            seed: 0,
            epochs: 3,
            lr: 1e-3,
            mc_samples: 4,
            prior_path: None,
            n_test: 20,
            tuning: None,
            out_dir: Some(dir.to_path_buf()),
        }
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"{"simulator":"two_moons","estimator":"npe-mdn","method":"map",
                       "budget":32,"seed":0,"bogus":1}"#;
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn config_defaults_apply() {
        let text = r#"{"simulator":"two_moons","estimator":"nre","method":"bnn",
                       "budget":128,"seed":3}"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.epochs, DEFAULT_EPOCHS);
        assert_eq!(cfg.mc_samples, DEFAULT_BMA_SAMPLES);
        assert_eq!(cfg.n_test, DEFAULT_N_TEST);
        assert_eq!(cfg.temperature, 1.0);
    }

    #[test]
    fn generate_is_deterministic_and_guards_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let (train, test) = cmd_generate(&cfg, false).unwrap();
        let bytes_a = std::fs::read(&train).unwrap();
        assert!(matches!(
            cmd_generate(&cfg, false),
            Err(SbiError::AlreadyExists(_))
        ));
        let _ = cmd_generate(&cfg, true).unwrap();
        let bytes_b = std::fs::read(&train).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert!(test.exists());
        let data = Dataset::load(&train).unwrap();
        assert_eq!(data.len(), 32);
    }

    #[test]
    fn train_and_evaluate_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        cmd_generate(&cfg, false).unwrap();
        let artifact = cmd_train(&cfg, false).unwrap();
        assert_eq!(artifact.weight_sets.len(), 1);
        let row = cmd_evaluate(&cfg, &EvaluateOptions::default()).unwrap();
        assert!(row.coverage_auc >= -0.5 && row.coverage_auc <= 0.5);
        assert!(row.nominal_log_prob.is_finite());
        let paths = Paths::resolve(&cfg.out_dir);
        let cov = std::fs::read_to_string(paths.coverage(&cfg)).unwrap();
        assert_eq!(cov.lines().count(), 102); // header + 101 alphas
        // identical rerun reproduces the coverage curve byte for byte
        let opts = EvaluateOptions { force: true, ..EvaluateOptions::default() };
        cmd_evaluate(&cfg, &opts).unwrap();
        let cov2 = std::fs::read_to_string(paths.coverage(&cfg)).unwrap();
        assert_eq!(cov, cov2);
    }

    #[test]
    fn bnn_without_prior_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.method = Method::Bnn;
        cmd_generate(&cfg, false).unwrap();
        assert!(matches!(cmd_train(&cfg, false), Err(SbiError::Config(_))));
    }

    #[test]
    fn config_hash_ignores_paths_but_not_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let mut other = cfg.clone();
        other.out_dir = Some(PathBuf::from("/elsewhere"));
        assert_eq!(config_hash(&cfg), config_hash(&other));
        other.seed = 1;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn sweep_runs_grid_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = SweepConfig {
            simulator: "gaussian_linear".into(),
            estimator: EstimatorKind::NpeMdn,
            budgets: vec![16, 32],
            methods: vec![
                MethodSpec { method: Method::Map, temperature: 1.0 },
                MethodSpec { method: Method::Ensemble, temperature: 1.0 },
            ],
            seeds: vec![0, 1],
            epochs: 2,
            lr: 1e-3,
            mc_samples: 2,
            n_test: 10,
            prior_path: None,
            tuning: None,
            out_dir: Some(dir.path().to_path_buf()),
        };
        let summary = cmd_sweep(&sweep, Some(2)).unwrap();
        assert_eq!(summary.completed, 8);
        assert!(summary.failed.is_empty());
        let csv = std::fs::read_to_string(&summary.results_csv).unwrap();
        assert_eq!(csv.lines().count(), 9);
        let medians = std::fs::read_to_string(&summary.medians_csv).unwrap();
        assert_eq!(medians.lines().count(), 5); // header + 2 methods × 2 budgets
        // resume: all cells cached, byte-identical outputs
        let summary2 = cmd_sweep(&sweep, Some(2)).unwrap();
        assert_eq!(summary2.skipped, 8);
        assert_eq!(csv, std::fs::read_to_string(&summary2.results_csv).unwrap());
        assert_eq!(
            medians,
            std::fs::read_to_string(&summary2.medians_csv).unwrap()
        );
    }

    #[test]
    fn median_matches_hand_computed() {
        let mut vals = vec![3.0, 1.0, 2.0];
        assert_eq!(crate::stats::median(&mut vals), 2.0);
    }
}
