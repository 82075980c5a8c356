//! Versioned JSON run configurations.
//!
//! Every field except `version` has a default, unknown fields are rejected,
//! and each run writes the resolved document next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use fairicp_core::data::{equal_spaced_cov_sqrt, SimSpec, SimVariant};
use fairicp_core::eotest::EoTestConfig;
use fairicp_core::rng::derive_seed;
use fairicp_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::CsvSchema;

pub const CONFIG_VERSION: u32 = 1;

/// Attribute mixing used by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovChoice {
    Identity,
    /// Seeded rotation of `diag(linspace(1, 5, p))`.
    EqualSpaced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub variant: SimVariant,
    pub n: usize,
    pub k0: usize,
    pub k: usize,
    pub w: f64,
    pub sigma: f64,
    pub cov: CovChoice,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            variant: SimVariant::Sim1,
            n: 900,
            k0: 0,
            k: 1,
            w: 0.9,
            sigma: 1.0,
            cov: CovChoice::Identity,
        }
    }
}

impl SimConfig {
    /// Generator spec on `seed`; the mixing matrix uses stream 2 of it.
    pub fn spec(&self, seed: u64) -> CliResult<SimSpec> {
        let mut spec = SimSpec::new(self.variant, self.n, self.k0, self.k, self.w, seed);
        spec.sigma = self.sigma;
        if self.cov == CovChoice::EqualSpaced {
            spec.cov_sqrt = Some(equal_spaced_cov_sqrt(spec.attr_dim(), derive_seed(seed, 2)));
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_frac: Option<f64>,
}

impl SplitConfig {
    fn validate(&self) -> Result<(), String> {
        match (self.n_train, self.train_frac) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err("split needs exactly one of n_train or train_frac".into()),
        }
    }
}

/// Form of `q(y | a)` used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    /// Closed form of the generating model; needs a simulated dataset.
    Oracle,
    Ridge { lambda: f64 },
    /// `lambda` omitted: the data-driven default.
    Lasso {
        #[serde(default)]
        lambda: Option<f64>,
    },
    /// Multinomial logistic for class responses.
    Logistic { lambda: f64 },
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig::Ridge { lambda: 0.0 }
    }
}

impl DensityConfig {
    fn validate(&self) -> Result<(), String> {
        let lambda = match self {
            DensityConfig::Oracle => return Ok(()),
            DensityConfig::Lasso { lambda: None } => return Ok(()),
            DensityConfig::Ridge { lambda } | DensityConfig::Logistic { lambda } => *lambda,
            DensityConfig::Lasso { lambda: Some(l) } => *l,
        };
        if lambda >= 0.0 && lambda.is_finite() {
            Ok(())
        } else {
            Err(format!("density lambda must be >= 0, got {lambda}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub version: u32,
    pub sim: SimConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitConfig>,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { version: CONFIG_VERSION, sim: SimConfig::default(), split: None, seed: 0 }
    }
}

/// How each TV cell is estimated against the oracle reference law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// Densities fitted on the trial data.
    #[serde(rename = "fit")]
    Fit,
    /// True conditionals in each method's own direction.
    #[serde(rename = "oracle-ref")]
    OracleRef,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Fit => "fit",
            Estimator::OracleRef => "oracle-ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvStudyConfig {
    pub version: u32,
    pub n: usize,
    pub w: f64,
    pub sigma: f64,
    pub k0_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub trials: usize,
    /// Lasso penalty for the ICP fit. Omitted: the data-driven default, or
    /// no penalty with a single attribute.
    pub lasso_lambda: Option<f64>,
    /// Covariance shrinkage toward the diagonal in the CP fit.
    pub shrinkage: f64,
    pub estimators: Vec<Estimator>,
    pub cov: CovChoice,
    pub seed: u64,
}

impl Default for TvStudyConfig {
    fn default() -> Self {
        TvStudyConfig {
            version: CONFIG_VERSION,
            n: 200,
            w: 0.6,
            sigma: 1.0,
            k0_grid: vec![1, 5, 10],
            k_grid: vec![0, 5, 10, 20, 50, 100],
            trials: 20,
            lasso_lambda: None,
            shrinkage: 0.0,
            estimators: vec![Estimator::Fit],
            cov: CovChoice::EqualSpaced,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub version: u32,
    pub sim: SimConfig,
    pub n_train: usize,
    pub runs: usize,
    pub grid: Vec<f64>,
    pub density: DensityConfig,
    /// `train.seed` is ignored; each run derives its own from `seed`.
    pub train: TrainConfig,
    pub test: EoTestConfig,
    pub seed: u64,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        ParetoConfig {
            version: CONFIG_VERSION,
            sim: SimConfig::default(),
            n_train: 500,
            runs: 20,
            grid: vec![0.0, 0.3, 0.5, 0.7, 0.8, 0.9],
            density: DensityConfig::default(),
            train: TrainConfig::default(),
            test: EoTestConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub version: u32,
    pub data: PathBuf,
    pub predictions: PathBuf,
    /// Needed when the data file has no embedded schema.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    /// Serialized density to use instead of fitting one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density_model: Option<PathBuf>,
    pub density: DensityConfig,
    pub test: EoTestConfig,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            version: CONFIG_VERSION,
            data: PathBuf::new(),
            predictions: PathBuf::new(),
            schema: None,
            density_model: None,
            density: DensityConfig::default(),
            test: EoTestConfig::default(),
            seed: 0,
        }
    }
}

/// Single training run on a dataset file or on simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    /// Used when `data` is absent.
    pub sim: SimConfig,
    pub density: DensityConfig,
    /// `train.seed` is ignored in favour of one derived from `seed`.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            version: CONFIG_VERSION,
            data: None,
            schema: None,
            sim: SimConfig::default(),
            density: DensityConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Shared handling of the top-level fields.
pub trait RunConfig: Serialize + DeserializeOwned {
    fn version(&self) -> u32;
    fn seed_mut(&mut self) -> &mut u64;
    fn check(&self) -> Result<(), String>;
    /// Makes relative paths relative to `base`.
    fn rebase(&mut self, _base: &Path) {}
}

fn join(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

fn check_schema(schema: &Option<CsvSchema>) -> Result<(), String> {
    schema.as_ref().map_or(Ok(()), CsvSchema::validate)
}

impl RunConfig for GenDataConfig {
    fn version(&self) -> u32 {
        self.version
    }
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn check(&self) -> Result<(), String> {
        self.sim.spec(self.seed).map_err(|e| e.to_string())?;
        self.split.as_ref().map_or(Ok(()), SplitConfig::validate)
    }
}

impl RunConfig for TvStudyConfig {
    fn version(&self) -> u32 {
        self.version
    }
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn check(&self) -> Result<(), String> {
        if self.trials == 0 {
            return Err("trials must be >= 1".into());
        }
        if self.n < 2 {
            return Err("n must be >= 2".into());
        }
        if self.k0_grid.is_empty() || self.k_grid.is_empty() || self.estimators.is_empty() {
            return Err("k0_grid, k_grid and estimators must be non-empty".into());
        }
        if self.k0_grid.contains(&0) {
            return Err("k0_grid entries must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(format!("shrinkage must be in [0, 1], got {}", self.shrinkage));
        }
        if let Some(l) = self.lasso_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(format!("lasso_lambda must be >= 0, got {l}"));
            }
        }
        if !(0.0..=1.0).contains(&self.w) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err("need w in [0, 1] and sigma > 0".into());
        }
        Ok(())
    }
}

impl RunConfig for ParetoConfig {
    fn version(&self) -> u32 {
        self.version
    }
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn check(&self) -> Result<(), String> {
        let spec = self.sim.spec(self.seed).map_err(|e| e.to_string())?;
        if spec.variant == SimVariant::Quality {
            return Err("pareto needs the sim1 or sim2 generator".into());
        }
        if self.n_train == 0 || self.n_train >= self.sim.n {
            return Err(format!("n_train must be in 1..{}", self.sim.n));
        }
        if self.runs == 0 || self.grid.is_empty() {
            return Err("runs and grid must be non-empty".into());
        }
        for &mu in &self.grid {
            TrainConfig { mu, ..self.train.clone() }.validate().map_err(|e| e.to_string())?;
        }
        self.test.validate().map_err(|e| e.to_string())?;
        self.density.validate()
    }
}

impl RunConfig for AuditConfig {
    fn version(&self) -> u32 {
        self.version
    }
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn check(&self) -> Result<(), String> {
        if self.data.as_os_str().is_empty() || self.predictions.as_os_str().is_empty() {
            return Err("audit needs data and predictions paths".into());
        }
        if self.density == DensityConfig::Oracle && self.density_model.is_none() {
            return Err("the oracle density is only known for simulated data".into());
        }
        check_schema(&self.schema)?;
        self.test.validate().map_err(|e| e.to_string())?;
        self.density.validate()
    }
    fn rebase(&mut self, base: &Path) {
        join(base, &mut self.data);
        join(base, &mut self.predictions);
        if let Some(p) = &mut self.density_model {
            join(base, p);
        }
    }
}

impl RunConfig for TrainCmdConfig {
    fn version(&self) -> u32 {
        self.version
    }
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn check(&self) -> Result<(), String> {
        if self.data.is_some() && self.density == DensityConfig::Oracle {
            return Err("the oracle density is only known for simulated data".into());
        }
        if self.data.is_none() {
            self.sim.spec(self.seed).map_err(|e| e.to_string())?;
        }
        check_schema(&self.schema)?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.density.validate()
    }
    fn rebase(&mut self, base: &Path) {
        if let Some(p) = &mut self.data {
            join(base, p);
        }
    }
}

/// Parses and validates a config document. `seed` overrides the file.
pub fn parse_config<C: RunConfig>(text: &str, base: &Path, seed: Option<u64>) -> CliResult<C> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        Some(v) => return Err(CliError::Config(format!("unsupported config version {v}"))),
        None => return Err(CliError::Config("config needs an integer \"version\" field".into())),
    }
    let mut cfg: C = serde_json::from_value(raw).map_err(|e| CliError::Config(e.to_string()))?;
    debug_assert_eq!(cfg.version(), CONFIG_VERSION);
    if let Some(s) = seed {
        *cfg.seed_mut() = s;
    }
    cfg.rebase(base);
    cfg.check().map_err(CliError::Config)?;
    Ok(cfg)
}

/// Reads `path`, or uses all defaults when no file is given.
pub fn load_config<C: RunConfig + Default>(path: Option<&Path>, seed: Option<u64>) -> CliResult<C> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let base = p.parent().unwrap_or(Path::new(""));
            parse_config(&text, base, seed)
        }
        None => {
            let mut cfg = C::default();
            if let Some(s) = seed {
                *cfg.seed_mut() = s;
            }
            cfg.check().map_err(CliError::Config)?;
            Ok(cfg)
        }
    }
}
