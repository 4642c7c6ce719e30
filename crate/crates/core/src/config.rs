//! TOML experiment configuration, validation and named presets.
//!
//! A config describes one or more population pairs (`[[rows]]`) sharing a
//! region, a quadrature setup, a k grid, a bootstrap plan and a master seed.
//! `[scaling]` lists the `(mu, nu)` levels used by the scaling-law runner.
//! See `configs/` for annotated examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::densities::{GaussianParams, GaussianSpec, PopulationPair, Region};
use crate::kselect::{BootstrapPlan, TestResampling};
use crate::sampling::SampleModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown preset {0:?} (known: table1-full, table1-desk, scaling-d2, scaling-d16)")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(field: impl Into<String>, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

pub const PRESET_NAMES: [&str; 4] = ["table1-full", "table1-desk", "scaling-d2", "scaling-d16"];

const TABLE1_FULL: &str = include_str!("../../../configs/table1-full.toml");
const TABLE1_DESK: &str = include_str!("../../../configs/table1-desk.toml");
const SCALING_D2: &str = include_str!("../../../configs/scaling-d2.toml");
const SCALING_D16: &str = include_str!("../../../configs/scaling-d16.toml");

/// k values to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KGridSpec {
    /// Explicit strictly increasing list.
    List { values: Vec<usize> },
    /// `start, start + step, ...` up to and including `stop`.
    Range {
        start: usize,
        stop: usize,
        #[serde(default = "one")]
        step: usize,
    },
    /// `1..=floor(fraction * (mu + nu))`.
    Fraction { fraction: f64 },
}

fn one() -> usize {
    1
}

impl Default for KGridSpec {
    fn default() -> Self {
        KGridSpec::Fraction { fraction: 0.75 }
    }
}

impl KGridSpec {
    pub fn resolve(&self, total_intensity: f64) -> Vec<usize> {
        match self {
            KGridSpec::List { values } => values.clone(),
            KGridSpec::Range { start, stop, step } => {
                (*start..=*stop).step_by((*step).max(1)).collect()
            }
            KGridSpec::Fraction { fraction } => {
                let top = (fraction * total_intensity).floor().max(1.0) as usize;
                (1..=top).collect()
            }
        }
    }

    fn validate(&self, field: &str, total_intensity: f64) -> Result<()> {
        match self {
            KGridSpec::Range { start, stop, step } if *start == 0 || stop < start || *step == 0 => {
                return Err(invalid(field, "range needs 1 <= start <= stop and step >= 1"));
            }
            KGridSpec::Fraction { fraction } if !(*fraction > 0.0 && *fraction < 1.0) => {
                return Err(invalid(field, "fraction must lie in (0, 1)"));
            }
            _ => {}
        }
        let grid = self.resolve(total_intensity);
        if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(field, "k grid must be nonempty, positive and strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// Lower bound of every coordinate.
    pub lower: f64,
    /// Upper bound of every coordinate.
    pub upper: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            lower: -2.5,
            upper: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Nodes per axis for the Bayes-risk rule.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Nodes per axis of the grid the k-NN error is averaged over (d <= 2).
    #[serde(default = "default_resolution")]
    pub design_resolution: usize,
    /// Test points per class for the Monte Carlo design (d > 2).
    #[serde(default = "default_mc_points")]
    pub mc_points: usize,
    /// Grid resolution for boundary extraction.
    #[serde(default = "default_resolution")]
    pub boundary_resolution: usize,
}

fn default_resolution() -> usize {
    201
}

fn default_mc_points() -> usize {
    2000
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            design_resolution: default_resolution(),
            mc_points: default_mc_points(),
            boundary_resolution: default_resolution(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub r: Vec<f64>,
    pub b: usize,
    #[serde(default)]
    pub test_resampling: TestResampling,
}

impl BootstrapConfig {
    pub fn plans(&self) -> Vec<BootstrapPlan> {
        self.r
            .iter()
            .map(|&r| BootstrapPlan {
                r,
                b: self.b,
                k_grid: None,
                test_resampling: self.test_resampling,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    #[serde(default)]
    pub label: Option<String>,
    pub mu: f64,
    pub nu: f64,
    pub f: GaussianParams,
    pub g: GaussianParams,
    /// Overrides the top-level k grid for this row.
    #[serde(default)]
    pub k_grid: Option<KGridSpec>,
}

impl RowConfig {
    pub fn pair(&self) -> std::result::Result<PopulationPair, crate::densities::DensityError> {
        PopulationPair::new(
            GaussianSpec::from_params(&self.f)?,
            GaussianSpec::from_params(&self.g)?,
            self.mu,
            self.nu,
        )
    }

    pub fn dim(&self) -> usize {
        self.f.mean.len()
    }

    /// Correlation of the first two coordinates of `f` (0 when d = 1).
    pub fn correlation(&self) -> f64 {
        let d = self.dim();
        if d < 2 {
            return 0.0;
        }
        let c = &self.f.covariance;
        c[1] / (c[0] * c[d + 1]).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// `(mu, nu)` pairs; ratios are reported against the first.
    pub levels: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: SampleModel,
    pub n_training_sets: usize,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub k_grid: KGridSpec,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    pub rows: Vec<RowConfig>,
}

fn default_model() -> SampleModel {
    SampleModel::Poisson
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "table1-full" => TABLE1_FULL,
            "table1-desk" => TABLE1_DESK,
            "scaling-d2" => SCALING_D2,
            "scaling-d16" => SCALING_D16,
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Self::from_toml_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn region_for(&self, d: usize) -> Region {
        Region::cube(d, self.region.lower, self.region.upper).expect("validated region")
    }

    pub fn k_grid_for(&self, row: &RowConfig, mu: f64, nu: f64) -> Vec<usize> {
        row.k_grid.as_ref().unwrap_or(&self.k_grid).resolve(mu + nu)
    }

    /// Checks every field against the preconditions of the modules that use it.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.n_training_sets == 0 {
            return Err(invalid("n_training_sets", "must be positive"));
        }
        let RegionConfig { lower, upper } = self.region;
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(invalid("region", "need finite lower < upper"));
        }
        let q = &self.quadrature;
        for (field, v) in [
            ("quadrature.resolution", q.resolution),
            ("quadrature.design_resolution", q.design_resolution),
            ("quadrature.boundary_resolution", q.boundary_resolution),
        ] {
            if v < 2 {
                return Err(invalid(field, "must be at least 2"));
            }
        }
        if q.mc_points == 0 {
            return Err(invalid("quadrature.mc_points", "must be positive"));
        }
        if let Some(b) = &self.bootstrap {
            if b.r.is_empty() {
                return Err(invalid("bootstrap.r", "needs at least one fraction"));
            }
            for (i, plan) in b.plans().iter().enumerate() {
                plan.validate()
                    .map_err(|e| invalid(format!("bootstrap.r[{i}]"), e))?;
            }
        }
        if self.rows.is_empty() {
            return Err(invalid("rows", "needs at least one population pair"));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let field = |name: &str| format!("rows[{i}].{name}");
            row.pair().map_err(|e| invalid(field("f/g/mu/nu"), e))?;
            let grid_field = if row.k_grid.is_some() { field("k_grid") } else { "k_grid".into() };
            row.k_grid
                .as_ref()
                .unwrap_or(&self.k_grid)
                .validate(&grid_field, row.mu + row.nu)?;
        }
        if let Some(s) = &self.scaling {
            if s.levels.len() < 2 {
                return Err(invalid("scaling.levels", "needs at least two (mu, nu) levels"));
            }
            for (i, [mu, nu]) in s.levels.iter().enumerate() {
                if !(mu.is_finite() && nu.is_finite() && *mu > 0.0 && *nu > 0.0) {
                    return Err(invalid(format!("scaling.levels[{i}]"), "mu and nu must be positive"));
                }
                for (j, row) in self.rows.iter().enumerate() {
                    let spec = row.k_grid.as_ref().unwrap_or(&self.k_grid);
                    spec.validate(&format!("rows[{j}].k_grid at scaling level {i}"), mu + nu)?;
                }
            }
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form, ignoring output settings.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputConfig::default();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}
