//! Config-driven runners for the benchmark table (Bayes risk, k_opt error,
//! bootstrap-selected error per row) and the scaling-law experiment.
//!
//! Row `u` of a run draws its replicates from
//! `split_stream(derive_seed(seed, [u]), s)`; the levels of a scaling run
//! reuse their row's seed. Replicates are evaluated in parallel, collected
//! in index order and reduced sequentially, so results do not depend on the
//! worker count.
//! Finished units are appended to an optional JSONL checkpoint keyed by the
//! config hash; a rerun with the same config skips them.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, RowConfig};
use crate::densities::{DensityError, PopulationPair};
use crate::emit::{Cell, CellKind, Table};
use crate::kselect::{select_k_for_training, SelectError};
use crate::risk::{
    argmin_first, bayes_risk, replicate_error_curves, replicate_training, training_error_curve,
    ErrorDesign, ErrorEstimate, McPlan, QuadratureGrid, RiskError,
};
use crate::sampling::derive_seed;
use crate::theory::{expansion_for_pair, theoretical_kopt, TheoryError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Seed of row `unit`.
pub fn unit_seed(master: u64, unit: u64) -> u64 {
    derive_seed(master, &[unit])
}

/// Seed of the bootstrap run for replicate `s` and fraction index `ri`.
pub fn bootstrap_seed(unit_seed: u64, s: u64, ri: u64) -> u64 {
    derive_seed(unit_seed, &[s, ri])
}

#[derive(Deserialize)]
struct CheckpointLine<T> {
    config_hash: String,
    unit: usize,
    records: Vec<T>,
}

#[derive(Serialize)]
struct CheckpointLineRef<'a, T> {
    config_hash: &'a str,
    unit: usize,
    records: &'a [T],
}

/// Append-only JSONL store of finished work units.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    path: PathBuf,
    hash: String,
}

impl Checkpoint {
    pub fn new(path: impl Into<PathBuf>, config: &ExperimentConfig) -> Self {
        Self {
            path: path.into(),
            hash: config.hash(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn error(&self, message: impl ToString) -> ExperimentError {
        ExperimentError::Checkpoint {
            path: self.path.clone(),
            message: message.to_string(),
        }
    }

    /// Units recorded under this config hash. Lines from other configs and
    /// a torn final line are ignored.
    pub fn load<T: DeserializeOwned>(&self) -> Result<BTreeMap<usize, Vec<T>>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
            Err(e) => return Err(self.error(e)),
        };
        let mut done = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(entry) = serde_json::from_str::<CheckpointLine<T>>(line) {
                if entry.config_hash == self.hash {
                    done.insert(entry.unit, entry.records);
                }
            }
        }
        Ok(done)
    }

    pub fn append<T: Serialize>(&self, unit: usize, records: &[T]) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| self.error(e))?;
        }
        let line = serde_json::to_string(&CheckpointLineRef {
            config_hash: &self.hash,
            unit,
            records,
        })
        .map_err(|e| self.error(e))?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| self.error(e))?;
        writeln!(file, "{line}").map_err(|e| self.error(e))?;
        Ok(())
    }
}

/// Runs `compute` for every unit not already in the checkpoint.
fn run_units<T, F>(n_units: usize, checkpoint: Option<&Checkpoint>, mut compute: F) -> Result<Vec<T>>
where
    T: Serialize + DeserializeOwned + Clone,
    F: FnMut(usize) -> Result<Vec<T>>,
{
    let mut done: BTreeMap<usize, Vec<T>> = match checkpoint {
        Some(c) => c.load()?,
        None => BTreeMap::new(),
    };
    let mut out = Vec::new();
    for unit in 0..n_units {
        let records = match done.remove(&unit) {
            Some(r) => r,
            None => {
                let r = compute(unit)?;
                if let Some(c) = checkpoint {
                    c.append(unit, &r)?;
                }
                r
            }
        };
        out.extend(records);
    }
    Ok(out)
}

fn design_for(config: &ExperimentConfig, pair: &PopulationPair, seed: u64) -> Result<ErrorDesign> {
    let q = &config.quadrature;
    Ok(ErrorDesign::for_region(
        pair,
        &config.region_for(pair.dim()),
        q.design_resolution,
        q.mc_points,
        seed,
    )?)
}

/// Bayes risk of a row by quadrature (d <= 2).
pub fn row_bayes_risk(config: &ExperimentConfig, row: &RowConfig) -> Result<f64> {
    let pair = row.pair()?;
    let grid = QuadratureGrid::standard(&config.region_for(row.dim()), config.quadrature.resolution)?;
    Ok(bayes_risk(&pair, &grid)?)
}

/// One line of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Record {
    pub row: usize,
    pub label: String,
    pub d: usize,
    pub mu: f64,
    pub nu: f64,
    pub correlation: f64,
    pub bayes: f64,
    /// `k_opt` for the fixed-k line, `k_tilde` for bootstrap lines.
    pub method: String,
    pub r: Option<f64>,
    /// The grid minimizer, or the rounded mean of the bootstrap choices.
    pub k: usize,
    pub k_mean: f64,
    pub err: f64,
    pub se: f64,
    pub n_sets: usize,
    pub master_seed: u64,
    pub stream: u64,
    pub config_hash: String,
}

/// Error curves of every replicate over `k_grid`, plus each replicate's
/// error at its bootstrap choices of k (one per fraction).
#[derive(Debug, Clone, PartialEq)]
pub struct RowCurves {
    pub k_grid: Vec<usize>,
    pub grid_errors: Vec<Vec<f64>>,
    pub chosen_k: Vec<Vec<usize>>,
    pub chosen_errors: Vec<Vec<f64>>,
}

impl RowCurves {
    pub fn n_sets(&self) -> usize {
        self.grid_errors.len()
    }

    pub fn grid_estimates(&self) -> Vec<ErrorEstimate> {
        let n = self.n_sets();
        (0..self.k_grid.len())
            .map(|j| {
                let sum: f64 = self.grid_errors.iter().map(|c| c[j]).sum();
                ErrorEstimate::new(self.k_grid[j], sum / n as f64, n)
            })
            .collect()
    }

    /// Mean error and mean k when each replicate uses its choice for fraction `ri`.
    pub fn chosen_estimate(&self, ri: usize) -> (ErrorEstimate, f64) {
        let n = self.n_sets();
        let err: f64 = self.chosen_errors.iter().map(|e| e[ri]).sum::<f64>() / n as f64;
        let k_mean = self.chosen_k.iter().map(|k| k[ri] as f64).sum::<f64>() / n as f64;
        (ErrorEstimate::new(k_mean.round() as usize, err, n), k_mean)
    }
}

/// Replicate curves with bootstrap choices for each fraction in `plans`.
pub fn row_curves(
    pair: &PopulationPair,
    design: &ErrorDesign,
    k_grid: &[usize],
    plan: McPlan,
    bootstrap: &[crate::kselect::BootstrapPlan],
) -> Result<RowCurves> {
    crate::risk::validate_k_grid(k_grid)?;
    if plan.n_sets == 0 {
        return Err(RiskError::NoReplicates.into());
    }
    let k_max = *k_grid.last().expect("validated");
    let per_set = (0..plan.n_sets as u64)
        .into_par_iter()
        .map(|s| -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
            let training = replicate_training(pair, plan.model, plan.seed, s, k_max)?;
            let mut chosen = Vec::with_capacity(bootstrap.len());
            for (ri, b) in bootstrap.iter().enumerate() {
                let seed = bootstrap_seed(plan.seed, s, ri as u64);
                chosen.push(select_k_for_training(&training, b, seed)?.k_tilde);
            }
            let mut union: Vec<usize> = k_grid.iter().chain(&chosen).copied().collect();
            union.sort_unstable();
            union.dedup();
            let curve = training_error_curve(&training, design, &union)?;
            let at = |k: usize| curve[union.binary_search(&k).expect("k in union")];
            let grid = k_grid.iter().map(|&k| at(k)).collect();
            let chosen_err = chosen.iter().map(|&k| at(k)).collect();
            Ok((grid, chosen, chosen_err))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = RowCurves {
        k_grid: k_grid.to_vec(),
        grid_errors: Vec::with_capacity(per_set.len()),
        chosen_k: Vec::with_capacity(per_set.len()),
        chosen_errors: Vec::with_capacity(per_set.len()),
    };
    for (g, k, e) in per_set {
        out.grid_errors.push(g);
        out.chosen_k.push(k);
        out.chosen_errors.push(e);
    }
    Ok(out)
}

/// Benchmark-table lines for one row.
pub fn table1_row(config: &ExperimentConfig, index: usize) -> Result<Vec<Table1Record>> {
    let row = &config.rows[index];
    let d = row.dim();
    if d > 2 {
        return Err(ExperimentError::Unsupported(format!(
            "rows[{index}]: Bayes-risk quadrature supports d <= 2, got d = {d}"
        )));
    }
    let pair = row.pair()?;
    let seed = unit_seed(config.seed, index as u64);
    let bayes = row_bayes_risk(config, row)?;
    let design = design_for(config, &pair, seed)?;
    let k_grid = config.k_grid_for(row, row.mu, row.nu);
    let plans = config.bootstrap.as_ref().map(|b| b.plans()).unwrap_or_default();
    let plan = McPlan {
        n_sets: config.n_training_sets,
        seed,
        model: config.model,
    };
    let curves = row_curves(&pair, &design, &k_grid, plan, &plans)?;
    let grid = curves.grid_estimates();
    let best = argmin_first(grid.iter().map(|e| e.err)).expect("nonempty grid");

    let record = |method: &str, r: Option<f64>, est: ErrorEstimate, k_mean: f64| Table1Record {
        row: index,
        label: row.label.clone().unwrap_or_default(),
        d,
        mu: row.mu,
        nu: row.nu,
        correlation: row.correlation(),
        bayes,
        method: method.to_string(),
        r,
        k: est.k,
        k_mean,
        err: est.err,
        se: est.se,
        n_sets: est.n_replicates,
        master_seed: config.seed,
        stream: index as u64,
        config_hash: config.hash(),
    };
    let mut out = vec![record("k_opt", None, grid[best], grid[best].k as f64)];
    for (ri, p) in plans.iter().enumerate() {
        let (est, k_mean) = curves.chosen_estimate(ri);
        out.push(record("k_tilde", Some(p.r), est, k_mean));
    }
    Ok(out)
}

pub fn run_table1(config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<Vec<Table1Record>> {
    config.validate()?;
    run_units(config.rows.len(), checkpoint, |unit| table1_row(config, unit))
}

pub fn table1_schema() -> Table {
    Table::new(
        "nnorder-table1",
        &[
            ("row", CellKind::Int),
            ("label", CellKind::Text),
            ("d", CellKind::Int),
            ("mu", CellKind::Real),
            ("nu", CellKind::Real),
            ("correlation", CellKind::Real),
            ("bayes", CellKind::Real),
            ("method", CellKind::Text),
            ("r", CellKind::Real),
            ("k", CellKind::Int),
            ("k_mean", CellKind::Real),
            ("err", CellKind::Real),
            ("se", CellKind::Real),
            ("n_sets", CellKind::Int),
            ("master_seed", CellKind::Text),
            ("stream", CellKind::Int),
            ("config_hash", CellKind::Text),
        ],
    )
}

fn opt_real(v: Option<f64>) -> Cell {
    v.map(Cell::Real).unwrap_or(Cell::Missing)
}

pub fn table1_table(records: &[Table1Record]) -> Table {
    let mut t = table1_schema();
    for r in records {
        t.push(vec![
            Cell::Int(r.row as i64),
            Cell::Text(r.label.clone()),
            Cell::Int(r.d as i64),
            Cell::Real(r.mu),
            Cell::Real(r.nu),
            Cell::Real(r.correlation),
            Cell::Real(r.bayes),
            Cell::Text(r.method.clone()),
            opt_real(r.r),
            Cell::Int(r.k as i64),
            Cell::Real(r.k_mean),
            Cell::Real(r.err),
            Cell::Real(r.se),
            Cell::Int(r.n_sets as i64),
            // u64 seeds can exceed i64
            Cell::Text(r.master_seed.to_string()),
            Cell::Int(r.stream as i64),
            Cell::Text(r.config_hash.clone()),
        ])
        .expect("schema width");
    }
    t
}

/// One (row, level) line of a scaling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub row: usize,
    pub level: usize,
    pub label: String,
    pub d: usize,
    pub mu: f64,
    pub nu: f64,
    pub k_opt: usize,
    pub err: f64,
    pub se: f64,
    /// `k_opt / k_opt` at level 0 of the same row.
    pub ratio: f64,
    /// `(nu / nu_0)^(4/(d+4))`.
    pub theory_ratio: f64,
    /// Minimizer of the regret expansion; absent for d > 2 or a degenerate expansion.
    pub theory_kopt: Option<usize>,
    pub n_sets: usize,
    pub master_seed: u64,
    pub stream: u64,
    pub config_hash: String,
}

fn scaling_unit(config: &ExperimentConfig, unit: usize) -> Result<ScalingRecord> {
    let levels = &config.scaling.as_ref().expect("checked by caller").levels;
    let (ri, li) = (unit / levels.len(), unit % levels.len());
    let row = &config.rows[ri];
    let [mu, nu] = levels[li];
    let pair = row.pair()?.with_intensities(mu, nu)?;
    let d = row.dim();
    // Levels of one row share their seed (common random numbers).
    let seed = unit_seed(config.seed, ri as u64);
    let design = design_for(config, &pair, seed)?;
    let k_grid = config.k_grid_for(row, mu, nu);
    let plan = McPlan {
        n_sets: config.n_training_sets,
        seed,
        model: config.model,
    };
    let curve = replicate_error_curves(&pair, &design, &k_grid, plan)?.estimates();
    let best = curve[argmin_first(curve.iter().map(|e| e.err)).expect("nonempty grid")];
    let theory_kopt = if d <= 2 {
        match expansion_for_pair(&pair, &config.region_for(d), config.quadrature.boundary_resolution)
            .and_then(|rep| theoretical_kopt(&rep, nu, d))
        {
            Ok(k) => Some(k),
            Err(TheoryError::Degenerate | TheoryError::EmptyBoundary) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    Ok(ScalingRecord {
        row: ri,
        level: li,
        label: row.label.clone().unwrap_or_default(),
        d,
        mu,
        nu,
        k_opt: best.k,
        err: best.err,
        se: best.se,
        ratio: 1.0,
        theory_ratio: (nu / levels[0][1]).powf(4.0 / (d as f64 + 4.0)),
        theory_kopt,
        n_sets: best.n_replicates,
        master_seed: config.seed,
        stream: ri as u64,
        config_hash: config.hash(),
    })
}

pub fn run_scaling(config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<Vec<ScalingRecord>> {
    config.validate()?;
    let levels = config
        .scaling
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid {
            field: "scaling".into(),
            message: "a scaling run needs [scaling] levels".into(),
        })?
        .levels
        .len();
    let mut records = run_units(config.rows.len() * levels, checkpoint, |unit| {
        scaling_unit(config, unit).map(|r| vec![r])
    })?;
    for chunk in records.chunks_mut(levels) {
        let base = chunk[0].k_opt as f64;
        for r in chunk.iter_mut() {
            r.ratio = r.k_opt as f64 / base;
        }
    }
    Ok(records)
}

pub fn scaling_schema() -> Table {
    Table::new(
        "nnorder-scaling",
        &[
            ("row", CellKind::Int),
            ("level", CellKind::Int),
            ("label", CellKind::Text),
            ("d", CellKind::Int),
            ("mu", CellKind::Real),
            ("nu", CellKind::Real),
            ("k_opt", CellKind::Int),
            ("err", CellKind::Real),
            ("se", CellKind::Real),
            ("ratio", CellKind::Real),
            ("theory_ratio", CellKind::Real),
            ("theory_kopt", CellKind::Int),
            ("n_sets", CellKind::Int),
            ("master_seed", CellKind::Text),
            ("stream", CellKind::Int),
            ("config_hash", CellKind::Text),
        ],
    )
}

pub fn scaling_table(records: &[ScalingRecord]) -> Table {
    let mut t = scaling_schema();
    for r in records {
        t.push(vec![
            Cell::Int(r.row as i64),
            Cell::Int(r.level as i64),
            Cell::Text(r.label.clone()),
            Cell::Int(r.d as i64),
            Cell::Real(r.mu),
            Cell::Real(r.nu),
            Cell::Int(r.k_opt as i64),
            Cell::Real(r.err),
            Cell::Real(r.se),
            Cell::Real(r.ratio),
            Cell::Real(r.theory_ratio),
            r.theory_kopt.map(|k| Cell::Int(k as i64)).unwrap_or(Cell::Missing),
            Cell::Int(r.n_sets as i64),
            Cell::Text(r.master_seed.to_string()),
            Cell::Int(r.stream as i64),
            Cell::Text(r.config_hash.clone()),
        ])
        .expect("schema width");
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
name = "tiny"
seed = 3
n_training_sets = 4

[quadrature]
resolution = 51
design_resolution = 21

[k_grid]
start = 1
stop = 15

[bootstrap]
r = [0.5]
b = 5

[scaling]
levels = [[20, 20], [20, 20]]

[[rows]]
mu = 20
nu = 20
f = { mean = [-0.5], covariance = [1.0] }
g = { mean = [0.5], covariance = [1.0] }
"#,
        )
        .unwrap()
    }

    #[test]
    fn table1_lines_and_determinism() {
        let cfg = tiny();
        let a = run_table1(&cfg, None).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].method, "k_opt");
        assert_eq!(a[1].r, Some(0.5));
        assert!((a[0].bayes - 0.3072).abs() < 5e-4);
        let b = run_table1(&cfg, None).unwrap();
        assert_eq!(table1_table(&a).to_csv(), table1_table(&b).to_csv());
    }

    #[test]
    fn identical_levels_give_unit_ratio() {
        let recs = run_scaling(&tiny(), None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].ratio, 1.0);
        assert_eq!(recs[1].theory_ratio, 1.0);
        // symmetric pair: expansion is degenerate
        assert_eq!(recs[0].theory_kopt, None);
    }

    #[test]
    fn checkpoint_resumes_without_recomputing() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let cp = Checkpoint::new(dir.path().join("cp.jsonl"), &cfg);
        let first = run_table1(&cfg, Some(&cp)).unwrap();
        let mut calls = 0;
        let again: Vec<Table1Record> = run_units(1, Some(&cp), |_| {
            calls += 1;
            Ok(Vec::new())
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(again, first);

        let mut other = cfg.clone();
        other.seed = 4;
        let cp2 = Checkpoint::new(cp.path(), &other);
        assert!(cp2.load::<Table1Record>().unwrap().is_empty());
    }
}
