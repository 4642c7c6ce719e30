//! Bayes risk by quadrature and Monte Carlo error rates of the k-NN rule.
//!
//! The estimated error rate of a rule over a region `R` is
//!
//! ```text
//! Err = p ∫_R f (1 - P(X | z)) dz + (1 - p) ∫_R g P(X | z) dz
//! ```
//!
//! where `P(X | z)` is the fraction of simulated training sets whose rule
//! sends `z` to X. The integral is discretized by an [`ErrorDesign`]: a set
//! of evaluation points carrying an f-weight and a g-weight, so that
//! `Err = Σ f_w (1 - P) + g_w P`. Because this is linear in `P`, each
//! training replicate contributes its own error curve and the estimate is
//! their mean.
//!
//! Every replicate `s` is generated from `split_stream(seed, s)`; the same
//! replicates serve every `k` in a grid (common random numbers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{DensityError, PopulationPair, Region};
use crate::knn::{self, IndexKind, KnnError, NeighborIndex, QueryScratch};
use crate::sampling::{draw_training, split_stream, Label, RngStream, SampleModel, TrainingSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("k grid must be a nonempty, strictly increasing list of positive integers")]
    InvalidKGrid,
    #[error("number of training sets must be positive")]
    NoReplicates,
    #[error("replicate {index}: no training set with at least {needed} points after {tries} draws")]
    InsufficientReplicate {
        index: u64,
        needed: usize,
        tries: usize,
    },
    #[error("quadrature: {0}")]
    Quadrature(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, RiskError>;

/// Redraw budget for replicates that come out smaller than the largest k.
pub const MAX_REDRAWS: usize = 1000;

const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Bayes rule: X iff `psi(z) >= 1/2`.
pub fn bayes_classify(pair: &PopulationPair, z: &[f64]) -> Label {
    if pair.psi(z) >= 0.5 {
        Label::X
    } else {
        Label::Y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    /// Composite Simpson on an odd number of nodes (d = 1).
    Simpson,
    /// Tensor midpoint rule, `resolution` cells per axis.
    Midpoint,
}

/// Nodes and volume weights over a region.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    region: Region,
    rule: QuadratureRule,
    resolution: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Composite Simpson in one dimension; `n` must be odd and at least 3.
    pub fn simpson(region: &Region, n: usize) -> Result<Self> {
        if region.dim() != 1 {
            return Err(RiskError::Quadrature("Simpson rule is one-dimensional".into()));
        }
        if n < 3 || n % 2 == 0 {
            return Err(RiskError::Quadrature(format!(
                "Simpson rule needs an odd node count >= 3, got {n}"
            )));
        }
        let (lo, hi) = (region.lower()[0], region.upper()[0]);
        let h = (hi - lo) / (n - 1) as f64;
        let nodes = (0..n).map(|i| lo + h * i as f64).collect();
        let weights = (0..n)
            .map(|i| {
                let c = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect();
        Ok(Self {
            region: region.clone(),
            rule: QuadratureRule::Simpson,
            resolution: n,
            nodes,
            weights,
        })
    }

    /// Tensor midpoint rule with `n` cells per axis (`n^d` nodes).
    pub fn midpoint(region: &Region, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(RiskError::Quadrature("midpoint rule needs n >= 1".into()));
        }
        let d = region.dim();
        let total = n
            .checked_pow(d as u32)
            .filter(|t| *t <= 50_000_000)
            .ok_or_else(|| RiskError::Quadrature(format!("{n}^{d} nodes is too many")))?;
        let h: Vec<f64> = (0..d)
            .map(|j| (region.upper()[j] - region.lower()[j]) / n as f64)
            .collect();
        let w: f64 = h.iter().product();
        let mut nodes = Vec::with_capacity(total * d);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            // first coordinate varies slowest
            for j in 0..d {
                nodes.push(region.lower()[j] + h[j] * (idx[j] as f64 + 0.5));
            }
            for j in (0..d).rev() {
                idx[j] += 1;
                if idx[j] < n {
                    break;
                }
                idx[j] = 0;
            }
        }
        Ok(Self {
            region: region.clone(),
            rule: QuadratureRule::Midpoint,
            resolution: n,
            nodes,
            weights: vec![w; total],
        })
    }

    /// Simpson for d = 1, midpoint for d = 2. Higher dimensions have no
    /// grid; use [`ErrorDesign::monte_carlo`] there.
    pub fn standard(region: &Region, resolution: usize) -> Result<Self> {
        match region.dim() {
            1 => Self::simpson(region, resolution | 1),
            2 => Self::midpoint(region, resolution),
            d => Err(RiskError::Quadrature(format!(
                "no grid rule for d = {d}; use a Monte Carlo design"
            ))),
        }
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.nodes[i * d..(i + 1) * d]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Node coordinates along one axis (tensor grids share them).
    fn axis_nodes(&self, axis: usize) -> Vec<f64> {
        let lo = self.region.lower()[axis];
        let hi = self.region.upper()[axis];
        let n = self.resolution;
        match self.rule {
            QuadratureRule::Simpson => {
                let h = (hi - lo) / (n - 1) as f64;
                (0..n).map(|i| lo + h * i as f64).collect()
            }
            QuadratureRule::Midpoint => {
                let h = (hi - lo) / n as f64;
                (0..=n).map(|i| lo + h * i as f64).collect()
            }
        }
    }
}

fn gl_panel(a: f64, b: f64, mut func: impl FnMut(f64) -> f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
        s += w * (func(c - r * x) + func(c + r * x));
    }
    s * r
}

/// Integral of `func` over `[breaks[0], breaks[last]]`, with each panel
/// between consecutive breaks further split at sign changes of `sign_fn`.
fn kink_split_line(
    breaks: &[f64],
    mut sign_fn: impl FnMut(f64) -> f64,
    mut func: impl FnMut(f64) -> f64,
) -> f64 {
    let mut total = 0.0;
    let mut prev = sign_fn(breaks[0]);
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let next = sign_fn(b);
        if prev * next < 0.0 {
            let (mut lo, mut hi, mut f_lo) = (a, b, prev);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let fm = sign_fn(mid);
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (fm < 0.0) == (f_lo < 0.0) {
                    lo = mid;
                    f_lo = fm;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            total += gl_panel(a, root, &mut func) + gl_panel(root, b, &mut func);
        } else {
            total += gl_panel(a, b, &mut func);
        }
        prev = next;
    }
    total
}

/// `∫_R min(mu f, nu g) / (mu + nu)`.
///
/// For d ≤ 2 the integral is iterated along the grid axes, each line
/// integral split where `mu f - nu g` changes sign and integrated with
/// 8-point Gauss–Legendre between consecutive grid nodes. For d ≥ 3 the
/// grid weights are used directly.
pub fn bayes_risk(pair: &PopulationPair, grid: &QuadratureGrid) -> Result<f64> {
    if pair.dim() != grid.dim() {
        return Err(RiskError::DimensionMismatch {
            expected: pair.dim(),
            got: grid.dim(),
        });
    }
    let (mu, nu) = (pair.mu(), pair.nu());
    let total = mu + nu;
    let integrand = |z: &[f64]| (mu * pair.f().pdf(z)).min(nu * pair.g().pdf(z)) / total;
    let diff = |z: &[f64]| mu * pair.f().pdf(z) - nu * pair.g().pdf(z);
    match grid.dim() {
        1 => {
            let breaks = grid.axis_nodes(0);
            Ok(kink_split_line(&breaks, |t| diff(&[t]), |t| integrand(&[t])))
        }
        2 => {
            let b0 = grid.axis_nodes(0);
            let b1 = grid.axis_nodes(1);
            let inner = |y: f64| {
                kink_split_line(&b0, |t| diff(&[t, y]), |t| integrand(&[t, y]))
            };
            let rows: Vec<f64> = b1
                .windows(2)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|w| gl_panel(w[0], w[1], inner))
                .collect();
            Ok(rows.iter().sum())
        }
        _ => Ok(grid
            .weights()
            .iter()
            .enumerate()
            .map(|(i, w)| w * integrand(grid.node(i)))
            .sum()),
    }
}

/// Evaluation points with the f- and g-weights of the error integral.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDesign {
    dim: usize,
    nodes: Vec<f64>,
    f_weights: Vec<f64>,
    g_weights: Vec<f64>,
}

impl ErrorDesign {
    /// Quadrature design: `f_w = p w f(z)`, `g_w = (1 - p) w g(z)`.
    pub fn from_grid(pair: &PopulationPair, grid: &QuadratureGrid) -> Result<Self> {
        if pair.dim() != grid.dim() {
            return Err(RiskError::DimensionMismatch {
                expected: pair.dim(),
                got: grid.dim(),
            });
        }
        let p = pair.p();
        let mut f_weights = Vec::with_capacity(grid.len());
        let mut g_weights = Vec::with_capacity(grid.len());
        for (i, w) in grid.weights().iter().enumerate() {
            let z = grid.node(i);
            f_weights.push(p * w * pair.f().pdf(z));
            g_weights.push((1.0 - p) * w * pair.g().pdf(z));
        }
        Ok(Self {
            dim: grid.dim(),
            nodes: grid.nodes().to_vec(),
            f_weights,
            g_weights,
        })
    }

    /// Monte Carlo design: `n_per_class` test points from each of f and g.
    /// A point from f carries `f_w = p 1{z in R} / n` and no g-weight (and
    /// symmetrically for g), so `Err` becomes a prior-weighted average of
    /// test misclassification over `R`.
    pub fn monte_carlo(
        pair: &PopulationPair,
        region: &Region,
        n_per_class: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if pair.dim() != region.dim() {
            return Err(RiskError::DimensionMismatch {
                expected: pair.dim(),
                got: region.dim(),
            });
        }
        if n_per_class == 0 {
            return Err(RiskError::Quadrature("Monte Carlo design needs test points".into()));
        }
        let d = pair.dim();
        let p = pair.p();
        let mut nodes = Vec::with_capacity(2 * n_per_class * d);
        let mut f_weights = Vec::with_capacity(2 * n_per_class);
        let mut g_weights = Vec::with_capacity(2 * n_per_class);
        let mut z = vec![0.0; d];
        for (spec, weight, is_f) in [(pair.f(), p, true), (pair.g(), 1.0 - p, false)] {
            for _ in 0..n_per_class {
                spec.sample_into(rng, &mut z);
                if !region.contains(&z) {
                    continue;
                }
                nodes.extend_from_slice(&z);
                let w = weight / n_per_class as f64;
                f_weights.push(if is_f { w } else { 0.0 });
                g_weights.push(if is_f { 0.0 } else { w });
            }
        }
        Ok(Self {
            dim: d,
            nodes,
            f_weights,
            g_weights,
        })
    }

    /// Grid design for d ≤ 2, Monte Carlo design above.
    pub fn for_region(
        pair: &PopulationPair,
        region: &Region,
        resolution: usize,
        mc_points_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if region.dim() <= 2 {
            let grid = QuadratureGrid::standard(region, resolution)?;
            Self::from_grid(pair, &grid)
        } else {
            // stream index far from the replicate streams
            let mut rng = split_stream(seed, u64::MAX);
            Self::monte_carlo(pair, region, mc_points_per_class, &mut rng)
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.f_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn f_weights(&self) -> &[f64] {
        &self.f_weights
    }

    pub fn g_weights(&self) -> &[f64] {
        &self.g_weights
    }

    /// `Σ f_w (1 - P) + g_w P` for a classification-probability field `P`.
    pub fn error_of(&self, mut prob_x: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| {
                let p = prob_x(self.node(i));
                self.f_weights[i] * (1.0 - p) + self.g_weights[i] * p
            })
            .sum()
    }
}

/// Estimated error rate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub k: usize,
    pub err: f64,
    pub se: f64,
    pub n_replicates: usize,
}

impl ErrorEstimate {
    pub fn new(k: usize, err: f64, n_replicates: usize) -> Self {
        let e = err.clamp(0.0, 1.0);
        Self {
            k,
            err,
            se: (e * (1.0 - e) / n_replicates as f64).sqrt(),
            n_replicates,
        }
    }
}

/// Replicate settings shared by the Monte Carlo estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McPlan {
    pub n_sets: usize,
    pub seed: u64,
    pub model: SampleModel,
}

impl McPlan {
    pub fn poisson(n_sets: usize, seed: u64) -> Self {
        Self {
            n_sets,
            seed,
            model: SampleModel::Poisson,
        }
    }
}

pub fn validate_k_grid(k_grid: &[usize]) -> Result<()> {
    if k_grid.is_empty() || k_grid[0] == 0 || k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RiskError::InvalidKGrid);
    }
    Ok(())
}

/// Training replicate `index`: drawn from `split_stream(seed, index)` and
/// redrawn (on the same stream) while it has fewer than `min_len` points.
pub fn replicate_training(
    pair: &PopulationPair,
    model: SampleModel,
    seed: u64,
    index: u64,
    min_len: usize,
) -> Result<TrainingSet> {
    let mut rng = split_stream(seed, index);
    for _ in 0..MAX_REDRAWS {
        let set = draw_training(pair, model, &mut rng);
        if set.len() >= min_len.max(1) {
            return Ok(set);
        }
    }
    Err(RiskError::InsufficientReplicate {
        index,
        needed: min_len,
        tries: MAX_REDRAWS,
    })
}

/// Error of one training set's k-NN rule at every k of the grid.
pub fn training_error_curve(
    training: &TrainingSet,
    design: &ErrorDesign,
    k_grid: &[usize],
) -> Result<Vec<f64>> {
    validate_k_grid(k_grid)?;
    if training.dim() != design.dim() {
        return Err(RiskError::DimensionMismatch {
            expected: design.dim(),
            got: training.dim(),
        });
    }
    let k_max = *k_grid.last().expect("validated");
    let kind = IndexKind::suggest(training.len(), k_max, training.dim());
    let index = NeighborIndex::for_training(training, kind)?;
    let labels = training.labels();
    let mut scratch = QueryScratch::default();
    let mut votes = Vec::with_capacity(k_max);
    let mut curve = vec![0.0; k_grid.len()];
    let (fw, gw) = (design.f_weights(), design.g_weights());
    for i in 0..design.len() {
        if fw[i] == 0.0 && gw[i] == 0.0 {
            continue;
        }
        let neighbors = index.query_into(design.node(i), k_max, &mut scratch)?;
        knn::cumulative_x_votes(neighbors, labels, &mut votes);
        for (slot, &k) in curve.iter_mut().zip(k_grid) {
            *slot += if knn::majority_is_x(votes[k - 1] as usize, k) {
                gw[i]
            } else {
                fw[i]
            };
        }
    }
    Ok(curve)
}

/// Per-replicate error curves over a k grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateCurves {
    pub k_grid: Vec<usize>,
    /// `errors[s][j]` is replicate `s`'s error at `k_grid[j]`.
    pub errors: Vec<Vec<f64>>,
    pub plan: McPlan,
}

impl ReplicateCurves {
    pub fn n_sets(&self) -> usize {
        self.errors.len()
    }

    fn position(&self, k: usize) -> Option<usize> {
        self.k_grid.binary_search(&k).ok()
    }

    /// Mean over replicates at one grid position, summed in replicate order.
    fn mean_at(&self, j: usize) -> f64 {
        self.errors.iter().map(|c| c[j]).sum::<f64>() / self.n_sets() as f64
    }

    pub fn estimates(&self) -> Vec<ErrorEstimate> {
        (0..self.k_grid.len())
            .map(|j| ErrorEstimate::new(self.k_grid[j], self.mean_at(j), self.n_sets()))
            .collect()
    }

    pub fn estimate_at(&self, k: usize) -> Option<ErrorEstimate> {
        self.position(k)
            .map(|j| ErrorEstimate::new(k, self.mean_at(j), self.n_sets()))
    }

    /// Error when replicate `s` uses its own `ks[s]` (a data-driven k).
    /// The reported `k` is the rounded mean of the choices.
    pub fn estimate_for_choices(&self, ks: &[usize]) -> Option<ErrorEstimate> {
        if ks.len() != self.n_sets() {
            return None;
        }
        let mut total = 0.0;
        for (curve, &k) in self.errors.iter().zip(ks) {
            total += curve[self.position(k)?];
        }
        let mean_k = ks.iter().sum::<usize>() as f64 / ks.len() as f64;
        Some(ErrorEstimate::new(
            mean_k.round() as usize,
            total / self.n_sets() as f64,
            self.n_sets(),
        ))
    }
}

/// Draws `plan.n_sets` replicates and evaluates each over the grid.
pub fn replicate_error_curves(
    pair: &PopulationPair,
    design: &ErrorDesign,
    k_grid: &[usize],
    plan: McPlan,
) -> Result<ReplicateCurves> {
    validate_k_grid(k_grid)?;
    if plan.n_sets == 0 {
        return Err(RiskError::NoReplicates);
    }
    let k_max = *k_grid.last().expect("validated");
    let errors = (0..plan.n_sets as u64)
        .into_par_iter()
        .map(|s| {
            let training = replicate_training(pair, plan.model, plan.seed, s, k_max)?;
            training_error_curve(&training, design, k_grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateCurves {
        k_grid: k_grid.to_vec(),
        errors,
        plan,
    })
}

/// Fraction of replicates whose k-NN rule classifies `z` as X.
pub fn classification_prob_mc(
    pair: &PopulationPair,
    z: &[f64],
    k: usize,
    plan: McPlan,
) -> Result<f64> {
    if k == 0 {
        return Err(RiskError::InvalidKGrid);
    }
    if plan.n_sets == 0 {
        return Err(RiskError::NoReplicates);
    }
    if z.len() != pair.dim() {
        return Err(RiskError::DimensionMismatch {
            expected: pair.dim(),
            got: z.len(),
        });
    }
    let hits = (0..plan.n_sets as u64)
        .into_par_iter()
        .map(|s| {
            let training = replicate_training(pair, plan.model, plan.seed, s, k)?;
            let kind = IndexKind::suggest(training.len(), k, training.dim());
            let index = NeighborIndex::for_training(&training, kind)?;
            Ok(usize::from(knn::classify_knn(&training, &index, z, k)? == Label::X))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / plan.n_sets as f64)
}

/// Err-hat for a single k.
pub fn error_rate_mc(
    pair: &PopulationPair,
    design: &ErrorDesign,
    k: usize,
    plan: McPlan,
) -> Result<ErrorEstimate> {
    let curves = replicate_error_curves(pair, design, &[k], plan)?;
    Ok(curves.estimates()[0])
}

/// Smallest index of the minimum; ties go to the earlier entry.
pub fn argmin_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Err-hat over the whole grid with shared replicates; returns the
/// minimizing k (smallest on ties) and the curve.
pub fn grid_kopt(
    pair: &PopulationPair,
    design: &ErrorDesign,
    k_grid: &[usize],
    plan: McPlan,
) -> Result<(usize, Vec<ErrorEstimate>)> {
    let curve = replicate_error_curves(pair, design, k_grid, plan)?.estimates();
    let best = argmin_first(curve.iter().map(|e| e.err)).expect("grid is nonempty");
    Ok((curve[best].k, curve))
}
