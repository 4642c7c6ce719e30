//! Bootstrap choice of the neighbor order.
//!
//! Given training samples of sizes `M` (type X) and `N` (type Y):
//!
//! 1. draw resample sizes `M*`, `N*` from the sample-size model and set
//!    `M1* = [r M*]`, `N1* = [r N*]`;
//! 2. resample `M1*` X points and `N1*` Y points with replacement as a
//!    training set, and `M* - M1*`, `N* - N1*` points as a test set. By
//!    default test points come from the originals not picked for training:
//!    a test point identical to a training point is always classified
//!    correctly at k = 1, which drags the selected k towards 1;
//! 3. classify the test set with the k-NN rule for every k in the grid;
//! 4. average the pooled test error over `B` such resample pairs, take the
//!    minimizing `k_hat`, and rescale it to the full sample as
//!    `k_tilde = r^(-4/(d+4)) k_hat`.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{self, IndexKind, KnnError, NeighborIndex, QueryScratch};
use crate::risk::argmin_first;
use crate::sampling::{sample_poisson_count, split_stream, Label, RngStream, SampleModel, TrainingSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("resampling fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("number of resample pairs must be positive")]
    NoResamples,
    #[error("both samples need at least one point (M = {m}, N = {n})")]
    EmptySample { m: usize, n: usize },
    #[error("samples have inconsistent dimensions")]
    Dimension,
    #[error("k grid must be a nonempty, strictly increasing list of positive integers")]
    InvalidKGrid,
    #[error("no usable resample sizes after {tries} draws (M = {m}, N = {n}, r = {r})")]
    DegenerateResample {
        m: usize,
        n: usize,
        r: f64,
        tries: usize,
    },
    #[error("out-of-bag test resample has nothing to draw from")]
    EmptyComplement,
    #[error("error curve is empty")]
    EmptyCurve,
    #[error(transparent)]
    Knn(#[from] KnnError),
}

pub type Result<T> = std::result::Result<T, SelectError>;

/// Retry budget for degenerate resample-size draws.
pub const MAX_SIZE_DRAWS: usize = 1000;
/// Upper limit of the default k grid.
pub const DEFAULT_K_CAP: usize = 512;
/// The default k grid spans `1..=ceil(DEFAULT_K_FRACTION * min training resample)`.
pub const DEFAULT_K_FRACTION: f64 = 0.8;

/// Where test resamples are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestResampling {
    /// From the full original samples, independently of the training resample.
    Independent,
    /// From the original points not picked for the training resample.
    #[default]
    OutOfBag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub r: f64,
    pub b: usize,
    /// `None` selects the default grid from the drawn resample sizes.
    pub k_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub test_resampling: TestResampling,
}

impl BootstrapPlan {
    pub fn new(r: f64, b: usize) -> Result<Self> {
        let plan = Self {
            r,
            b,
            k_grid: None,
            test_resampling: TestResampling::OutOfBag,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_k_grid(mut self, k_grid: Vec<usize>) -> Result<Self> {
        self.k_grid = Some(k_grid);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(SelectError::InvalidFraction(self.r));
        }
        if self.b == 0 {
            return Err(SelectError::NoResamples);
        }
        if let Some(grid) = &self.k_grid {
            if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SelectError::InvalidKGrid);
            }
        }
        Ok(())
    }
}

/// `(M*, N*, M1*, N1*)` for one resample pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleSizes {
    pub m_star: usize,
    pub n_star: usize,
    pub m1: usize,
    pub n1: usize,
}

impl ResampleSizes {
    pub fn from_totals(m_star: usize, n_star: usize, r: f64) -> Self {
        Self {
            m_star,
            n_star,
            m1: integer_part(r * m_star as f64),
            n1: integer_part(r * n_star as f64),
        }
    }

    pub fn train_len(&self) -> usize {
        self.m1 + self.n1
    }

    pub fn test_m(&self) -> usize {
        self.m_star - self.m1
    }

    pub fn test_n(&self) -> usize {
        self.n_star - self.n1
    }

    pub fn test_len(&self) -> usize {
        self.test_m() + self.test_n()
    }

    fn is_usable(&self) -> bool {
        self.m1 > 0 && self.n1 > 0 && self.test_len() > 0
    }
}

/// `[x]`, tolerant of the representation error in products like `3 * (1/3)`.
fn integer_part(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

fn draw_sizes(
    m: usize,
    n: usize,
    r: f64,
    rng: &mut RngStream,
    mut totals: impl FnMut(&mut RngStream) -> (usize, usize),
) -> Result<ResampleSizes> {
    if !(r > 0.0 && r < 1.0) {
        return Err(SelectError::InvalidFraction(r));
    }
    for _ in 0..MAX_SIZE_DRAWS {
        let (m_star, n_star) = totals(rng);
        let sizes = ResampleSizes::from_totals(m_star, n_star, r);
        if sizes.is_usable() {
            return Ok(sizes);
        }
    }
    Err(SelectError::DegenerateResample {
        m,
        n,
        r,
        tries: MAX_SIZE_DRAWS,
    })
}

/// `M* ~ Poisson(M)`, `N* ~ Poisson(N)`; redrawn while `M1*`, `N1*` or the
/// test size is zero.
pub fn resample_sizes_poisson(m: usize, n: usize, r: f64, rng: &mut RngStream) -> Result<ResampleSizes> {
    if m == 0 || n == 0 {
        return Err(SelectError::EmptySample { m, n });
    }
    draw_sizes(m, n, r, rng, |rng| {
        (
            sample_poisson_count(m as f64, rng) as usize,
            sample_poisson_count(n as f64, rng) as usize,
        )
    })
}

/// `M* ~ Binomial(M + N, M / (M + N))`, `N* = M + N - M*`.
pub fn resample_sizes_binomial(m: usize, n: usize, r: f64, rng: &mut RngStream) -> Result<ResampleSizes> {
    if m + n < 2 || m == 0 || n == 0 {
        return Err(SelectError::EmptySample { m, n });
    }
    let total = (m + n) as u64;
    let binom = Binomial::new(total, m as f64 / total as f64).expect("valid binomial parameters");
    draw_sizes(m, n, r, rng, |rng| {
        let m_star = binom.sample(rng) as usize;
        (m_star, m + n - m_star)
    })
}

fn resample_sizes(model: SampleModel, m: usize, n: usize, r: f64, rng: &mut RngStream) -> Result<ResampleSizes> {
    match model {
        SampleModel::Poisson => resample_sizes_poisson(m, n, r, rng),
        SampleModel::Binomial => resample_sizes_binomial(m, n, r, rng),
    }
}

/// Original samples for the bootstrap, stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dim: usize,
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
            return Err(SelectError::Dimension);
        }
        let s = Self { x, y, dim };
        if s.m() == 0 || s.n() == 0 {
            return Err(SelectError::EmptySample { m: s.m(), n: s.n() });
        }
        Ok(s)
    }

    pub fn m(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn n(&self) -> usize {
        self.y.len() / self.dim
    }
}

/// Default grid `1..=ceil(0.8 * smallest training resample)`, capped.
pub fn default_k_grid(sizes: &[ResampleSizes]) -> Vec<usize> {
    let min_train = sizes.iter().map(|s| s.train_len()).min().unwrap_or(1);
    let k_max = ((DEFAULT_K_FRACTION * min_train as f64).ceil() as usize)
        .clamp(1, DEFAULT_K_CAP)
        .min(min_train);
    (1..=k_max).collect()
}

fn pick_with_replacement(
    source: &[f64],
    dim: usize,
    count: usize,
    pool: Option<&[usize]>,
    rng: &mut RngStream,
    out: &mut Vec<f64>,
    taken: Option<&mut Vec<bool>>,
) {
    let len = pool.map_or(source.len() / dim, |p| p.len());
    let mut taken = taken;
    for _ in 0..count {
        let j = rng.random_range(0..len);
        let i = pool.map_or(j, |p| p[j]);
        out.extend_from_slice(&source[i * dim..(i + 1) * dim]);
        if let Some(t) = taken.as_deref_mut() {
            t[i] = true;
        }
    }
}

/// Misclassification rate of one resample pair at every k of the grid.
fn pair_error_curve(
    samples: Samples<'_>,
    sizes: ResampleSizes,
    k_grid: &[usize],
    mode: TestResampling,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let d = samples.dim;
    let mut train = Vec::with_capacity(sizes.train_len() * d);
    let mut used_x = vec![false; samples.m()];
    let mut used_y = vec![false; samples.n()];
    let oob = mode == TestResampling::OutOfBag;
    pick_with_replacement(samples.x, d, sizes.m1, None, rng, &mut train, oob.then_some(&mut used_x));
    pick_with_replacement(samples.y, d, sizes.n1, None, rng, &mut train, oob.then_some(&mut used_y));
    let mut labels = vec![Label::X; sizes.m1];
    labels.resize(sizes.train_len(), Label::Y);

    let mut test_x = Vec::with_capacity(sizes.test_m() * d);
    let mut test_y = Vec::with_capacity(sizes.test_n() * d);
    match mode {
        TestResampling::Independent => {
            pick_with_replacement(samples.x, d, sizes.test_m(), None, rng, &mut test_x, None);
            pick_with_replacement(samples.y, d, sizes.test_n(), None, rng, &mut test_y, None);
        }
        TestResampling::OutOfBag => {
            let pool_x: Vec<usize> = (0..samples.m()).filter(|&i| !used_x[i]).collect();
            let pool_y: Vec<usize> = (0..samples.n()).filter(|&i| !used_y[i]).collect();
            if (sizes.test_m() > 0 && pool_x.is_empty()) || (sizes.test_n() > 0 && pool_y.is_empty()) {
                return Err(SelectError::EmptyComplement);
            }
            pick_with_replacement(samples.x, d, sizes.test_m(), Some(&pool_x), rng, &mut test_x, None);
            pick_with_replacement(samples.y, d, sizes.test_n(), Some(&pool_y), rng, &mut test_y, None);
        }
    }

    let k_max = *k_grid.last().expect("nonempty grid");
    let kind = IndexKind::suggest(sizes.train_len(), k_max, d);
    let index = NeighborIndex::build(&train, d, kind)?;
    let mut scratch = QueryScratch::default();
    let mut votes = Vec::with_capacity(k_max);
    let mut wrong = vec![0usize; k_grid.len()];
    for (points, truth) in [(&test_x, Label::X), (&test_y, Label::Y)] {
        for z in points.chunks_exact(d) {
            let neighbors = index.query_into(z, k_max, &mut scratch)?;
            knn::cumulative_x_votes(neighbors, &labels, &mut votes);
            for (slot, &k) in wrong.iter_mut().zip(k_grid) {
                let says_x = knn::majority_is_x(votes[k - 1] as usize, k);
                if says_x != (truth == Label::X) {
                    *slot += 1;
                }
            }
        }
    }
    let total = sizes.test_len() as f64;
    Ok(wrong.into_iter().map(|w| w as f64 / total).collect())
}

/// Sizes for pair `b`, drawn first on stream `b`. When a grid is fixed,
/// pairs whose training resample is smaller than its largest k are
/// redrawn on the same stream.
fn pair_sizes(
    samples: Samples<'_>,
    plan: &BootstrapPlan,
    model: SampleModel,
    rng: &mut RngStream,
) -> Result<ResampleSizes> {
    let k_max = plan.k_grid.as_ref().and_then(|g| g.last().copied()).unwrap_or(1);
    for _ in 0..MAX_SIZE_DRAWS {
        let sizes = resample_sizes(model, samples.m(), samples.n(), plan.r, rng)?;
        if sizes.train_len() >= k_max {
            return Ok(sizes);
        }
    }
    Err(SelectError::DegenerateResample {
        m: samples.m(),
        n: samples.n(),
        r: plan.r,
        tries: MAX_SIZE_DRAWS,
    })
}

/// Mean bootstrap error at every k of the grid, `[(k, mean error)]`.
/// Pair `b` uses `split_stream(seed, b)`.
pub fn bootstrap_error_curve(
    samples: Samples<'_>,
    plan: &BootstrapPlan,
    model: SampleModel,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    plan.validate()?;
    let sizes = (0..plan.b as u64)
        .map(|b| pair_sizes(samples, plan, model, &mut split_stream(seed, b)))
        .collect::<Result<Vec<_>>>()?;
    let k_grid = match &plan.k_grid {
        Some(g) => g.clone(),
        None => default_k_grid(&sizes),
    };
    let curves = (0..plan.b as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = split_stream(seed, b);
            let s = pair_sizes(samples, plan, model, &mut rng)?;
            debug_assert_eq!(s, sizes[b as usize]);
            pair_error_curve(samples, s, &k_grid, plan.test_resampling, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(k_grid
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mean = curves.iter().map(|c| c[j]).sum::<f64>() / plan.b as f64;
            (k, mean)
        })
        .collect())
}

/// Minimizer of the curve; ties go to the smallest k.
pub fn select_k(curve: &[(usize, f64)]) -> Result<usize> {
    argmin_first(curve.iter().map(|c| c.1))
        .map(|i| curve[i].0)
        .ok_or(SelectError::EmptyCurve)
}

/// Real-valued rescaling `r^(-4/(d+4)) k_hat`.
pub fn rescale_factor(r: f64, d: usize) -> f64 {
    r.powf(-4.0 / (d as f64 + 4.0))
}

/// `round(r^(-4/(d+4)) k_hat)`, clamped to `[1, total - 1]`.
pub fn rescale_k(k_hat: usize, r: f64, d: usize, total: usize) -> usize {
    assert!(r > 0.0 && r <= 1.0, "resampling fraction must lie in (0, 1]");
    let k = (rescale_factor(r, d) * k_hat as f64).round() as usize;
    k.clamp(1, total.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k_hat: usize,
    pub k_tilde: usize,
    pub r: f64,
    pub b: usize,
    pub error_curve: Vec<(usize, f64)>,
}

/// Curve, selection and rescaling in one call.
pub fn select_k_bootstrap(
    samples: Samples<'_>,
    plan: &BootstrapPlan,
    model: SampleModel,
    seed: u64,
) -> Result<SelectionResult> {
    let error_curve = bootstrap_error_curve(samples, plan, model, seed)?;
    let k_hat = select_k(&error_curve)?;
    let total = samples.m() + samples.n();
    Ok(SelectionResult {
        k_hat,
        k_tilde: rescale_k(k_hat, plan.r, samples.dim, total),
        r: plan.r,
        b: plan.b,
        error_curve,
    })
}

/// Runs the selection on a labeled training set.
pub fn select_k_for_training(
    training: &TrainingSet,
    plan: &BootstrapPlan,
    seed: u64,
) -> Result<SelectionResult> {
    let (x, y) = training.split_by_label();
    let samples = Samples::new(&x, &y, training.dim())?;
    select_k_bootstrap(samples, plan, training.model(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_part_examples() {
        let s = ResampleSizes::from_totals(101, 3, 0.5);
        assert_eq!((s.m1, s.test_m()), (50, 51));
        let s = ResampleSizes::from_totals(3, 300, 1.0 / 3.0);
        assert_eq!((s.m1, s.test_m()), (1, 2));
        assert_eq!((s.n1, s.test_n()), (100, 200));
    }

    #[test]
    fn poisson_sizes_mean() {
        let mut rng = split_stream(17, 0);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| resample_sizes_poisson(100, 100, 0.5, &mut rng).unwrap().m_star)
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 100.0).abs() < 0.3, "mean M* = {mean}");
    }

    #[test]
    fn binomial_sizes() {
        let mut rng = split_stream(18, 0);
        let n = 10_000;
        let mut total = 0usize;
        for _ in 0..n {
            let s = resample_sizes_binomial(100, 200, 1.0 / 3.0, &mut rng).unwrap();
            assert_eq!(s.m_star + s.n_star, 300);
            total += s.m_star;
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 100.0).abs() < 0.25, "mean M* = {mean}");
        let mut total = 0usize;
        for _ in 0..n {
            total += resample_sizes_binomial(150, 150, 0.5, &mut rng).unwrap().m_star;
        }
        assert!((total as f64 / n as f64 - 150.0).abs() < 3.0 * (75.0 / n as f64).sqrt());
    }

    #[test]
    fn degenerate_sizes_error() {
        let mut rng = split_stream(1, 0);
        // r * M* < 1 for every plausible M* ~ Poisson(1) at r = 0.01
        assert!(matches!(
            resample_sizes_poisson(1, 1, 0.01, &mut rng),
            Err(SelectError::DegenerateResample { .. })
        ));
        assert!(matches!(
            resample_sizes_poisson(0, 5, 0.5, &mut rng),
            Err(SelectError::EmptySample { .. })
        ));
        assert!(resample_sizes_poisson(5, 5, 1.0, &mut rng).is_err());
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_k(&[(1, 0.3), (3, 0.2), (5, 0.25)]).unwrap(), 3);
        assert_eq!(select_k(&[(1, 0.2), (3, 0.2)]).unwrap(), 1);
        assert_eq!(select_k(&[(2, 0.4), (4, 0.4), (6, 0.4)]).unwrap(), 2);
        assert!(select_k(&[]).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_k(20, 0.5, 2, 1000), 32);
        assert_eq!(rescale_k(40, 1.0 / 3.0, 1, 1000), 96);
        assert_eq!(rescale_k(17, 1.0, 3, 1000), 17);
        assert_eq!(rescale_k(400, 0.5, 2, 300), 299);
        assert_eq!(rescale_k(1, 0.9, 2, 1), 1);
    }

    #[test]
    fn plan_validation() {
        assert!(BootstrapPlan::new(0.0, 10).is_err());
        assert!(BootstrapPlan::new(1.0, 10).is_err());
        assert!(BootstrapPlan::new(0.5, 0).is_err());
        assert!(BootstrapPlan::new(0.5, 3).unwrap().with_k_grid(vec![3, 2]).is_err());
    }

    #[test]
    fn coincident_points_give_half_error() {
        // one X and one Y at the same location: every neighbor list is
        // ordered by resample index, so with k = 1 the rule answers X iff
        // the first training point (always an X copy) is nearest.
        let x = [0.0];
        let y = [0.0];
        let samples = Samples::new(&x, &y, 1).unwrap();
        let mut plan = BootstrapPlan::new(0.5, 400).unwrap().with_k_grid(vec![1]).unwrap();
        // a single original point per class leaves no out-of-bag pool
        plan.test_resampling = TestResampling::Independent;
        let curve = bootstrap_error_curve(samples, &plan, SampleModel::Poisson, 3).unwrap();
        // every test point is classified X: error = test Y share, ~1/2
        assert!((curve[0].1 - 0.5).abs() < 0.05, "error {}", curve[0].1);
    }

    #[test]
    fn separated_clusters_zero_error() {
        let mut rng = split_stream(2, 0);
        let x: Vec<f64> = (0..60).map(|_| -10.0 + rng.standard_normal()).collect();
        let y: Vec<f64> = (0..60).map(|_| 10.0 + rng.standard_normal()).collect();
        let samples = Samples::new(&x, &y, 1).unwrap();
        let plan = BootstrapPlan::new(0.5, 20).unwrap().with_k_grid(vec![1, 5, 11, 21]).unwrap();
        let curve = bootstrap_error_curve(samples, &plan, SampleModel::Poisson, 4).unwrap();
        assert!(curve.iter().all(|(_, e)| *e == 0.0));
    }

    #[test]
    fn deterministic_and_bounded() {
        let mut rng = split_stream(3, 0);
        let x: Vec<f64> = (0..80).map(|_| -0.5 + rng.standard_normal()).collect();
        let y: Vec<f64> = (0..90).map(|_| 0.5 + rng.standard_normal()).collect();
        let samples = Samples::new(&x, &y, 1).unwrap();
        let plan = BootstrapPlan::new(1.0 / 3.0, 1).unwrap();
        let a = select_k_bootstrap(samples, &plan, SampleModel::Poisson, 9).unwrap();
        let b = select_k_bootstrap(samples, &plan, SampleModel::Poisson, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.error_curve.iter().all(|(_, e)| (0.0..=1.0).contains(e)));
        let plan = BootstrapPlan { test_resampling: TestResampling::Independent, ..BootstrapPlan::new(0.5, 10).unwrap() };
        let c = select_k_bootstrap(samples, &plan, SampleModel::Binomial, 9).unwrap();
        assert!(c.error_curve.iter().all(|(_, e)| (0.0..=1.0).contains(e)));
        assert_eq!(c.k_tilde, rescale_k(c.k_hat, 0.5, 1, 170));
    }

    #[test]
    fn default_grid_bounds() {
        let sizes = [
            ResampleSizes::from_totals(100, 100, 1.0 / 3.0),
            ResampleSizes::from_totals(90, 95, 1.0 / 3.0),
        ];
        let g = default_k_grid(&sizes);
        assert_eq!(g.len(), (0.8f64 * 61.0).ceil() as usize);
        let big = [ResampleSizes::from_totals(5000, 5000, 0.5)];
        assert_eq!(default_k_grid(&big).len(), DEFAULT_K_CAP);
    }
}
