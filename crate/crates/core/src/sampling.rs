//! Training-set generators for the Poisson and Binomial sample-size models.
//!
//! Under the Poisson model the pooled training set is a marked Poisson
//! process with intensity `mu f + nu g`: the total count is Poisson with mean
//! `mu + nu`, each point is drawn from the mixture density, and each point is
//! marked X with probability `psi(z)`. The Binomial model uses the same
//! marking but fixes the total count.
//!
//! All randomness flows through [`RngStream`], a ChaCha stream addressed by a
//! `(master seed, stream index)` pair, so replicate `r` of an experiment is a
//! pure function of the seed and `r`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::densities::{GaussianSpec, PopulationPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("binomial model needs a positive total count")]
    EmptyBinomial,
    #[error("training set shape mismatch: {points} coordinates for {labels} labels in dimension {dim}")]
    Shape {
        points: usize,
        labels: usize,
        dim: usize,
    },
}

/// Class label of a training point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    X,
    Y,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::X => "X",
            Label::Y => "Y",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "X" | "x" => Ok(Label::X),
            "Y" | "y" => Ok(Label::Y),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// How the total training-sample size is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleModel {
    Poisson,
    Binomial,
}

/// Deterministic random stream keyed by `(master seed, stream index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(index);
        Self {
            rng,
            seed: master_seed,
            index,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn split_stream(master_seed: u64, index: u64) -> RngStream {
    RngStream::new(master_seed, index)
}

/// Derives a child seed from a master seed and a path of tags (SplitMix64
/// finalizer applied per tag). Used to give nested procedures their own
/// seed while staying a pure function of the master seed.
pub fn derive_seed(master_seed: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(master_seed), |acc, &t| {
        mix(acc ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

const INVERSION_LIMIT: f64 = 30.0;

/// Poisson variate: sequential inversion below mean 30, PTRS above.
pub fn sample_poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    assert!(mean > 0.0 && mean.is_finite(), "poisson mean must be positive");
    if mean < INVERSION_LIMIT {
        poisson_inversion(mean, rng)
    } else {
        poisson_ptrs(mean, rng)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let p0 = (-mean).exp();
    loop {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = p0;
        let mut cdf = p0;
        // cdf can saturate just below u when u is within rounding of 1
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        if u <= cdf {
            return k;
        }
    }
}

/// Hörmann's transformed rejection with squeeze.
fn poisson_ptrs<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

impl GaussianSpec {
    /// Writes one draw into `out` as `mean + L eps`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut eps = [0.0f64; 32];
        let mut heap;
        let eps: &mut [f64] = if d <= eps.len() {
            &mut eps[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let l = self.cholesky_lower();
        for i in 0..d {
            let mut s = self.mean()[i];
            for j in 0..=i {
                s += l[i * d + j] * eps[j];
            }
            out[i] = s;
        }
    }
}

/// Labeled point cloud; points are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    points: Vec<f64>,
    dim: usize,
    labels: Vec<Label>,
    model: SampleModel,
    seed: u64,
    stream: u64,
}

impl TrainingSet {
    pub fn new(
        points: Vec<f64>,
        dim: usize,
        labels: Vec<Label>,
        model: SampleModel,
        seed: u64,
        stream: u64,
    ) -> Result<Self, SamplingError> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(SamplingError::Shape {
                points: points.len(),
                labels: labels.len(),
                dim,
            });
        }
        Ok(Self {
            points,
            dim,
            labels,
            model,
            seed,
            stream,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn model(&self) -> SampleModel {
        self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Row-major coordinates of the X points and of the Y points.
    pub fn split_by_label(&self) -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, label) in self.labels.iter().enumerate() {
            match label {
                Label::X => xs.extend_from_slice(self.point(i)),
                Label::Y => ys.extend_from_slice(self.point(i)),
            }
        }
        (xs, ys)
    }
}

/// Draws `count` mixture points marked by `psi`.
fn draw_marked(
    pair: &PopulationPair,
    count: usize,
    model: SampleModel,
    rng: &mut RngStream,
) -> TrainingSet {
    let d = pair.dim();
    let p = pair.p();
    let mut points = vec![0.0; count * d];
    let mut labels = Vec::with_capacity(count);
    for chunk in points.chunks_exact_mut(d) {
        if rng.uniform() < p {
            pair.f().sample_into(rng, chunk);
        } else {
            pair.g().sample_into(rng, chunk);
        }
        let label = if rng.uniform() < pair.psi(chunk) {
            Label::X
        } else {
            Label::Y
        };
        labels.push(label);
    }
    TrainingSet {
        points,
        dim: d,
        labels,
        model,
        seed: rng.seed(),
        stream: rng.index(),
    }
}

/// Poisson-model training set; an empty set is a legal outcome.
pub fn draw_poisson_training(pair: &PopulationPair, rng: &mut RngStream) -> TrainingSet {
    let count = sample_poisson_count(pair.total_intensity(), rng) as usize;
    draw_marked(pair, count, SampleModel::Poisson, rng)
}

/// Poisson-model training set generated the other way round: each point
/// picks its source density with the prior weights and is labeled by it.
pub fn draw_poisson_training_by_source(pair: &PopulationPair, rng: &mut RngStream) -> TrainingSet {
    let count = sample_poisson_count(pair.total_intensity(), rng) as usize;
    let d = pair.dim();
    let p = pair.p();
    let mut points = vec![0.0; count * d];
    let mut labels = Vec::with_capacity(count);
    for chunk in points.chunks_exact_mut(d) {
        if rng.uniform() < p {
            pair.f().sample_into(rng, chunk);
            labels.push(Label::X);
        } else {
            pair.g().sample_into(rng, chunk);
            labels.push(Label::Y);
        }
    }
    TrainingSet {
        points,
        dim: d,
        labels,
        model: SampleModel::Poisson,
        seed: rng.seed(),
        stream: rng.index(),
    }
}

/// Binomial-model training set with exactly `total` points.
pub fn draw_binomial_training(
    pair: &PopulationPair,
    total: usize,
    rng: &mut RngStream,
) -> Result<TrainingSet, SamplingError> {
    if total == 0 {
        return Err(SamplingError::EmptyBinomial);
    }
    Ok(draw_marked(pair, total, SampleModel::Binomial, rng))
}

/// Draws under either model; the Binomial total is `round(mu + nu)`.
pub fn draw_training(pair: &PopulationPair, model: SampleModel, rng: &mut RngStream) -> TrainingSet {
    match model {
        SampleModel::Poisson => draw_poisson_training(pair, rng),
        SampleModel::Binomial => {
            let total = pair.total_intensity().round().max(1.0) as usize;
            draw_marked(pair, total, SampleModel::Binomial, rng)
        }
    }
}
