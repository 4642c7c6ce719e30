//! Decision boundary geometry and the leading terms of the regret expansion.
//!
//! The boundary `S` is the set where `rho = 1/2`, i.e. where `p f = (1 - p) g`.
//! At a boundary point `h` is that common value and
//!
//! ```text
//! a     = || p grad f - (1 - p) grad g || = 4 h ||grad rho||
//! alpha = 1/(d+2) * lambda^(-1-2/d) * a_d^(-2/d) * sum_j (rho_j lambda_j + rho_jj lambda / 2)
//! C1    = 1/2 ∫_S h / ||grad rho||
//! C2    = 2   ∫_S h / ||grad rho|| * alpha^2
//! ```
//!
//! and the regret of the k-NN rule behaves like `C1 / k + C2 (k / nu)^(4/d)`.
//! Boundary extraction is implemented for `d = 1` (root bracketing) and
//! `d = 2` (marching squares).

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::densities::{DensityError, PopulationPair, Region};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("boundary extraction supports d = 1 or d = 2, got d = {0}")]
    UnsupportedDimension(usize),
    #[error("resolution must be at least 2, got {0}")]
    InvalidResolution(usize),
    #[error("region has dimension {region}, populations have dimension {pair}")]
    DimensionMismatch { region: usize, pair: usize },
    #[error("no point with rho = 1/2 inside the region")]
    EmptyBoundary,
    #[error("point is not on the boundary: |rho - 1/2| = {residual:e}")]
    NotOnBoundary { residual: f64 },
    #[error("tangential crossing: ||grad rho|| = {norm:e}")]
    Tangential { norm: f64 },
    #[error("expansion-degenerate: C2 is zero, so the optimal k is undefined")]
    Degenerate,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Bisection stops once the bracket is narrower than this.
pub const BISECTION_TOL: f64 = 1e-10;
/// Largest allowed `|rho - 1/2|` for a point passed to [`local_geometry`].
pub const ON_BOUNDARY_TOL: f64 = 1e-6;
/// Smallest allowed `||grad rho||` on the boundary.
pub const MIN_GRADIENT_NORM: f64 = 1e-8;
/// `C2 < DEGENERACY_RATIO * max(C1, 1)` marks the expansion degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-10;

/// Content of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::PI.powf(h) / gamma(1.0 + h)
}

/// Local quantities at one boundary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGeometry {
    pub h: f64,
    pub rho_dot: Vec<f64>,
    pub psi1: f64,
    pub a: f64,
    pub alpha: f64,
}

impl NodeGeometry {
    pub fn rho_dot_norm(&self) -> f64 {
        norm(&self.rho_dot)
    }
}

/// Quadrature nodes on `S` with their geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    geometry: Vec<NodeGeometry>,
}

impl BoundarySet {
    /// Assemble a boundary from precomputed parts.
    pub fn from_parts(
        dim: usize,
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
        geometry: Vec<NodeGeometry>,
    ) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.len() != geometry.len() {
            return Err(TheoryError::InvalidArgument(format!(
                "{} nodes, {} weights, {} geometry records",
                nodes.len(),
                weights.len(),
                geometry.len()
            )));
        }
        if dim == 0 || nodes.iter().any(|n| n.len() != dim) {
            return Err(TheoryError::InvalidArgument(
                "node dimension does not match".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(TheoryError::InvalidArgument(
                "weights must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            nodes,
            weights,
            geometry,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn geometry(&self) -> &[NodeGeometry] {
        &self.geometry
    }

    /// Total measure of the boundary inside the region.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub c1: f64,
    pub c2: f64,
    pub a_d: f64,
    pub dim: usize,
    pub degenerate: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `rho(z) - 1/2`, computed without cancellation.
pub fn boundary_residual(pair: &PopulationPair, z: &[f64]) -> f64 {
    let p = pair.p();
    let a = p * pair.f().pdf(z);
    let b = (1.0 - p) * pair.g().pdf(z);
    (a - b) / (2.0 * (a + b))
}

fn check_inputs(pair: &PopulationPair, region: &Region, resolution: usize) -> Result<()> {
    if region.dim() != pair.dim() {
        return Err(TheoryError::DimensionMismatch {
            region: region.dim(),
            pair: pair.dim(),
        });
    }
    if resolution < 2 {
        return Err(TheoryError::InvalidResolution(resolution));
    }
    Ok(())
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
        .collect()
}

/// Locate `S` inside `region` and attach the local geometry to every node.
pub fn find_boundary(
    pair: &PopulationPair,
    region: &Region,
    resolution: usize,
) -> Result<BoundarySet> {
    check_inputs(pair, region, resolution)?;
    let (nodes, weights) = match pair.dim() {
        1 => roots_1d(pair, region, resolution)?,
        2 => contour_2d(pair, region, resolution)?,
        d => return Err(TheoryError::UnsupportedDimension(d)),
    };
    if nodes.is_empty() {
        return Err(TheoryError::EmptyBoundary);
    }
    let geometry = nodes
        .iter()
        .map(|z| local_geometry(pair, z))
        .collect::<Result<Vec<_>>>()?;
    BoundarySet::from_parts(pair.dim(), nodes, weights, geometry)
}

fn roots_1d(
    pair: &PopulationPair,
    region: &Region,
    n: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let xs = axis(region.lower()[0], region.upper()[0], n);
    let vals: Vec<f64> = xs.iter().map(|x| boundary_residual(pair, &[*x])).collect();
    let mut roots = Vec::new();
    for i in 0..n - 1 {
        let (s0, s1) = (vals[i] >= 0.0, vals[i + 1] >= 0.0);
        if s0 == s1 {
            continue;
        }
        let (mut lo, mut hi) = (xs[i], xs[i + 1]);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if (boundary_residual(pair, &[mid]) >= 0.0) == s0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut root = vec![0.5 * (lo + hi)];
        project_to_boundary(pair, &mut root)?;
        roots.push(root);
    }
    let weights = vec![1.0; roots.len()];
    Ok((roots, weights))
}

/// Newton steps along the gradient of `rho` until `rho = 1/2`.
fn project_to_boundary(pair: &PopulationPair, z: &mut [f64]) -> Result<()> {
    for _ in 0..50 {
        let r = boundary_residual(pair, z);
        if r.abs() < 1e-14 {
            break;
        }
        let grad = pair.rho(z)?.gradient;
        let g2: f64 = grad.iter().map(|x| x * x).sum();
        if g2 < MIN_GRADIENT_NORM * MIN_GRADIENT_NORM {
            break;
        }
        let mut step = 0.0;
        for (zi, gi) in z.iter_mut().zip(&grad) {
            let delta = r * gi / g2;
            *zi -= delta;
            step += delta * delta;
        }
        if step.sqrt() < 1e-15 {
            break;
        }
    }
    Ok(())
}

fn contour_2d(
    pair: &PopulationPair,
    region: &Region,
    n: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let xs = axis(region.lower()[0], region.upper()[0], n);
    let ys = axis(region.lower()[1], region.upper()[1], n);
    let mut vals = vec![0.0; n * n];
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            vals[i * n + j] = boundary_residual(pair, &[*x, *y]);
        }
    }
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            // Corners counter-clockwise from (i, j).
            let cx = [xs[i], xs[i + 1], xs[i + 1], xs[i]];
            let cy = [ys[j], ys[j], ys[j + 1], ys[j + 1]];
            let cv = [
                vals[i * n + j],
                vals[(i + 1) * n + j],
                vals[(i + 1) * n + j + 1],
                vals[i * n + j + 1],
            ];
            let pos = cv.map(|v| v >= 0.0);
            let mut cross: [Option<[f64; 2]>; 4] = [None; 4];
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if pos[a] != pos[b] {
                    let t = cv[a] / (cv[a] - cv[b]);
                    cross[e] = Some([cx[a] + t * (cx[b] - cx[a]), cy[a] + t * (cy[b] - cy[a])]);
                }
            }
            let hits: Vec<usize> = (0..4).filter(|e| cross[*e].is_some()).collect();
            let pairs: Vec<(usize, usize)> = match hits.len() {
                2 => vec![(hits[0], hits[1])],
                4 => {
                    let centre = 0.25 * cv.iter().sum::<f64>();
                    if (centre >= 0.0) == pos[0] {
                        vec![(0, 1), (2, 3)]
                    } else {
                        vec![(3, 0), (1, 2)]
                    }
                }
                _ => Vec::new(),
            };
            for (e0, e1) in pairs {
                let (p0, p1) = (cross[e0].unwrap(), cross[e1].unwrap());
                let len = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
                if len < 1e-14 {
                    continue;
                }
                let mut mid = vec![0.5 * (p0[0] + p1[0]), 0.5 * (p0[1] + p1[1])];
                project_to_boundary(pair, &mut mid)?;
                nodes.push(mid);
                weights.push(len);
            }
        }
    }
    Ok((nodes, weights))
}

/// Geometry of `S` at a point with `rho(z0) = 1/2`.
pub fn local_geometry(pair: &PopulationPair, z0: &[f64]) -> Result<NodeGeometry> {
    let residual = boundary_residual(pair, z0);
    if !(residual.abs() <= ON_BOUNDARY_TOL) {
        return Err(TheoryError::NotOnBoundary { residual });
    }
    let d = pair.dim();
    let p = pair.p();
    let (fv, fg) = pair.f().pdf_gradient(z0)?;
    let (_, gg) = pair.g().pdf_gradient(z0)?;
    let rho = pair.rho(z0)?;
    let rho_norm = norm(&rho.gradient);
    if !(rho_norm >= MIN_GRADIENT_NORM) {
        return Err(TheoryError::Tangential { norm: rho_norm });
    }
    let h = p * fv;
    let diff: Vec<f64> = fg
        .iter()
        .zip(&gg)
        .map(|(a, b)| p * a - (1.0 - p) * b)
        .collect();
    let a = norm(&diff);
    let psi1 = diff.iter().zip(&rho.gradient).map(|(x, y)| x * y).sum::<f64>() / rho_norm;

    let (lambda, lambda_grad) = pair.weighted_lambda(z0)?;
    let df = d as f64;
    let a_d = unit_ball_volume(d);
    let curvature: f64 = (0..d)
        .map(|j| rho.gradient[j] * lambda_grad[j] + 0.5 * rho.second_diag[j] * lambda)
        .sum();
    let alpha = df / (df + 2.0)
        * lambda.powf(-1.0 - 2.0 / df)
        * a_d.powf(-2.0 / df)
        * curvature
        / df;
    Ok(NodeGeometry {
        h,
        rho_dot: rho.gradient,
        psi1,
        a,
        alpha,
    })
}

/// `C1` and `C2` as weighted sums over the boundary nodes.
pub fn expansion_constants(boundary: &BoundarySet) -> ExpansionReport {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for (w, g) in boundary.weights.iter().zip(&boundary.geometry) {
        let ratio = g.h / g.rho_dot_norm();
        s1 += w * ratio;
        s2 += w * ratio * g.alpha * g.alpha;
    }
    let c1 = 0.5 * s1;
    let c2 = 2.0 * s2;
    ExpansionReport {
        c1,
        c2,
        a_d: unit_ball_volume(boundary.dim),
        dim: boundary.dim,
        degenerate: c2 < DEGENERACY_RATIO * c1.max(1.0),
    }
}

/// Boundary extraction followed by [`expansion_constants`].
pub fn expansion_for_pair(
    pair: &PopulationPair,
    region: &Region,
    resolution: usize,
) -> Result<ExpansionReport> {
    Ok(expansion_constants(&find_boundary(pair, region, resolution)?))
}

/// Leading terms `C1 / k + C2 (k / nu)^(4/d)`.
pub fn regret_expansion(report: &ExpansionReport, k: usize, nu: f64, d: usize) -> f64 {
    let k = k as f64;
    report.c1 / k + report.c2 * (k / nu).powf(4.0 / d as f64)
}

/// Stationary point of [`regret_expansion`] in `k > 0`.
pub fn theoretical_kopt_real(report: &ExpansionReport, nu: f64, d: usize) -> Result<f64> {
    if report.degenerate {
        return Err(TheoryError::Degenerate);
    }
    if !(nu > 0.0 && nu.is_finite()) || d == 0 {
        return Err(TheoryError::InvalidArgument(format!(
            "need nu > 0 and d >= 1, got nu = {nu}, d = {d}"
        )));
    }
    let df = d as f64;
    let base = df * report.c1 * nu.powf(4.0 / df) / (4.0 * report.c2);
    Ok(base.powf(df / (df + 4.0)))
}

/// Nearest integer to the stationary point, at least 1.
pub fn theoretical_kopt(report: &ExpansionReport, nu: f64, d: usize) -> Result<usize> {
    Ok((theoretical_kopt_real(report, nu, d)?.round() as usize).max(1))
}

/// `(k, expansion regret)` for each `k` in `ks`.
pub fn regret_curve(report: &ExpansionReport, nu: f64, ks: &[usize]) -> Vec<(usize, f64)> {
    ks.iter()
        .map(|&k| (k, regret_expansion(report, k, nu, report.dim)))
        .collect()
}
