//! Python module `nnorder_py`: Gaussian populations, training-set draws,
//! k-NN classification, Bayes and Monte Carlo risk, bootstrap choice of k
//! and the regret expansion.
//!
//! Library errors surface as `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nnorder::densities::{self, Region};
use nnorder::kselect::{self, BootstrapPlan, TestResampling};
use nnorder::knn::{classify_knn, IndexKind, NeighborIndex};
use nnorder::risk::{self, ErrorDesign, McPlan, QuadratureGrid};
use nnorder::sampling::{self, SampleModel};
use nnorder::theory;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_model(model: &str) -> PyResult<SampleModel> {
    match model {
        "poisson" => Ok(SampleModel::Poisson),
        "binomial" => Ok(SampleModel::Binomial),
        other => Err(value_err(format!("model must be 'poisson' or 'binomial', got {other:?}"))),
    }
}

fn cube(d: usize, lower: f64, upper: f64) -> PyResult<Region> {
    Region::cube(d, lower, upper).map_err(value_err)
}

#[pyclass(frozen, name = "GaussianSpec", module = "nnorder_py")]
struct PyGaussianSpec(densities::GaussianSpec);

#[pymethods]
impl PyGaussianSpec {
    /// `covariance` is row-major d*d.
    #[new]
    fn new(mean: Vec<f64>, covariance: Vec<f64>) -> PyResult<Self> {
        densities::GaussianSpec::new(mean, covariance).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn isotropic(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        densities::GaussianSpec::isotropic(mean, variance).map(Self).map_err(value_err)
    }

    /// Unit variances with the given correlation.
    #[staticmethod]
    fn bivariate(mean: [f64; 2], correlation: f64) -> PyResult<Self> {
        densities::GaussianSpec::bivariate(mean, correlation).map(Self).map_err(value_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean().to_vec()
    }

    #[getter]
    fn covariance(&self) -> Vec<f64> {
        self.0.covariance().to_vec()
    }

    fn pdf(&self, z: Vec<f64>) -> PyResult<f64> {
        self.0.eval(&z).map(|e| e.value).map_err(value_err)
    }

    /// `(value, gradient)` at `z`.
    fn pdf_gradient(&self, z: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.0.pdf_gradient(&z).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("GaussianSpec(mean={:?}, covariance={:?})", self.0.mean(), self.0.covariance())
    }
}

#[pyclass(frozen, name = "PopulationPair", module = "nnorder_py")]
struct PyPopulationPair(densities::PopulationPair);

#[pymethods]
impl PyPopulationPair {
    #[new]
    fn new(f: &PyGaussianSpec, g: &PyGaussianSpec, mu: f64, nu: f64) -> PyResult<Self> {
        densities::PopulationPair::new(f.0.clone(), g.0.clone(), mu, nu)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu()
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.0.nu()
    }

    #[getter]
    fn p(&self) -> f64 {
        self.0.p()
    }

    /// Posterior probability of class X at `z`.
    fn psi(&self, z: Vec<f64>) -> PyResult<f64> {
        densities::posterior_psi(&self.0, &z).map_err(value_err)
    }

    #[pyo3(signature = (resolution = 251, lower = -2.5, upper = 2.5))]
    fn bayes_risk(&self, resolution: usize, lower: f64, upper: f64) -> PyResult<f64> {
        let grid = QuadratureGrid::standard(&cube(self.0.dim(), lower, upper)?, resolution)
            .map_err(value_err)?;
        risk::bayes_risk(&self.0, &grid).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("PopulationPair(dim={}, mu={}, nu={})", self.0.dim(), self.0.mu(), self.0.nu())
    }
}

#[pyclass(frozen, name = "TrainingSet", module = "nnorder_py")]
struct PyTrainingSet(sampling::TrainingSet);

#[pymethods]
impl PyTrainingSet {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.0.len()).map(|i| self.0.point(i).to_vec()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<&'static str> {
        self.0.labels().iter().map(|l| l.as_str()).collect()
    }

    /// Label ("X" or "Y") the k-NN rule assigns to each point of `zs`.
    fn classify(&self, zs: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<&'static str>> {
        let index = NeighborIndex::for_training(&self.0, IndexKind::suggest(self.0.len(), k, self.0.dim()))
            .map_err(value_err)?;
        zs.iter()
            .map(|z| classify_knn(&self.0, &index, z, k).map(|l| l.as_str()).map_err(value_err))
            .collect()
    }

    /// Bootstrap choice of k. Returns a dict with k_hat, k_tilde and the error curve.
    #[pyo3(signature = (r = 1.0 / 3.0, b = 100, seed = None, independent_test = false))]
    fn select_k<'py>(
        &self,
        py: Python<'py>,
        r: f64,
        b: usize,
        seed: Option<u64>,
        independent_test: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut plan = BootstrapPlan::new(r, b).map_err(value_err)?;
        if independent_test {
            plan.test_resampling = TestResampling::Independent;
        }
        let res = kselect::select_k_for_training(&self.0, &plan, seed.unwrap_or(self.0.seed()))
            .map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("k_hat", res.k_hat)?;
        out.set_item("k_tilde", res.k_tilde)?;
        out.set_item("error_curve", res.error_curve)?;
        Ok(out)
    }
}

/// One training set from stream `stream` of `seed`.
#[pyfunction]
#[pyo3(signature = (pair, seed, stream = 0, model = "poisson"))]
fn draw_training(pair: &PyPopulationPair, seed: u64, stream: u64, model: &str) -> PyResult<PyTrainingSet> {
    let model = parse_model(model)?;
    let mut rng = sampling::split_stream(seed, stream);
    Ok(PyTrainingSet(sampling::draw_training(&pair.0, model, &mut rng)))
}

/// Monte Carlo error curve over `k_grid`: list of `(k, err, se)`.
#[pyfunction]
#[pyo3(signature = (pair, k_grid, n_sets = 100, seed = 0, model = "poisson", resolution = None, mc_points = 2000))]
fn error_curve(
    pair: &PyPopulationPair,
    k_grid: Vec<usize>,
    n_sets: usize,
    seed: u64,
    model: &str,
    resolution: Option<usize>,
    mc_points: usize,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let d = pair.0.dim();
    let res = resolution.unwrap_or(if d == 1 { 201 } else { 101 });
    let design = ErrorDesign::for_region(&pair.0, &cube(d, -2.5, 2.5)?, res, mc_points, seed)
        .map_err(value_err)?;
    let plan = McPlan {
        n_sets,
        seed,
        model: parse_model(model)?,
    };
    let curves = risk::replicate_error_curves(&pair.0, &design, &k_grid, plan).map_err(value_err)?;
    Ok(curves.estimates().into_iter().map(|e| (e.k, e.err, e.se)).collect())
}

/// Expansion constants of a pair: dict with c1, c2, a_d, degenerate and
/// k_opt (None when degenerate). d = 1 or 2 only.
#[pyfunction]
#[pyo3(signature = (pair, resolution = 201))]
fn expansion<'py>(py: Python<'py>, pair: &PyPopulationPair, resolution: usize) -> PyResult<Bound<'py, PyDict>> {
    let d = pair.0.dim();
    let report = theory::expansion_for_pair(&pair.0, &cube(d, -2.5, 2.5)?, resolution).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("c1", report.c1)?;
    out.set_item("c2", report.c2)?;
    out.set_item("a_d", report.a_d)?;
    out.set_item("degenerate", report.degenerate)?;
    out.set_item("k_opt", theory::theoretical_kopt(&report, pair.0.nu(), d).ok())?;
    Ok(out)
}

/// C1/k + C2 (k/nu)^(4/d).
#[pyfunction]
fn regret_expansion(c1: f64, c2: f64, k: usize, nu: f64, d: usize) -> PyResult<f64> {
    if d == 0 {
        return Err(value_err("d must be at least 1"));
    }
    let report = theory::ExpansionReport {
        c1,
        c2,
        a_d: theory::unit_ball_volume(d),
        dim: d,
        degenerate: false,
    };
    Ok(theory::regret_expansion(&report, k, nu, d))
}

#[pymodule]
fn nnorder_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussianSpec>()?;
    m.add_class::<PyPopulationPair>()?;
    m.add_class::<PyTrainingSet>()?;
    m.add_function(wrap_pyfunction!(draw_training, m)?)?;
    m.add_function(wrap_pyfunction!(error_curve, m)?)?;
    m.add_function(wrap_pyfunction!(expansion, m)?)?;
    m.add_function(wrap_pyfunction!(regret_expansion, m)?)?;
    Ok(())
}
