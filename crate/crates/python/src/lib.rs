//! Python bindings for the `ratekit` crate.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rk::panel::{Period, PolicyRecord};
use rk::sim::ExperimentOptions;

fn to_py(e: rk::Error) -> PyErr {
    match e {
        rk::Error::Domain(_) | rk::Error::Parse { .. } | rk::Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn loads(py: Python<'_>, text: &str) -> PyResult<PyObject> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn conditional(name: &str) -> PyResult<rk::Conditional> {
    match name {
        "poisson" => Ok(rk::Conditional::Poisson),
        "negbin" | "nb" => Ok(rk::Conditional::Negbin),
        _ => Err(PyValueError::new_err(format!("conditional must be `poisson` or `negbin`, got `{name}`"))),
    }
}

fn mixing(name: &str) -> PyResult<rk::MixingKind> {
    match name {
        "gamma" => Ok(rk::MixingKind::GammaMeanOne),
        "lognormal" => Ok(rk::MixingKind::LognormalMeanOne),
        _ => Err(PyValueError::new_err(format!("re_dist must be `gamma` or `lognormal`, got `{name}`"))),
    }
}

fn credibility_model(name: &str) -> PyResult<rk::CredibilityModel> {
    match name {
        "poisson-re" => Ok(rk::CredibilityModel::PoissonRe),
        "nb-re" => Ok(rk::CredibilityModel::NbRe),
        "nb-re-saturated" => Ok(rk::CredibilityModel::NbReSaturated),
        _ => Err(PyValueError::new_err(format!(
            "model must be one of poisson-re, nb-re, nb-re-saturated; got `{name}`"
        ))),
    }
}

/// Longitudinal claim-count panel.
#[pyclass(name = "ClaimPanel", module = "ratekit", frozen)]
#[derive(Clone)]
struct PyPanel(rk::ClaimPanel);

#[pymethods]
impl PyPanel {
    /// Parses `policy_id,period,count,<covariates...>` CSV text.
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        rk::parse_panel_csv(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::from_csv(&text)
    }

    /// Builds a panel from `(policy_id, period, count, covariates)` tuples.
    #[staticmethod]
    fn from_rows(covariate_names: Vec<String>, rows: Vec<(String, i64, u64, Vec<f64>)>) -> PyResult<Self> {
        let mut records: Vec<PolicyRecord> = Vec::new();
        for (id, period, count, covariates) in rows {
            let period = Period {
                period,
                count,
                covariates,
            };
            match records.iter_mut().find(|r| r.id == id) {
                Some(r) => r.periods.push(period),
                None => records.push(PolicyRecord {
                    id,
                    periods: vec![period],
                }),
            }
        }
        rk::ClaimPanel::from_records(covariate_names, records).map(Self).map_err(to_py)
    }

    #[getter]
    fn n_policies(&self) -> usize {
        self.0.n_policies()
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.0.n_cells()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.0.covariate_names().to_vec()
    }

    #[getter]
    fn counts(&self) -> Vec<u64> {
        self.0.counts().to_vec()
    }

    fn to_csv(&self) -> String {
        self.0.to_csv_string()
    }

    /// The panel without each policy's last `n` periods.
    fn drop_last_periods(&self, n: usize) -> PyResult<Self> {
        self.0.drop_last_periods(n).map(Self).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.n_policies()
    }

    fn __repr__(&self) -> String {
        format!(
            "ClaimPanel(policies={}, cells={}, covariates={:?})",
            self.0.n_policies(),
            self.0.n_cells(),
            self.0.covariate_names()
        )
    }
}

/// `NB(lambda, alpha)` with `Var = lambda + alpha lambda^2`.
#[pyclass(name = "NbParams", module = "ratekit", frozen)]
struct PyNbParams(rk::NbParams);

#[pymethods]
impl PyNbParams {
    #[new]
    #[pyo3(signature = (lam, alpha = 0.0))]
    fn new(lam: f64, alpha: f64) -> PyResult<Self> {
        rk::NbParams::new(lam, alpha).map(Self).map_err(to_py)
    }

    fn log_pmf(&self, n: u64) -> f64 {
        self.0.log_pmf(n)
    }

    fn pmf(&self, n: u64) -> f64 {
        self.0.pmf(n)
    }

    fn central_moment(&self, order: u32) -> PyResult<f64> {
        self.0.central_moment(order).map_err(to_py)
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.0.mean()
    }

    #[getter]
    fn variance(&self) -> f64 {
        self.0.variance()
    }

    fn __repr__(&self) -> String {
        format!("NbParams(lam={}, alpha={})", self.0.lambda(), self.0.alpha())
    }
}

/// Poisson or NB regression fit.
#[pyclass(name = "GlmFit", module = "ratekit", frozen)]
struct PyGlmFit(rk::GlmFit);

#[pymethods]
impl PyGlmFit {
    #[getter]
    fn family(&self) -> &'static str {
        match self.0.family {
            rk::GlmFamily::Poisson => "poisson",
            rk::GlmFamily::Negbin => "negbin",
        }
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.clone()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.0.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn status(&self) -> String {
        self.0.status.clone()
    }

    fn standard_errors(&self) -> Option<Vec<f64>> {
        self.0.standard_errors()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("GlmFit(family={}, beta={:?}, alpha={})", self.family(), self.0.beta, self.0.alpha)
    }
}

/// Shared random-effect fit.
#[pyclass(name = "ReFit", module = "ratekit", frozen)]
#[derive(Clone)]
struct PyReFit(rk::ReFit);

#[pymethods]
impl PyReFit {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn conditional(&self) -> &'static str {
        match self.0.conditional {
            rk::Conditional::Poisson => "poisson",
            rk::Conditional::Negbin => "negbin",
        }
    }

    #[getter]
    fn re_dist(&self) -> &'static str {
        match self.0.re_dist {
            rk::MixingKind::GammaMeanOne => "gamma",
            rk::MixingKind::LognormalMeanOne => "lognormal",
            rk::MixingKind::DegenerateOne => "degenerate",
        }
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.clone()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.0.sigma2
    }

    #[getter]
    fn var_theta(&self) -> f64 {
        self.0.var_theta
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.0.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn status(&self) -> String {
        self.0.status.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ReFit(conditional={}, re_dist={}, beta={:?}, alpha={}, sigma2={})",
            self.conditional(),
            self.re_dist(),
            self.0.beta,
            self.0.alpha,
            self.0.sigma2
        )
    }
}

/// Score-test outcome.
#[pyclass(name = "ScoreTestResult", module = "ratekit", frozen)]
struct PyScoreTest(rk::ScoreTestResult);

#[pymethods]
impl PyScoreTest {
    #[getter]
    fn statistic(&self) -> f64 {
        self.0.statistic
    }

    #[getter]
    fn p_value(&self) -> f64 {
        self.0.p_value_one_sided
    }

    #[getter]
    fn numerator(&self) -> f64 {
        self.0.numerator
    }

    #[getter]
    fn denominator(&self) -> f64 {
        self.0.denominator
    }

    #[getter]
    fn contributions(&self) -> Vec<f64> {
        self.0.per_policy_contributions.clone()
    }

    #[getter]
    fn boundary_fallback(&self) -> bool {
        self.0.boundary_fallback
    }

    #[pyo3(signature = (level = 0.05))]
    fn rejects(&self, level: f64) -> bool {
        self.0.rejects(level)
    }

    fn __repr__(&self) -> String {
        format!("ScoreTestResult(statistic={}, p_value={})", self.0.statistic, self.0.p_value_one_sided)
    }
}

#[pyfunction]
fn fit_poisson_glm(py: Python<'_>, panel: &PyPanel) -> PyResult<PyGlmFit> {
    py.allow_threads(|| rk::fit_poisson_glm(&panel.0)).map(PyGlmFit).map_err(to_py)
}

#[pyfunction]
fn fit_nb_glm(py: Python<'_>, panel: &PyPanel) -> PyResult<PyGlmFit> {
    py.allow_threads(|| rk::fit_nb_glm(&panel.0)).map(PyGlmFit).map_err(to_py)
}

/// Fits `N_it | theta_i ~ f(lambda_it theta_i)` with a mean-one shared effect.
#[pyfunction]
#[pyo3(signature = (panel, conditional = "poisson", re_dist = "lognormal", nodes = 32))]
fn fit_shared_re(py: Python<'_>, panel: &PyPanel, conditional: &str, re_dist: &str, nodes: usize) -> PyResult<PyReFit> {
    let (cond, kind) = (self::conditional(conditional)?, mixing(re_dist)?);
    let cfg = rk::ReConfig {
        nodes,
        ..rk::ReConfig::default()
    };
    py.allow_threads(|| rk::fit_shared_re_with(&panel.0, cond, kind, &cfg))
        .map(PyReFit)
        .map_err(to_py)
}

#[pyfunction]
fn pinquet_test(py: Python<'_>, panel: &PyPanel) -> PyResult<PyScoreTest> {
    py.allow_threads(|| {
        let fit = rk::fit_poisson_glm(&panel.0)?;
        rk::pinquet_statistic(&panel.0, &rk::linear_predictor(&panel.0, &fit.beta)?)
    })
    .map(PyScoreTest)
    .map_err(to_py)
}

#[pyfunction]
fn nb_score_test(py: Python<'_>, panel: &PyPanel) -> PyResult<PyScoreTest> {
    py.allow_threads(|| rk::nb_score_test(&panel.0, &rk::fit_nb_glm(&panel.0)?))
        .map(PyScoreTest)
        .map_err(to_py)
}

/// Both tests side by side, as a dict.
#[pyfunction]
#[pyo3(signature = (panel, level = 0.05))]
fn bm_existence_report(py: Python<'_>, panel: &PyPanel, level: f64) -> PyResult<PyObject> {
    let report = py.allow_threads(|| rk::bm_existence_report(&panel.0, level)).map_err(to_py)?;
    loads(py, &serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// `(mu, nu, a)` with `log theta ~ N(0, sigma2)`.
#[pyfunction]
#[pyo3(signature = (model, lam, sigma2, alpha = 0.0, b = 0.0))]
fn structural_params(model: &str, lam: f64, sigma2: f64, alpha: f64, b: f64) -> PyResult<(f64, f64, f64)> {
    let s = rk::structural_params(credibility_model(model)?, lam, sigma2, alpha, b).map_err(to_py)?;
    Ok((s.mu, s.nu, s.a))
}

#[pyfunction]
fn buhlmann_factor(t: usize, mu: f64, nu: f64, a: f64) -> f64 {
    rk::buhlmann_factor(t, &rk::StructuralParams { mu, nu, a })
}

#[pyfunction]
fn buhlmann_predict(z: f64, sample_mean: f64, mu: f64) -> f64 {
    rk::buhlmann_predict(z, sample_mean, mu)
}

#[pyfunction]
fn bm_coefficient(a_gamma: f64, counts: Vec<u64>, lambdas: Vec<f64>) -> PyResult<f64> {
    rk::bm_coefficient(a_gamma, &counts, &lambdas).map_err(to_py)
}

/// Per-policy credibility rows, as a dict.
#[pyfunction]
fn credibility_report(py: Python<'_>, panel: &PyPanel, fit: &PyReFit) -> PyResult<PyObject> {
    let report = rk::credibility_report(&panel.0, &fit.0).map_err(to_py)?;
    loads(py, &report.to_json().map_err(to_py)?)
}

/// Refits without each policy's last period and scores the held-out counts.
#[pyfunction]
#[pyo3(signature = (panel, fit, nodes = 32))]
fn empirical_predictive_mse(py: Python<'_>, panel: &PyPanel, fit: &PyReFit, nodes: usize) -> PyResult<f64> {
    let cfg = rk::ReConfig {
        nodes,
        ..rk::ReConfig::default()
    };
    py.allow_threads(|| rk::empirical_predictive_mse(&panel.0, &fit.0, &cfg)).map_err(to_py)
}

/// Runs a simulation design and returns its summary as a dict.
#[pyfunction]
#[pyo3(signature = (scenario, reps = None, seed = 1, sigma2 = None, tau2 = None, alpha = None, k = None, level = 0.05, threads = None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    reps: Option<usize>,
    seed: u64,
    sigma2: Option<Vec<f64>>,
    tau2: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    k: Option<Vec<usize>>,
    level: f64,
    threads: Option<usize>,
) -> PyResult<PyObject> {
    let analysis: rk::Analysis = scenario.parse().map_err(to_py)?;
    let opts = rk::StudyOptions {
        replications: reps,
        seed,
        sigma2,
        tau2,
        alpha,
        k,
        experiment: ExperimentOptions {
            level,
            ..ExperimentOptions::default()
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let summary = py.allow_threads(|| pool.install(|| rk::run_study(analysis, &opts))).map_err(to_py)?;
    loads(py, &summary.to_json().map_err(to_py)?)
}

#[pymodule]
fn ratekit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyNbParams>()?;
    m.add_class::<PyGlmFit>()?;
    m.add_class::<PyReFit>()?;
    m.add_class::<PyScoreTest>()?;
    m.add_function(wrap_pyfunction!(fit_poisson_glm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_nb_glm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_shared_re, m)?)?;
    m.add_function(wrap_pyfunction!(pinquet_test, m)?)?;
    m.add_function(wrap_pyfunction!(nb_score_test, m)?)?;
    m.add_function(wrap_pyfunction!(bm_existence_report, m)?)?;
    m.add_function(wrap_pyfunction!(structural_params, m)?)?;
    m.add_function(wrap_pyfunction!(buhlmann_factor, m)?)?;
    m.add_function(wrap_pyfunction!(buhlmann_predict, m)?)?;
    m.add_function(wrap_pyfunction!(bm_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(credibility_report, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_predictive_mse, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
