//! Python bindings: trend tests, the directional procedures, the simulation
//! harness and the variogram, plus the `analyze` pipeline.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use trendfdr_core::cli::{self, AnalysisConfig, CalibrationArg, ProcedureArg};
use trendfdr_core::procedures::{self, BlockTests, LocationTests, ProcedureKind};
use trendfdr_core::sim;
use trendfdr_core::spatial::{self, SiteValue};
use trendfdr_core::trend::{self, BrillingerTest, Calibration};
use trendfdr_core::Error;

fn to_py(err: Error) -> PyErr {
    if err.is_numerical() {
        PyArithmeticError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn parse_procedure(name: &str) -> PyResult<ProcedureKind> {
    name.parse().map_err(to_py)
}

fn parse_calibration(name: &str) -> PyResult<Calibration> {
    match name {
        "small_sample" => Ok(Calibration::SmallSample),
        "raw" => Ok(Calibration::Raw),
        other => Err(PyValueError::new_err(format!("unknown calibration `{other}`"))),
    }
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "trendfdr")]
#[derive(Clone)]
pub struct TrendResult {
    pub statistic: f64,
    pub p_value: f64,
    pub contrast: f64,
    pub std_error: f64,
    pub direction_sign: i8,
}

#[pymethods]
impl TrendResult {
    fn __repr__(&self) -> String {
        format!(
            "TrendResult(statistic={}, p_value={}, direction_sign={})",
            self.statistic, self.p_value, self.direction_sign
        )
    }
}

/// Two-sided normal p-value `2(1 - Φ(|z|))`.
#[pyfunction]
fn two_sided_pvalue(statistic: f64) -> PyResult<f64> {
    trendfdr_core::normal::two_sided_pvalue(statistic).map_err(to_py)
}

#[pyfunction]
fn abelson_tukey_coeffs(n: usize) -> PyResult<Vec<f64>> {
    trend::abelson_tukey_coeffs(n).map_err(to_py)
}

/// Monotone trend test on one series.
#[pyfunction]
#[pyo3(signature = (series, max_lag = trend::DEFAULT_MAX_LAG, calibration = "small_sample"))]
fn trend_test(series: Vec<f64>, max_lag: usize, calibration: &str) -> PyResult<TrendResult> {
    let test = BrillingerTest::new(series.len(), max_lag)
        .map_err(to_py)?
        .with_calibration(parse_calibration(calibration)?);
    let r = test.run(&series).map_err(to_py)?;
    Ok(TrendResult {
        statistic: r.statistic,
        p_value: r.p_value,
        contrast: r.contrast,
        std_error: r.std_error,
        direction_sign: r.direction_sign,
    })
}

/// BH step-up; returns `(S, rejected_indices)`.
#[pyfunction]
#[pyo3(signature = (pvalues, alpha = procedures::DEFAULT_ALPHA))]
fn bh_stepup(pvalues: Vec<f64>, alpha: f64) -> PyResult<(usize, Vec<usize>)> {
    let r = procedures::bh_stepup(&pvalues, alpha).map_err(to_py)?;
    Ok((r.count, r.rejected))
}

#[pyfunction]
#[pyo3(signature = (pvalues, lam = procedures::DEFAULT_LAMBDA))]
fn storey_pi0(pvalues: Vec<f64>, lam: f64) -> PyResult<f64> {
    procedures::storey_pi0(&pvalues, lam).map_err(to_py)
}

#[pyfunction]
fn combine_location(season_ps: Vec<f64>) -> PyResult<f64> {
    procedures::combine_location(&season_ps).map_err(to_py)
}

#[pyfunction]
fn combine_subregion(location_ps: Vec<f64>) -> PyResult<f64> {
    procedures::combine_subregion(&location_ps).map_err(to_py)
}

/// Block-structured panel of seasonal p-values and signs.
#[pyclass(frozen, module = "trendfdr")]
pub struct TestPanel {
    inner: procedures::TestPanel,
}

type PyLocation = (u64, [f64; 4], [i8; 4]);

#[pymethods]
impl TestPanel {
    /// `blocks` is a list of blocks, each a list of
    /// `(pixel_id, [p1..p4], [sign1..sign4])`.
    #[new]
    fn new(blocks: Vec<Vec<PyLocation>>) -> PyResult<Self> {
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(block_id, locs)| BlockTests {
                block_id,
                locations: locs
                    .into_iter()
                    .map(|(pixel_id, p, sign)| LocationTests { pixel_id, p, sign })
                    .collect(),
            })
            .collect();
        Ok(Self {
            inner: procedures::TestPanel::new(blocks).map_err(to_py)?,
        })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn hypothesis_count(&self) -> usize {
        self.inner.hypothesis_count()
    }

    /// Runs `three_stage`, `adaptive` or `by_directional`.
    #[pyo3(signature = (procedure = "three_stage", alpha = procedures::DEFAULT_ALPHA, lam = procedures::DEFAULT_LAMBDA))]
    fn run(&self, procedure: &str, alpha: f64, lam: f64) -> PyResult<DecisionTable> {
        let table = procedures::run_procedure(&self.inner, parse_procedure(procedure)?, alpha, lam).map_err(to_py)?;
        Ok(DecisionTable { inner: table })
    }
}

#[pyclass(frozen, module = "trendfdr")]
pub struct DecisionTable {
    inner: procedures::DecisionTable,
}

#[pymethods]
impl DecisionTable {
    #[getter]
    fn procedure(&self) -> &'static str {
        self.inner.procedure.as_str()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    /// Stage-one rejection count.
    #[getter(S)]
    fn s(&self) -> usize {
        self.inner.stage1_rejections
    }

    #[getter]
    fn rejections(&self) -> usize {
        self.inner.rejections()
    }

    /// Per-block `π̂` for the adaptive procedure, `None` otherwise.
    #[getter]
    fn pi0_hat(&self) -> Vec<Option<f64>> {
        self.inner.blocks.iter().map(|b| b.pi0_hat).collect()
    }

    /// `(up, down)` per season.
    fn season_counts(&self) -> Vec<(usize, usize)> {
        self.inner.season_counts().to_vec()
    }

    /// Rows `(block_id, pixel_id, season, p_tested, decision, threshold)`.
    fn rows(&self) -> Vec<(usize, u64, usize, f64, &'static str, f64)> {
        let mut out = Vec::new();
        for b in &self.inner.blocks {
            for l in &b.locations {
                for k in 0..4 {
                    out.push((
                        b.block_id,
                        l.pixel_id,
                        k + 1,
                        l.p_tested[k],
                        l.decisions[k].as_str(),
                        b.season_threshold,
                    ));
                }
            }
        }
        out
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        procedures::write_decision_csv(&mut buf, &self.inner).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(module = "trendfdr", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
pub struct SimScenario {
    pub m: usize,
    pub n_i: usize,
    pub mu: f64,
    pub pi0: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub theta: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[pymethods]
impl SimScenario {
    /// `theta` defaults to `sqrt(n_i)`.
    #[new]
    #[pyo3(signature = (n_i, mu, pi0, rho1, rho2, m = sim::DEFAULT_M, theta = None, alpha = 0.05, replicates = 1000, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_i: usize,
        mu: f64,
        pi0: f64,
        rho1: f64,
        rho2: f64,
        m: usize,
        theta: Option<f64>,
        alpha: f64,
        replicates: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let sc = Self {
            m,
            n_i,
            mu,
            pi0,
            rho1,
            rho2,
            theta: theta.unwrap_or((n_i as f64).sqrt()),
            alpha,
            replicates,
            seed,
        };
        sc.core().validate().map_err(to_py)?;
        Ok(sc)
    }

    /// Runs the scenario; returns `{procedure: {mdfdr, power, mc_se_mdfdr,
    /// mc_se_power}}` plus `mdfdr_bound`.
    #[pyo3(signature = (procedures = None))]
    fn run(&self, py: Python<'_>, procedures: Option<Vec<String>>) -> PyResult<Py<PyAny>> {
        let kinds = match procedures {
            None => ProcedureKind::ALL.to_vec(),
            Some(names) => names.iter().map(|n| parse_procedure(n)).collect::<PyResult<_>>()?,
        };
        let sc = self.core();
        let res = py.detach(|| sim::run_scenario(&sc, &kinds)).map_err(to_py)?;
        let out = pyo3::types::PyDict::new(py);
        for p in &res.procedures {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("mdfdr", p.mdfdr.mean)?;
            d.set_item("power", p.power.mean)?;
            d.set_item("mc_se_mdfdr", p.mdfdr.se)?;
            d.set_item("mc_se_power", p.power.se)?;
            out.set_item(p.procedure.as_str(), d)?;
        }
        out.set_item("mdfdr_bound", res.bound.mean)?;
        out.set_item("replicates", res.replicates_run)?;
        Ok(out.into_any().unbind())
    }

    fn __repr__(&self) -> String {
        format!(
            "SimScenario(m={}, n_i={}, mu={}, pi0={}, rho1={}, rho2={}, theta={}, alpha={}, replicates={}, seed={})",
            self.m, self.n_i, self.mu, self.pi0, self.rho1, self.rho2, self.theta, self.alpha, self.replicates, self.seed
        )
    }
}

impl SimScenario {
    fn core(&self) -> sim::SimScenario {
        sim::SimScenario {
            m: self.m,
            n_i: self.n_i,
            mu: self.mu,
            pi0: self.pi0,
            rho1: self.rho1,
            rho2: self.rho2,
            theta: self.theta,
            alpha: self.alpha,
            replicates: self.replicates,
            seed: self.seed,
        }
    }
}

/// Semivariogram of `(col, row, value)` sites. Returns
/// `(bins, range, sill, reached)` with bins as `(lag, gamma_hat, pair_count)`.
#[pyfunction]
#[pyo3(signature = (sites, max_lag = spatial::DEFAULT_MAX_LAG, bin_width = spatial::DEFAULT_BIN_WIDTH, sill_fraction = spatial::DEFAULT_SILL_FRACTION))]
#[allow(clippy::type_complexity)]
fn variogram(
    sites: Vec<(i64, i64, f64)>,
    max_lag: f64,
    bin_width: f64,
    sill_fraction: f64,
) -> PyResult<(Vec<(f64, f64, u64)>, f64, f64, bool)> {
    let field: Vec<SiteValue> = sites
        .into_iter()
        .map(|(col, row, value)| SiteValue { col, row, value })
        .collect();
    let v = spatial::empirical_semivariogram(&field, max_lag, bin_width).map_err(to_py)?;
    let r = spatial::estimate_range(&v, sill_fraction).map_err(to_py)?;
    let bins = v.bins.iter().map(|b| (b.lag, b.gamma_hat, b.pair_count)).collect();
    Ok((bins, r.range, r.sill, r.reached))
}

/// Full pipeline on an input CSV; writes the decision CSV and summary JSON
/// and returns the summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (input, output, summary, alpha = 0.05, block_size = spatial::DEFAULT_BLOCK_SIZE, procedure = "three_stage", lam = 0.5, trend_max_lag = trend::DEFAULT_MAX_LAG, qa_consecutive_years = 2, dropped = None))]
#[allow(clippy::too_many_arguments)]
fn analyze(
    py: Python<'_>,
    input: std::path::PathBuf,
    output: std::path::PathBuf,
    summary: std::path::PathBuf,
    alpha: f64,
    block_size: usize,
    procedure: &str,
    lam: f64,
    trend_max_lag: usize,
    qa_consecutive_years: usize,
    dropped: Option<std::path::PathBuf>,
) -> PyResult<String> {
    let procedure = match parse_procedure(procedure)? {
        ProcedureKind::ThreeStage => ProcedureArg::ThreeStage,
        ProcedureKind::Adaptive => ProcedureArg::Adaptive,
        ProcedureKind::ByDirectional => ProcedureArg::By,
    };
    let config = AnalysisConfig {
        input,
        alpha,
        block_size,
        procedure,
        lambda: lam,
        trend_max_lag,
        trend_calibration: CalibrationArg::SmallSample,
        qa_consecutive_years,
        minima_distance: cli::DEFAULT_MINIMA_DISTANCE,
        output,
        summary,
        dropped,
        threads: None,
    };
    let s = py.detach(|| cli::cmd_analyze(&config)).map_err(to_py)?;
    serde_json::to_string(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn trendfdr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TrendResult>()?;
    m.add_class::<TestPanel>()?;
    m.add_class::<DecisionTable>()?;
    m.add_class::<SimScenario>()?;
    m.add_function(wrap_pyfunction!(two_sided_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(abelson_tukey_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(trend_test, m)?)?;
    m.add_function(wrap_pyfunction!(bh_stepup, m)?)?;
    m.add_function(wrap_pyfunction!(storey_pi0, m)?)?;
    m.add_function(wrap_pyfunction!(combine_location, m)?)?;
    m.add_function(wrap_pyfunction!(combine_subregion, m)?)?;
    m.add_function(wrap_pyfunction!(variogram, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    Ok(())
}
