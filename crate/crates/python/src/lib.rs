//! Python bindings: models, histograms, simulation, fitting and the tests.

use std::collections::BTreeMap;

use pals_core::analysis::{self as analysis, FitSpec, TestResult};
use pals_core::config::{parse_fit_spec, ModelSection, RunConfig};
use pals_core::lattice::{check_identity, PhysicalConstants};
use pals_core::spectrometer::simulate_with;
use pals_core::{ChannelGeometry, DecayComponent, InstrumentResponse, RngSeed};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: pals_core::Error) -> PyErr {
    match e {
        pals_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Lifetime model; rates in μs⁻¹, times in ns.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: pals_core::SpectrumModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (rates, intensities, fwhm=1.7, t0=50.0, prompt_fraction=0.0, background=0.0, total_events=1.0))]
    fn new(
        rates: Vec<f64>,
        intensities: Vec<f64>,
        fwhm: f64,
        t0: f64,
        prompt_fraction: f64,
        background: f64,
        total_events: f64,
    ) -> PyResult<Self> {
        if rates.len() != intensities.len() {
            return Err(PyValueError::new_err("rates and intensities differ in length"));
        }
        let inner = pals_core::SpectrumModel {
            components: rates
                .iter()
                .zip(&intensities)
                .map(|(&rate, &intensity)| DecayComponent { rate, intensity })
                .collect(),
            irf: InstrumentResponse { fwhm, t0 },
            prompt_fraction,
            background_per_channel: background,
            total_events,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// The default three-component model.
    #[staticmethod]
    fn default() -> PyResult<Self> {
        Ok(Self { inner: ModelSection::default().to_model(1.7).map_err(err)? })
    }

    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.components.iter().map(|c| c.rate).collect()
    }

    #[getter]
    fn intensities(&self) -> Vec<f64> {
        self.inner.components.iter().map(|c| c.intensity).collect()
    }

    fn expected_counts(&self, channel_width: f64, n_channels: usize) -> PyResult<Vec<f64>> {
        let geom = ChannelGeometry::new(channel_width, n_channels).map_err(err)?;
        pals_core::expected_counts(&self.inner, &geom).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(rates={:?}, intensities={:?})", self.rates(), self.intensities())
    }
}

#[pyclass(name = "Histogram", from_py_object)]
#[derive(Clone)]
struct PyHistogram {
    inner: pals_core::Histogram,
}

#[pymethods]
impl PyHistogram {
    #[new]
    #[pyo3(signature = (counts, channel_width, live_time=1.0))]
    fn new(counts: Vec<u64>, channel_width: f64, live_time: f64) -> PyResult<Self> {
        let geom = ChannelGeometry::new(channel_width, counts.len()).map_err(err)?;
        Ok(Self { inner: pals_core::Histogram::from_counts(geom, counts, live_time).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: pals_core::Histogram::read(path).map_err(err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: pals_core::Histogram::parse(text).map_err(err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn counts(&self) -> Vec<u64> {
        self.inner.counts.clone()
    }

    #[getter]
    fn channel_width(&self) -> f64 {
        self.inner.geometry.channel_width
    }

    #[getter]
    fn live_time(&self) -> f64 {
        self.inner.live_time
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata.clone()
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn __len__(&self) -> usize {
        self.inner.n_channels()
    }
}

/// Simulates one histogram from a run configuration given as TOML text.
#[pyfunction]
#[pyo3(signature = (config, seed=None, stream=0))]
fn simulate(py: Python<'_>, config: &str, seed: Option<u64>, stream: u64) -> PyResult<PyHistogram> {
    let cfg = RunConfig::parse(config).map_err(err)?;
    let spectrometer = cfg.spectrometer().map_err(err)?.clone();
    let base = cfg.base_model().map_err(err)?;
    let scenario = cfg.scenario_or_default();
    let seed = RngSeed::new(seed.unwrap_or(cfg.run.seed), stream);
    let method = cfg.run.method;
    let inner = py.detach(|| simulate_with(&spectrometer, &scenario, &base, seed, method)).map_err(err)?;
    Ok(PyHistogram { inner })
}

fn spec_from(h: &pals_core::Histogram, spec: Option<&str>, template: Option<&PyModel>) -> PyResult<FitSpec> {
    match (spec, template) {
        (Some(text), _) => parse_fit_spec(text).map_err(err),
        (None, Some(m)) => Ok(FitSpec::guess(h, &m.inner)),
        (None, None) => Ok(FitSpec::guess(h, &ModelSection::default().to_model(1.7).map_err(err)?)),
    }
}

/// Maximum-likelihood fit. `spec` is a fit specification in TOML; without it
/// the start is guessed from `template` (or the default model).
#[pyfunction]
#[pyo3(signature = (histogram, spec=None, template=None))]
fn fit<'py>(
    py: Python<'py>,
    histogram: &PyHistogram,
    spec: Option<&str>,
    template: Option<PyModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from(&histogram.inner, spec, template.as_ref())?;
    let h = &histogram.inner;
    let r = py.detach(|| analysis::fit_mle(h, &spec)).map_err(err)?;
    let d = PyDict::new(py);
    let names = r.names();
    let estimates = PyDict::new(py);
    let errors = PyDict::new(py);
    for (i, name) in names.iter().enumerate() {
        estimates.set_item(name, r.estimates[i])?;
        errors.set_item(name, r.std_errors[i])?;
    }
    d.set_item("estimates", estimates)?;
    d.set_item("errors", errors)?;
    d.set_item("deviance", r.deviance)?;
    d.set_item("degrees_of_freedom", r.degrees_of_freedom)?;
    d.set_item("converged", r.converged)?;
    d.set_item("n_iterations", r.n_iterations)?;
    d.set_item("information", r.information.as_str())?;
    d.set_item("expected", r.expected)?;
    Ok(d)
}

fn test_dict<'py>(py: Python<'py>, t: &TestResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("statistic", t.statistic)?;
    d.set_item("p_value", t.p_value)?;
    d.set_item("effective_sigma", t.effective_sigma)?;
    d.set_item("decision", t.decision())?;
    d.set_item("converged", t.converged)?;
    d.set_item("null_hypothesis", &t.null_hypothesis)?;
    d.set_item("estimates", t.estimates.clone())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (perpendicular, parallel, significance=0.05, spec=None, template=None))]
fn lr_test_doubling<'py>(
    py: Python<'py>,
    perpendicular: &PyHistogram,
    parallel: &PyHistogram,
    significance: f64,
    spec: Option<&str>,
    template: Option<PyModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from(&parallel.inner, spec, template.as_ref())?;
    let (a, b) = (&perpendicular.inner, &parallel.inner);
    let t = py.detach(|| analysis::lr_test_doubling(a, b, &spec, significance)).map_err(err)?;
    test_dict(py, &t)
}

/// Tests the o-Ps rate (`rate_2`, μs⁻¹) against `lambda_null`.
#[pyfunction]
#[pyo3(signature = (histogram, lambda_null, significance=0.05, spec=None, template=None))]
fn lr_test_rate_shift<'py>(
    py: Python<'py>,
    histogram: &PyHistogram,
    lambda_null: f64,
    significance: f64,
    spec: Option<&str>,
    template: Option<PyModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from(&histogram.inner, spec, template.as_ref())?;
    let h = &histogram.inner;
    let t = py.detach(|| analysis::lr_test_rate_shift(h, lambda_null, &spec, significance)).map_err(err)?;
    test_dict(py, &t)
}

/// Planck-mass identity; keyword overrides replace the CODATA defaults.
#[pyfunction]
#[pyo3(signature = (alpha=None, m_p=None, m_e=None, hbar=None, c=None, G=None))]
#[allow(non_snake_case)]
fn constants<'py>(
    py: Python<'py>,
    alpha: Option<f64>,
    m_p: Option<f64>,
    m_e: Option<f64>,
    hbar: Option<f64>,
    c: Option<f64>,
    G: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let d0 = PhysicalConstants::default();
    let pc = PhysicalConstants {
        alpha: alpha.unwrap_or(d0.alpha),
        m_p: m_p.unwrap_or(d0.m_p),
        m_e: m_e.unwrap_or(d0.m_e),
        hbar: hbar.unwrap_or(d0.hbar),
        c: c.unwrap_or(d0.c),
        g: G.unwrap_or(d0.g),
    };
    let r = check_identity(&pc).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("n3", r.n3)?;
    d.set_item("planck_mass", r.planck_mass)?;
    d.set_item("lattice_mass", r.lattice_mass)?;
    d.set_item("residual", r.residual)?;
    d.set_item("pass", r.pass)?;
    Ok(d)
}

#[pymodule]
fn pals(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyHistogram>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(lr_test_doubling, m)?)?;
    m.add_function(wrap_pyfunction!(lr_test_rate_shift, m)?)?;
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    Ok(())
}
