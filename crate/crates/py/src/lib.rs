//! Python bindings. Structured values cross the boundary as plain dicts.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;
use stablelabel::evaluation::{self, SweepSpec};
use stablelabel::hmm;
use stablelabel::pipeline::PipelineParams;
use stablelabel::providers::{self, SimConfig};
use stablelabel::pupil::{self, GrayImage};
use stablelabel::service::{self, SystemClock};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match obj {
        None => Ok(T::default()),
        Some(o) if o.is_none() => Ok(T::default()),
        Some(o) => {
            let text: String = PyModule::import(o.py(), "json")?.call_method1("dumps", (o,))?.extract()?;
            serde_json::from_str(&text).map_err(value_err)
        }
    }
}

/// Hidden Markov model over named states.
#[pyclass(name = "HmmModel", module = "stablelabel", frozen)]
struct PyHmmModel(hmm::HmmModel);

#[pymethods]
impl PyHmmModel {
    #[new]
    fn new(states: Vec<String>, priors: Vec<f64>, transitions: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> PyResult<Self> {
        let states = hmm::StateSpace::new(states).map_err(value_err)?;
        hmm::HmmModel::new(states, priors, transitions, emission).map(Self).map_err(value_err)
    }

    /// Uniform priors and transitions with the given emission matrix.
    #[staticmethod]
    fn uniform_chain(states: Vec<String>, emission: Vec<Vec<f64>>) -> PyResult<Self> {
        let states = hmm::StateSpace::new(states).map_err(value_err)?;
        hmm::HmmModel::uniform_chain(states, emission).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_dict(d: &Bound<'_, PyAny>) -> PyResult<Self> {
        let text: String = PyModule::import(d.py(), "json")?.call_method1("dumps", (d,))?.extract()?;
        serde_json::from_str(&text).map(Self).map_err(value_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.0.states().names().to_vec()
    }

    #[getter]
    fn priors(&self) -> Vec<f64> {
        self.0.priors().to_vec()
    }

    #[getter]
    fn transitions(&self) -> Vec<Vec<f64>> {
        self.0.transitions().to_vec()
    }

    #[getter]
    fn emission(&self) -> Vec<Vec<f64>> {
        self.0.emission().to_vec()
    }

    /// Most likely state path and its log probability.
    fn viterbi(&self, obs: Vec<usize>) -> PyResult<(Vec<usize>, f64)> {
        let d = self.0.viterbi(&obs).map_err(value_err)?;
        Ok((d.path, d.log_v_star))
    }

    fn unchanged_log_prob(&self, obs: Vec<usize>, state: usize) -> PyResult<f64> {
        self.0.unchanged_log_prob(&obs, state).map_err(value_err)
    }

    /// `(best_state, v_u)` for a run of classifier decisions.
    fn stable_state_score(&self, obs: Vec<usize>) -> PyResult<(usize, f64)> {
        let s = self.0.stable_state_score(&obs).map_err(value_err)?;
        Ok((s.best_state, s.v_u))
    }

    fn __repr__(&self) -> String {
        format!("HmmModel(states={:?})", self.0.states().names())
    }
}

/// Frame records with optional ground truth.
#[pyclass(name = "RecordStream", module = "stablelabel", frozen)]
struct PyRecordStream(providers::RecordStream);

#[pymethods]
impl PyRecordStream {
    /// Parses the tab-separated record format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        providers::parse_records_str(text).map(Self).map_err(value_err)
    }

    fn to_text(&self) -> String {
        providers::records_to_string(&self.0)
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.0.states.names().to_vec()
    }

    #[getter]
    fn present_frames(&self) -> usize {
        self.0.records.iter().filter(|r| r.object_present).count()
    }

    fn record<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = self.0.records.get(i).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        to_py(py, r)
    }

    fn __len__(&self) -> usize {
        self.0.records.len()
    }
}

/// Synthetic stream; `config` keys override the simulator defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn simulate(config: Option<&Bound<'_, PyAny>>) -> PyResult<PyRecordStream> {
    let config: SimConfig = from_py(config)?;
    providers::simulate_records(&config).map(PyRecordStream).map_err(value_err)
}

#[pyfunction]
fn default_params(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &PipelineParams::default())
}

/// Replays the pipeline against ground truth with a fixed initial model.
#[pyfunction]
#[pyo3(signature = (stream, model, params=None))]
fn replay<'py>(
    py: Python<'py>,
    stream: &PyRecordStream,
    model: &PyHmmModel,
    params: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let params: PipelineParams = from_py(params)?;
    let point = py
        .detach(|| evaluation::replay_metrics(&stream.0.records, &model.0, &params))
        .map_err(value_err)?;
    to_py(py, &point)
}

/// Seeds a model from the leading frames and evaluates the remainder.
#[pyfunction]
#[pyo3(signature = (stream, params=None, seed_frames=20_000))]
fn evaluate<'py>(
    py: Python<'py>,
    stream: &PyRecordStream,
    params: Option<&Bound<'py, PyAny>>,
    seed_frames: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let params: PipelineParams = from_py(params)?;
    let point = py
        .detach(|| evaluation::evaluate_stream(&stream.0, &params, seed_frames))
        .map_err(value_err)?;
    to_py(py, &point)
}

/// Runs a parameter sweep and returns the CSV table.
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn sweep(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>) -> PyResult<String> {
    let spec: SweepSpec = from_py(spec)?;
    py.detach(|| evaluation::sweep(&spec).and_then(|r| r.to_csv_string()))
        .map_err(value_err)
}

/// Pupil centre `(x, y, area)` in a row-major grayscale crop, or None.
#[pyfunction]
fn extract_pupil(pixels: Vec<Vec<f64>>, polygon: Vec<(f64, f64)>) -> PyResult<Option<(f64, f64, usize)>> {
    let height = pixels.len();
    let width = pixels.first().map_or(0, Vec::len);
    if pixels.iter().any(|row| row.len() != width) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let image = GrayImage::new(width, height, pixels.concat()).map_err(value_err)?;
    match pupil::extract_pupil(&image, &polygon) {
        Ok(p) => Ok(Some((p.center.0, p.center.1, p.blob_area))),
        Err(pupil::PupilError::NoPupil) => Ok(None),
        Err(e) => Err(value_err(e)),
    }
}

/// Leased annotation queue backed by an append-only log file.
#[pyclass(name = "AnnotationService", module = "stablelabel", frozen)]
struct PyAnnotationService(service::AnnotationService);

#[pymethods]
impl PyAnnotationService {
    /// Resumes from `log` when it already holds events.
    #[new]
    #[pyo3(signature = (stream, model, log, params=None))]
    fn new(stream: &PyRecordStream, model: &PyHmmModel, log: PathBuf, params: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let params: PipelineParams = from_py(params)?;
        let io = |e: std::io::Error| PyRuntimeError::new_err(format!("{}: {e}", log.display()));
        let resume = std::fs::metadata(&log).map(|m| m.len() > 0).unwrap_or(false);
        let writer = Box::new(OpenOptions::new().create(true).append(true).open(&log).map_err(io)?);
        let stream = stream.0.clone();
        let model = model.0.clone();
        let svc = if resume {
            let logged = BufReader::new(File::open(&log).map_err(io)?);
            service::AnnotationService::recover(stream, model, params, logged, writer, Box::new(SystemClock))
        } else {
            service::AnnotationService::new(stream, model, params, writer, Box::new(SystemClock))
        };
        svc.map(Self).map_err(value_err)
    }

    /// Leases the oldest available packet: `{"entry": ..., "drained": bool}`.
    #[pyo3(signature = (lease_seconds=300))]
    fn next_packet<'py>(&self, py: Python<'py>, lease_seconds: u64) -> PyResult<Bound<'py, PyAny>> {
        let next = py.detach(|| self.0.next_packet(lease_seconds * 1000)).map_err(value_err)?;
        to_py(py, &next)
    }

    /// Labels keyed by frame index.
    fn submit<'py>(&self, py: Python<'py>, id: u64, labels: BTreeMap<u64, String>) -> PyResult<Bound<'py, PyAny>> {
        let ack = py.detach(|| self.0.submit_labels(id, &labels)).map_err(value_err)?;
        to_py(py, &ack)
    }

    fn progress<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.progress())
    }

    fn current_model(&self) -> PyHmmModel {
        PyHmmModel(self.0.current_model())
    }
}

#[pymodule]
#[pyo3(name = "stablelabel")]
fn stablelabel_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHmmModel>()?;
    m.add_class::<PyRecordStream>()?;
    m.add_class::<PyAnnotationService>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(default_params, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(extract_pupil, m)?)?;
    Ok(())
}
