//! Python module `pyacupoint`: dataset generation, checkpoint loading,
//! prediction, metrics and the command-line runner.

use std::path::PathBuf;

use acupoint::backbone::ScanMode;
use acupoint::config::RunConfig;
use acupoint::data::{build_dataset, Dataset};
use acupoint::eval::{epe, pck, throughput};
use acupoint::head::Detection;
use acupoint::model::{KeypointDetector, Model};
use acupoint::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(pyacupoint, CorruptArtifactError, PyException);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Rule(_) => PyValueError::new_err(msg),
        Error::Missing { .. } => PyFileNotFoundError::new_err(msg),
        Error::Corrupt { .. } => CorruptArtifactError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn image_tensor(pixels: Vec<f64>, size: usize) -> PyResult<Tensor> {
    Tensor::new(vec![1, size, size], pixels).map_err(to_py)
}

/// One detection: class, normalized coordinates and confidence.
#[pyclass(frozen, get_all, skip_from_py_object, name = "Detection")]
#[derive(Clone)]
pub struct PyDetection {
    class_id: usize,
    x: f64,
    y: f64,
    confidence: f64,
}

#[pymethods]
impl PyDetection {
    fn __repr__(&self) -> String {
        format!(
            "Detection(class_id={}, x={:.4}, y={:.4}, confidence={:.4})",
            self.class_id, self.x, self.y, self.confidence
        )
    }
}

impl From<&Detection> for PyDetection {
    fn from(d: &Detection) -> Self {
        Self {
            class_id: d.class_id,
            x: d.x,
            y: d.y,
            confidence: d.confidence,
        }
    }
}

/// Trained detector; `KeypointDetector()` is empty until `load` is called.
#[pyclass(name = "KeypointDetector")]
pub struct PyDetector {
    inner: KeypointDetector,
}

#[pymethods]
impl PyDetector {
    #[new]
    fn new() -> Self {
        Self {
            inner: KeypointDetector::unloaded(),
        }
    }

    /// Randomly initialized detector from a TOML model section.
    #[staticmethod]
    #[pyo3(signature = (config_toml = "", seed = 0))]
    fn untrained(config_toml: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py)?;
        let (model, ps) = Model::new(&cfg.model, seed).map_err(to_py)?;
        Ok(Self {
            inner: KeypointDetector::from_parts(model, ps),
        })
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load_weights(&path).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn is_loaded(&self) -> bool {
        self.inner.is_loaded()
    }

    /// `"recurrent"` or `"parallel"`.
    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            ScanMode::Recurrent => "recurrent",
            ScanMode::Parallel => "parallel",
        }
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn num_parameters(&self) -> PyResult<usize> {
        Ok(self.inner.parts().map_err(to_py)?.1.numel())
    }

    /// Detections for a square one-channel image given as row-major pixels.
    #[pyo3(signature = (pixels, size, threshold = 0.0))]
    fn predict(&self, py: Python<'_>, pixels: Vec<f64>, size: usize, threshold: f64) -> PyResult<Vec<PyDetection>> {
        let img = image_tensor(pixels, size)?;
        let dets = py.detach(|| self.inner.predict(&img, threshold)).map_err(to_py)?;
        Ok(dets.iter().map(PyDetection::from).collect())
    }
}

/// Read-only view of a generated dataset directory.
#[pyclass(name = "Dataset")]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::open(&path).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.manifest.image_size
    }

    /// Sample ids of `"train"`, `"val"` or `"test"`.
    fn split(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.split(name.parse().map_err(to_py)?).to_vec())
    }

    /// Row-major pixels of one sample.
    fn image(&self, id: usize) -> PyResult<Vec<f64>> {
        self.check(id)?;
        Ok(self.inner.image(id).map_err(to_py)?.into_data())
    }

    /// `(class_id, x, y)` triples in normalized coordinates.
    fn keypoints(&self, id: usize) -> PyResult<Vec<(usize, f64, f64)>> {
        self.check(id)?;
        Ok(self.inner.keypoints(id).iter().map(|k| (k.class_id, k.x, k.y)).collect())
    }
}

impl PyDataset {
    fn check(&self, id: usize) -> PyResult<()> {
        if id >= self.inner.len() {
            return Err(PyValueError::new_err(format!("sample {id} out of range")));
        }
        Ok(())
    }
}

/// Render a dataset into `out_dir` and return its manifest hash.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config_toml = ""))]
fn generate(py: Python<'_>, out_dir: PathBuf, seed: u64, config_toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py)?;
    py.detach(|| build_dataset(&cfg.data, seed, &out_dir))
        .map(|(_, hash)| hash)
        .map_err(to_py)
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Mean pixel distance between matched point lists.
#[pyfunction(name = "epe")]
fn py_epe(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>) -> PyResult<f64> {
    epe(&pred, &gt).map_err(to_py)
}

/// Fraction of points within `alpha * max(height, width)` pixels.
#[pyfunction(name = "pck")]
fn py_pck(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, alpha: f64, height: usize, width: usize) -> PyResult<f64> {
    pck(&pred, &gt, alpha, height, width).map_err(to_py)
}

/// Images per second for a mean latency in milliseconds.
#[pyfunction(name = "throughput")]
fn py_throughput(t_avg_ms: f64) -> f64 {
    throughput(t_avg_ms)
}

/// Run the command-line interface with `args` (without the program name)
/// and return its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| acupoint::cli::run(std::iter::once("acupoint".to_string()).chain(args)))
}

#[pymodule]
fn pyacupoint(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyDataset>()?;
    m.add("CorruptArtifactError", m.py().get_type::<CorruptArtifactError>())?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(py_epe, m)?)?;
    m.add_function(wrap_pyfunction!(py_pck, m)?)?;
    m.add_function(wrap_pyfunction!(py_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
