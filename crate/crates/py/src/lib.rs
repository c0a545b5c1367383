//! Python bindings for the phygen core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use phygen::datapipe::{self, WeightSpec};
use phygen::evalkit;
use phygen::flow_toy::{self, LatentGrid};
use phygen::geometry::{obb_overlap as core_obb_overlap, oriented_rect, Vec2};
use phygen::pipeline;
use phygen::rectifier::{self, RectifierModel};
use phygen::scenario_gen::{self, RolloutConfig, SceneKind};
use phygen::scene::SceneLog;
use phygen::Error;

type Pose = (f64, f64, f64, f64, f64, f64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<SceneKind> {
    match kind {
        "nominal" => Ok(SceneKind::Nominal),
        "ego" => Ok(SceneKind::Ego),
        "adv" => Ok(SceneKind::Adv),
        _ => Err(PyValueError::new_err(format!(
            "unknown scene kind {kind:?}, expected nominal, ego or adv"
        ))),
    }
}

/// A simulated scene log.
#[pyclass(name = "SceneLog", frozen)]
struct PySceneLog {
    inner: SceneLog,
}

#[pymethods]
impl PySceneLog {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: datapipe::from_bytes(text.as_bytes()).map_err(to_py)?,
        })
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let bytes = datapipe::to_bytes(&self.inner).map_err(to_py)?;
        String::from_utf8(bytes).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn subject_id(&self) -> u32 {
        self.inner.subject_id()
    }

    /// `(event_type, frame, subject_id, partner_id)` tuples.
    fn events(&self) -> Vec<(String, usize, u32, Option<u32>)> {
        self.inner
            .events
            .iter()
            .map(|e| {
                let name = serde_json::to_value(e.event_type)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                (name, e.t_event, e.subject_id, e.partner_id)
            })
            .collect()
    }

    /// Number of clips the log yields.
    fn clip_count(&self) -> usize {
        datapipe::extract_clips(&self.inner).len()
    }

    /// Maximum subject acceleration of each clip.
    fn clip_max_accel(&self) -> PyResult<Vec<f64>> {
        datapipe::extract_clips(&self.inner)
            .iter()
            .map(|c| evalkit::max_accel(c).map_err(to_py))
            .collect()
    }
}

/// Simulates one scene with default rollout settings.
#[pyfunction]
fn simulate_scene(kind: &str, seed: u64) -> PyResult<PySceneLog> {
    let log = scenario_gen::simulate_scene(&RolloutConfig::default(), parse_kind(kind)?, seed).map_err(to_py)?;
    Ok(PySceneLog { inner: log })
}

/// Overlap test for two oriented boxes given as `(x, y, yaw, length, width)`.
#[pyfunction]
fn obb_overlap(a: (f64, f64, f64, f64, f64), b: (f64, f64, f64, f64, f64)) -> PyResult<bool> {
    let r = |(x, y, yaw, l, w): (f64, f64, f64, f64, f64)| oriented_rect(Vec2::new(x, y), yaw, l, w);
    core_obb_overlap(&r(a), &r(b)).map_err(to_py)
}

/// Per-frame event weights for a clip of `t_len` frames.
#[pyfunction]
#[pyo3(signature = (event_frames, t_len, lambda_event = 10.0))]
fn temporal_weights(event_frames: Vec<usize>, t_len: usize, lambda_event: f64) -> PyResult<Vec<f64>> {
    let spec = WeightSpec {
        lambda_event,
        ..WeightSpec::default()
    };
    spec.validate().map_err(to_py)?;
    Ok(datapipe::temporal_weights(&event_frames, t_len, &spec))
}

/// Flow interpolation `t z1 + (1 - t) z0` on flat value lists.
#[pyfunction]
fn interpolate(z0: Vec<f64>, z1: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let g = |v: Vec<f64>| LatentGrid::from_vec(1, 1, v.len(), v).map_err(to_py);
    Ok(flow_toy::interpolate(&g(z0)?, &g(z1)?, t).map_err(to_py)?.values)
}

/// A trained rectifier checkpoint.
#[pyclass(name = "Rectifier", frozen)]
struct PyRectifier {
    inner: RectifierModel,
}

#[pymethods]
impl PyRectifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: rectifier::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Rectifies every clip of a log; returns per clip, per agent, the pose
    /// list `(x, y, z, roll, pitch, yaw)`.
    fn rectify_log(&self, log: &PySceneLog) -> PyResult<Vec<Vec<Vec<Pose>>>> {
        let cfg = &self.inner.config;
        pipeline::pairs_of_log(&log.inner, &cfg.weights, cfg.env_resolution)
            .iter()
            .map(|(_, p)| {
                let trajs = pipeline::rectify_pair(&self.inner, p).map_err(to_py)?;
                Ok(trajs
                    .iter()
                    .map(|t| {
                        t.poses
                            .iter()
                            .map(|q| (q.x, q.y, q.z, q.roll, q.pitch, q.yaw))
                            .collect()
                    })
                    .collect())
            })
            .collect()
    }
}

/// Runs the command line with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    phygen::cli::run_cli(std::iter::once("phygen".to_string()).chain(args))
}

#[pyfunction]
fn version() -> String {
    phygen::cli::version_text()
}

#[pymodule]
fn phygen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySceneLog>()?;
    m.add_class::<PyRectifier>()?;
    m.add_function(wrap_pyfunction!(simulate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(obb_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_weights, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
