//! Python bindings. Configuration objects cross the boundary as plain dicts
//! with the same keys as the TOML/JSON files; results come back as dicts
//! and nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use t2sg::datagen::{self, DetectionSample, ScenarioKind, ScenarioSpec};
use t2sg::eval::{self, EvalConfig};
use t2sg::model::{ModelConfig, TopoFormer};
use t2sg::scene::{self, Centerline, SpmConfig};
use t2sg::train::{TrainConfig, Trainer as CoreTrainer};

/// Deserializes a Python value (dict, list, str, ...) by way of JSON.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else {
        return Ok(T::default());
    };
    from_py_required(py, obj)
}

fn from_py_required<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn polyline(points: Vec<[f64; 3]>) -> PyResult<Centerline> {
    Centerline::new(points).map_err(value_err)
}

/// One generated scene: ground truth plus the detections the model reads.
#[pyclass(name = "Sample", module = "t2sg", frozen)]
struct PySample(DetectionSample);

#[pymethods]
impl PySample {
    #[getter]
    fn scene_id(&self) -> String {
        self.0.scene_id.clone()
    }

    #[getter]
    fn num_queries(&self) -> usize {
        self.0.num_queries()
    }

    #[getter]
    fn num_lanes(&self) -> usize {
        self.0.scene.lanes.len()
    }

    /// Ground-truth lane edges `(i, j)`.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.scene.edges.iter().copied().collect()
    }

    /// The ground-truth scene graph as a dict (`lanes`, `edges`).
    fn scene<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.scene)
    }

    /// Detected centerlines, one list of `[x, y, z]` points per query.
    fn detections(&self) -> Vec<Vec<[f64; 3]>> {
        self.0.pred_centerlines.iter().map(|c| c.points().to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample({:?}, lanes={}, edges={}, queries={})",
            self.0.scene_id,
            self.0.scene.lanes.len(),
            self.0.scene.edges.len(),
            self.0.num_queries()
        )
    }
}

fn unwrap_samples(samples: &[Bound<'_, PySample>]) -> Vec<DetectionSample> {
    samples.iter().map(|s| s.get().0.clone()).collect()
}

/// Generates one scene. `kind` is `"straight"`, `"t_junction"`,
/// `"crossroad"` or `{"multiway": k}`; `spec` overrides generator fields.
#[pyfunction]
#[pyo3(signature = (kind, seed, spec=None))]
fn generate_scene(py: Python<'_>, kind: &Bound<'_, PyAny>, seed: u64, spec: Option<&Bound<'_, PyAny>>) -> PyResult<PySample> {
    let kind: ScenarioKind = from_py_required(py, kind)?;
    let base: ScenarioSpec = from_py(py, spec)?;
    let spec = ScenarioSpec { kind, seed, ..base };
    let g = datagen::generate_scene(&spec).map_err(value_err)?;
    Ok(PySample(datagen::perturb_detections(&g, &spec).map_err(value_err)?))
}

/// `count` scenes cycling through `kinds`, reproducible from `seed`.
#[pyfunction]
#[pyo3(signature = (kinds, count, seed, spec=None, jobs=1))]
fn generate_dataset(
    py: Python<'_>,
    kinds: &Bound<'_, PyAny>,
    count: usize,
    seed: u64,
    spec: Option<&Bound<'_, PyAny>>,
    jobs: usize,
) -> PyResult<Vec<PySample>> {
    let kinds: Vec<ScenarioKind> = from_py_required(py, kinds)?;
    let base: ScenarioSpec = from_py(py, spec)?;
    let samples = py
        .detach(|| datagen::generate_dataset(&base, &kinds, count, seed, jobs))
        .map_err(value_err)?;
    Ok(samples.into_iter().map(PySample).collect())
}

#[pyfunction]
fn write_dataset(samples: Vec<Bound<'_, PySample>>, path: PathBuf) -> PyResult<()> {
    let header = serde_json::json!({ "source": "python" });
    datagen::write_dataset(&unwrap_samples(&samples), &header, &path).map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PySample>> {
    let (_, samples) = datagen::read_dataset(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(samples.into_iter().map(PySample).collect())
}

/// Spatial proximity matrix of centerlines given as lists of `[x, y, z]`.
#[pyfunction]
#[pyo3(signature = (centerlines, epsilon=1e-6))]
fn spm(centerlines: Vec<Vec<[f64; 3]>>, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
    let lines = centerlines.into_iter().map(polyline).collect::<PyResult<Vec<_>>>()?;
    let cfg = SpmConfig {
        epsilon,
        ..SpmConfig::default()
    };
    let m = scene::spm(&lines, &cfg);
    Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
}

#[pyfunction]
fn discrete_frechet(p: Vec<[f64; 3]>, q: Vec<[f64; 3]>) -> PyResult<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(PyValueError::new_err("polylines must be non-empty"));
    }
    Ok(eval::discrete_frechet(&p, &q))
}

#[pyfunction]
fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> PyResult<f64> {
    eval::ols(det_l, det_t, top_ll, top_lt).map_err(value_err)
}

/// The relation model.
#[pyclass(name = "TopoFormer", module = "t2sg")]
struct PyTopoFormer(TopoFormer);

#[pymethods]
impl PyTopoFormer {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: ModelConfig = from_py(py, config)?;
        Ok(Self(TopoFormer::new(config).map_err(value_err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(TopoFormer::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.config)
    }

    /// Factual and counterfactual edge scores plus class logits.
    fn forward<'py>(&self, py: Python<'py>, sample: &PySample) -> PyResult<Bound<'py, PyAny>> {
        let out = self.0.forward_values((&sample.0).into()).map_err(value_err)?;
        let rows = |m: &t2sg::numeric::Matrix| -> Vec<Vec<f64>> { (0..m.rows()).map(|r| m.row(r).to_vec()).collect() };
        let value = serde_json::json!({
            "e_a": rows(&out.e_a),
            "e_cf": out.e_cf.iter().map(rows).collect::<Vec<_>>(),
            "cls_logits": rows(&out.cls_logits),
        });
        to_py(py, &value)
    }

    /// Predicted scene graph: `{"lanes", "edges", "confidences"}`.
    #[pyo3(signature = (sample, node_threshold=0.3, edge_threshold=0.5))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        sample: &PySample,
        node_threshold: f64,
        edge_threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let g = self
            .0
            .infer((&sample.0).into(), node_threshold, edge_threshold)
            .map_err(value_err)?;
        let value = serde_json::json!({
            "lanes": g.graph.lanes,
            "edges": g.graph.edges,
            "confidences": g.confidences,
        });
        to_py(py, &value)
    }
}

/// AdamW training with the TIE edge loss.
#[pyclass(name = "Trainer", module = "t2sg")]
struct PyTrainer(CoreTrainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model, num_samples, config=None))]
    fn new(py: Python<'_>, model: &PyTopoFormer, num_samples: usize, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: TrainConfig = from_py(py, config)?;
        Ok(Self(CoreTrainer::new(model.0.clone(), config, num_samples).map_err(value_err)?))
    }

    /// One pass over `samples`; returns the epoch's metrics record.
    fn run_epoch<'py>(&mut self, py: Python<'py>, samples: Vec<Bound<'py, PySample>>) -> PyResult<Bound<'py, PyAny>> {
        let data = unwrap_samples(&samples);
        let trainer = &mut self.0;
        let rec = py.detach(|| trainer.run_epoch(&data)).map_err(value_err)?;
        to_py(py, &rec)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step()
    }

    #[getter]
    fn done(&self) -> bool {
        self.0.is_done()
    }

    /// A copy of the model being trained.
    #[getter]
    fn model(&self) -> PyTopoFormer {
        PyTopoFormer(self.0.model.clone())
    }
}

/// Full metric report of `model` on `samples`.
#[pyfunction]
#[pyo3(signature = (model, samples, config=None, jobs=1))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyTopoFormer,
    samples: Vec<Bound<'py, PySample>>,
    config: Option<&Bound<'py, PyAny>>,
    jobs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config: EvalConfig = from_py(py, config)?;
    config.validate().map_err(PyValueError::new_err)?;
    let data = unwrap_samples(&samples);
    let report = py
        .detach(|| eval::evaluate_model(&model.0, &data, &config, jobs))
        .map_err(value_err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "t2sg")]
fn t2sg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`; lets an embedding interpreter
/// build the module without importing the shared library.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyTopoFormer>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(spm, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(ols, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
