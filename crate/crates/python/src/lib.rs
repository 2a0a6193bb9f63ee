use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use mrs_core::evalkit::{self, coco_thresholds, mean_ap, DetectionRecord, GroundTruthRecord};
use mrs_core::gradcheck::GradCase;
use mrs_core::head::{decode_detections, group_levels};
use mrs_core::io;
use mrs_core::model::{cost_report, count_params};
use mrs_core::prune::{self, prune_model, PruneMode};
use mrs_core::{Error, ModelConfig, Variant};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// Dense NCHW float tensor.
#[pyclass(module = "mrs_yolo", name = "Tensor")]
struct PyTensor {
    inner: mrs_core::Tensor,
}

#[pymethods]
impl PyTensor {
    /// `shape` has 1 to 4 dims; shorter shapes are padded with leading ones.
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(PyValueError::new_err(format!("rank {} not in 1..=4", shape.len())));
        }
        let mut s = [1usize; 4];
        s[4 - shape.len()..].copy_from_slice(&shape);
        Ok(Self { inner: mrs_core::Tensor::new(s, data).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_tensor(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_tensor(path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [n, c, h, w] = self.inner.shape();
        (n, c, h, w)
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Detector graph plus its parameters.
#[pyclass(module = "mrs_yolo", name = "Model")]
struct PyModel {
    inner: mrs_core::Model,
}

#[pymethods]
impl PyModel {
    /// Builds from a config dict, or the reference config of `variant` when none is given.
    #[new]
    #[pyo3(signature = (config=None, seed=0, variant="mrs"))]
    fn new(config: Option<&Bound<'_, PyAny>>, seed: u64, variant: &str) -> PyResult<Self> {
        let cfg = match config {
            Some(c) => from_py::<ModelConfig>(c, "config")?,
            None => ModelConfig::reference(match variant {
                "mrs" => Variant::Mrs,
                "baseline" => Variant::Baseline,
                v => return Err(PyValueError::new_err(format!("unknown variant `{v}`"))),
            }),
        };
        Ok(Self { inner: mrs_core::Model::build(&cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_checkpoint(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_checkpoint(path, &self.inner).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn num_params(&self) -> u64 {
        count_params(&self.inner.graph)
    }

    /// Per-layer cost table at `input_size` (defaults to the configured size).
    #[pyo3(signature = (input_size=None))]
    fn summarize<'py>(&self, py: Python<'py>, input_size: Option<(usize, usize)>) -> PyResult<Bound<'py, PyAny>> {
        let size = input_size.unwrap_or(self.inner.config.input_size);
        to_py(py, &cost_report(&self.inner.graph, size).map_err(err)?)
    }

    /// Raw head outputs, box and class maps for each level.
    fn forward(&self, x: &PyTensor) -> PyResult<Vec<PyTensor>> {
        let outs = self.inner.forward(&x.inner).map_err(err)?;
        Ok(outs.into_iter().map(|inner| PyTensor { inner }).collect())
    }

    /// Decoded detections after confidence filtering and per-class NMS.
    #[pyo3(signature = (x, conf=0.25, nms=0.65, image_ids=None))]
    fn detect<'py>(
        &self,
        py: Python<'py>,
        x: &PyTensor,
        conf: f64,
        nms: f64,
        image_ids: Option<Vec<String>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ids = image_ids.unwrap_or_else(|| (0..x.inner.n()).map(|i| i.to_string()).collect());
        if ids.len() != x.inner.n() {
            return Err(PyValueError::new_err("image_ids must match the batch size"));
        }
        let outs = self.inner.forward(&x.inner).map_err(err)?;
        let levels = group_levels(outs, x.inner.h()).map_err(err)?;
        to_py(py, &decode_detections(&levels, &ids, conf, nms))
    }

    /// Returns the pruned model and the plan as a dict.
    #[pyo3(signature = (rate, mode="channel"))]
    fn prune<'py>(&self, py: Python<'py>, rate: f64, mode: &str) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let mode: PruneMode = mode.parse().map_err(err)?;
        let (model, plan) = prune_model(&self.inner, rate, mode).map_err(err)?;
        Ok((PyModel { inner: model }, to_py(py, &plan)?))
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={:?}, params={})", self.inner.config.variant, count_params(&self.inner.graph))
    }
}

/// Finite-difference gradient check of one block; returns the report dict.
#[pyfunction]
#[pyo3(signature = (block, seed=1, tol=1e-4))]
fn gradcheck<'py>(py: Python<'py>, block: &str, seed: u64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let case: GradCase = block.parse().map_err(err)?;
    to_py(py, &case.run(seed, tol).map_err(err)?)
}

/// mAP report over `thresholds` (COCO 0.50:0.95 by default).
#[pyfunction]
#[pyo3(signature = (preds, gts, thresholds=None))]
fn evaluate<'py>(
    py: Python<'py>,
    preds: &Bound<'py, PyAny>,
    gts: &Bound<'py, PyAny>,
    thresholds: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let preds: Vec<DetectionRecord> = from_py(preds, "preds")?;
    let gts: Vec<GroundTruthRecord> = from_py(gts, "gts")?;
    for (i, p) in preds.iter().enumerate() {
        p.validate().map_err(|e| PyValueError::new_err(format!("preds[{i}]: {e}")))?;
    }
    for (i, g) in gts.iter().enumerate() {
        g.validate().map_err(|e| PyValueError::new_err(format!("gts[{i}]: {e}")))?;
    }
    let t = thresholds.unwrap_or_else(coco_thresholds);
    to_py(py, &mean_ap(&preds, &gts, &t).map_err(err)?)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    evalkit::iou(&a, &b)
}

/// LAMP score of each weight, in input order.
#[pyfunction]
fn lamp_scores(weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let s = prune::lamp_scores(&weights).map_err(err)?;
    let mut out = vec![0.0; weights.len()];
    for e in &s.entries {
        out[e.index] = e.score;
    }
    Ok(out)
}

#[pyfunction]
fn read_detections<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &io::read_detections(path).map_err(err)?)
}

#[pyfunction]
fn read_ground_truth<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &io::read_ground_truth(path).map_err(err)?)
}

#[pyfunction]
fn write_detections(path: &str, dets: &Bound<'_, PyAny>) -> PyResult<()> {
    let dets: Vec<DetectionRecord> = from_py(dets, "detections")?;
    io::write_detections(path, &dets).map_err(err)
}

#[pymodule]
fn mrs_yolo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(lamp_scores, m)?)?;
    m.add_function(wrap_pyfunction!(read_detections, m)?)?;
    m.add_function(wrap_pyfunction!(read_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(write_detections, m)?)?;
    m.add("GRADCHECK_BLOCKS", GradCase::ALL.iter().map(|c| c.name()).collect::<Vec<_>>())?;
    Ok(())
}
