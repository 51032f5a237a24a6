//! Python bindings: tensors, flows, masks, the transfer network, temporal
//! losses, the stability metric and the training entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use reconet::eval::SceneSequence;
use reconet::flow as fl;
use reconet::losses::{self, TemporalVariant};
use reconet::net::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMetadata};
use reconet::tensor::Tape;
use reconet::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major f32 tensor.
#[pyclass(name = "Tensor", module = "reconet_py", from_py_object)]
#[derive(Clone)]
struct PyTensor(reconet::tensor::Tensor<f32>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        reconet::tensor::Tensor::new(shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor(reconet::tensor::Tensor::zeros(shape))
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f32) -> Self {
        PyTensor(reconet::tensor::Tensor::full(shape, value))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.0.numel()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.0.data().iter().map(|&v| v as f64).sum()
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __eq__(&self, other: &Self) -> bool {
        reconet::tensor::bit_equal(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Per-pixel `(dx, dy)` in the sampling convention.
#[pyclass(name = "FlowField", module = "reconet_py", from_py_object)]
#[derive(Clone)]
struct PyFlow(fl::FlowField);

#[pymethods]
impl PyFlow {
    /// `data` holds interleaved `dx, dy` pairs, row-major.
    #[new]
    fn new(width: usize, height: usize, data: Vec<f32>) -> PyResult<Self> {
        fl::FlowField::new(width, height, data).map(PyFlow).map_err(err)
    }

    #[staticmethod]
    fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        PyFlow(fl::FlowField::constant(width, height, dx, dy))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        fl::load_flo(path).map(PyFlow).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        fl::save_flo(path, &self.0).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<(f32, f32)> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err(format!("({x}, {y}) outside flow")));
        }
        Ok(self.0.get(x, y))
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn magnitude_range(&self) -> (f32, f32) {
        self.0.magnitude_range()
    }
}

/// Binary traceability mask: 1 traceable, 0 occluded.
#[pyclass(name = "OcclusionMask", module = "reconet_py", from_py_object)]
#[derive(Clone)]
struct PyMask(fl::OcclusionMask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(width: usize, height: usize, data: Vec<u8>) -> PyResult<Self> {
        fl::OcclusionMask::new(width, height, data).map(PyMask).map_err(err)
    }

    #[staticmethod]
    fn ones(width: usize, height: usize) -> Self {
        PyMask(fl::OcclusionMask::ones(width, height))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn traceable_count(&self) -> usize {
        self.0.traceable_count()
    }

    fn tolist(&self) -> Vec<u8> {
        self.0.data().to_vec()
    }
}

/// The feed-forward encoder/decoder.
#[pyclass(name = "StyleNet", module = "reconet_py")]
struct PyStyleNet {
    net: reconet::net::StyleNet,
    meta: CheckpointMetadata,
}

#[pymethods]
impl PyStyleNet {
    /// Freshly initialized from `seed`.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        PyStyleNet {
            net: reconet::net::StyleNet::init(seed),
            meta: CheckpointMetadata::default(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, meta) = read_checkpoint(&path).map_err(err)?;
        Ok(PyStyleNet { net, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.net, &self.meta).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.meta.step
    }

    fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// `(name, shape)` of every parameter tensor, in checkpoint order.
    #[staticmethod]
    fn manifest() -> Vec<(String, Vec<usize>)> {
        reconet::net::manifest().into_iter().map(|s| (s.name, s.shape)).collect()
    }

    fn encode(&self, py: Python<'_>, frame: &PyTensor) -> PyResult<PyTensor> {
        let f = frame.0.clone();
        py.detach(|| self.net.encode_eager(&f)).map(PyTensor).map_err(err)
    }

    fn decode(&self, py: Python<'_>, features: &PyTensor) -> PyResult<PyTensor> {
        let f = features.0.clone();
        py.detach(|| self.net.decode_eager(&f)).map(PyTensor).map_err(err)
    }

    /// `[3, H, W]` frame in [0, 1] to a stylized frame of the same shape.
    fn stylize(&self, py: Python<'_>, frame: &PyTensor) -> PyResult<PyTensor> {
        let f = frame.0.clone();
        py.detach(|| self.net.stylize(&f)).map(PyTensor).map_err(err)
    }
}

#[pyfunction]
fn warp(source: &PyTensor, flow: &PyFlow) -> PyResult<PyTensor> {
    fl::warp(&source.0, &flow.0).map(PyTensor).map_err(err)
}

#[pyfunction]
fn occlusion_mask(forward: &PyFlow, backward: &PyFlow) -> PyResult<PyMask> {
    fl::occlusion_mask(&forward.0, &backward.0).map(PyMask).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (flow, mask, factor = 4))]
fn downscale_flow(flow: &PyFlow, mask: &PyMask, factor: usize) -> PyResult<(PyFlow, PyMask)> {
    let (f, m) = fl::downscale_flow(&flow.0, &mask.0, factor).map_err(err)?;
    Ok((PyFlow(f), PyMask(m)))
}

/// Temporal error of `frames` given per-transition flows and masks.
#[pyfunction]
fn e_stab(frames: Vec<PyTensor>, flows: Vec<PyFlow>, masks: Vec<PyMask>) -> PyResult<f64> {
    let seq = SceneSequence::new(
        frames.into_iter().map(|t| t.0).collect(),
        flows.into_iter().map(|f| f.0).collect(),
        masks.into_iter().map(|m| m.0).collect(),
    )
    .map_err(err)?;
    reconet::eval::e_stab(&seq).map_err(err)
}

/// Output-level temporal loss and its gradients with respect to both
/// outputs, evaluated in f64.
#[pyfunction]
#[pyo3(signature = (out_prev, out_cur, in_prev, in_cur, flow, mask, variant = "rgb_lum"))]
fn output_temporal_loss(
    out_prev: &PyTensor,
    out_cur: &PyTensor,
    in_prev: &PyTensor,
    in_cur: &PyTensor,
    flow: &PyFlow,
    mask: &PyMask,
    variant: &str,
) -> PyResult<(f64, PyTensor, PyTensor)> {
    let variant = TemporalVariant::parse(variant).map_err(err)?;
    let mut tape = Tape::<f64>::new();
    let p = tape.param(out_prev.0.cast());
    let c = tape.param(out_cur.0.cast());
    let loss = losses::output_temporal_loss(&mut tape, p, c, &in_prev.0.cast(), &in_cur.0.cast(), &flow.0, &mask.0, variant)
        .map_err(err)?;
    backward_pair(tape, loss, p, c)
}

/// Feature-level temporal loss and its gradients, evaluated in f64.
#[pyfunction]
fn feature_temporal_loss(
    feat_prev: &PyTensor,
    feat_cur: &PyTensor,
    flow: &PyFlow,
    mask: &PyMask,
) -> PyResult<(f64, PyTensor, PyTensor)> {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(feat_prev.0.cast());
    let c = tape.param(feat_cur.0.cast());
    let loss = losses::feature_temporal_loss(&mut tape, p, c, &flow.0, &mask.0).map_err(err)?;
    backward_pair(tape, loss, p, c)
}

fn backward_pair(
    mut tape: Tape<f64>,
    loss: reconet::tensor::Var,
    p: reconet::tensor::Var,
    c: reconet::tensor::Var,
) -> PyResult<(f64, PyTensor, PyTensor)> {
    let value = tape.value(loss).item();
    tape.backward(loss).map_err(err)?;
    let grad = |v| {
        tape.grad(v)
            .map(|g| g.cast::<f32>())
            .unwrap_or_else(|| reconet::tensor::Tensor::zeros(tape.value(v).shape().to_vec()))
    };
    Ok((value, PyTensor(grad(p)), PyTensor(grad(c))))
}

/// Writes a synthetic translating-texture dataset, style image and config
/// under `out`; returns the config path.
#[pyfunction]
#[pyo3(signature = (out, size = 32, frames = 4, scenes = 2, seed = 0))]
fn write_fixture(out: PathBuf, size: usize, frames: usize, scenes: usize, seed: u64) -> PyResult<String> {
    reconet::synthetic::write_fixture(&out, size, frames, scenes, seed)
        .map(|p| p.display().to_string())
        .map_err(err)
}

/// Trains from a config file, writing the loss log and checkpoints under
/// `out`. Returns `(steps, first_total, last_total, model_path)`.
#[pyfunction]
#[pyo3(signature = (config, out, steps = None, overrides = Vec::new()))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    out: PathBuf,
    steps: Option<u64>,
    overrides: Vec<(String, String)>,
) -> PyResult<(u64, Option<f64>, Option<f64>, String)> {
    let mut cfg = reconet::train::TrainConfig::load(&config).map_err(err)?;
    for (k, v) in &overrides {
        cfg.set(k, v, None).map_err(err)?;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let outcome = py.detach(|| reconet::train::train(cfg, &out)).map_err(err)?;
    Ok((
        outcome.steps,
        outcome.first.map(|b| b.total),
        outcome.last.map(|b| b.total),
        outcome.model.display().to_string(),
    ))
}

#[pymodule]
fn reconet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyStyleNet>()?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_mask, m)?)?;
    m.add_function(wrap_pyfunction!(downscale_flow, m)?)?;
    m.add_function(wrap_pyfunction!(e_stab, m)?)?;
    m.add_function(wrap_pyfunction!(output_temporal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(feature_temporal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("PARAMETER_COUNT", reconet::net::parameter_count())?;
    Ok(())
}
