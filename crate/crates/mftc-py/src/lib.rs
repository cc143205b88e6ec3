//! Python extension module `mftc`: NumPy-facing bindings for the MFTC-Net
//! 3D segmentation library — synthetic phantoms, the multi-aperture fusion
//! model (forward, training steps, sliding-window prediction, checkpoints),
//! signed distance transforms, and Dice/HD95 metrics.
//!
//! Arrays cross the boundary as NumPy ndarrays in (z, y, x) voxel order;
//! volumes are 3-D, logits are 4-D `[class, z, y, x]`. All computation is
//! f64 and bit-reproducible for a fixed seed.

use std::path::Path;

use numpy::ndarray::{Array1, Array3, Array4};
use numpy::{
    IntoPyArray, PyArray1, PyArray3, PyArray4, PyReadonlyArray1, PyReadonlyArray3,
    PyUntypedArrayMethods,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use mftc_core::aperture::PatchSample;
use mftc_core::edt::signed_distance_to_surface;
use mftc_core::graph::Graph;
use mftc_core::loss::LossConfig;
use mftc_core::metrics::{
    dice_score, evaluate_case, hd95 as hd95_volumes, sliding_window_inference,
    SlidingWindowConfig,
};
use mftc_core::model::{
    forward, leaf_crops, load_checkpoint, model_params, param_count, save_checkpoint,
    store_for_config, store_from_checkpoint, CheckpointMeta, ForwardOptions, ModelConfig,
    RngState,
};
use mftc_core::params::ParamStore;
use mftc_core::phantom::{generate_phantom as phantom_gen, PhantomSpec};
use mftc_core::train::{load_opt_state, loss_and_grad, save_opt_state, AdamW, TrainConfig};
use mftc_core::volume::{LabelVolume, Volume};
use mftc_core::Error;

fn perr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// An (image, labels) volume pair returned to Python.
type VolumePair<'py> = (Bound<'py, PyArray3<f32>>, Bound<'py, PyArray3<u8>>);

fn dims_of<T: numpy::Element>(a: &PyReadonlyArray3<'_, T>) -> (usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2])
}

/// Copies a (possibly strided) 3-D array into a contiguous z,y,x vector.
fn to_vec3<T: numpy::Element + Copy>(a: &PyReadonlyArray3<'_, T>) -> Vec<T> {
    a.as_array().iter().copied().collect()
}

fn label_volume(
    labels: &PyReadonlyArray3<'_, u8>,
    spacing: (f64, f64, f64),
    num_classes: usize,
) -> PyResult<LabelVolume> {
    LabelVolume::new(dims_of(labels), spacing, to_vec3(labels), num_classes).map_err(perr)
}

/// Smallest class count covering both label arrays (at least 2 so that
/// class 1 always has a defined slot).
fn joint_classes(pred: &[u8], gt: &[u8]) -> usize {
    let m = pred.iter().chain(gt.iter()).copied().max().unwrap_or(0);
    (m as usize + 1).max(2)
}

/// Generate one synthetic multi-organ phantom volume.
///
/// Returns `(image, labels)`: a float32 intensity volume and a uint8 label
/// volume of the same shape, with organs labeled 1..=num_organs over a
/// noisy zero-mean background.
#[pyfunction]
#[pyo3(signature = (shape=(48, 48, 48), num_organs=8, min_semi_axis=3.0,
    max_semi_axis=6.0, organ_noise_std=0.02, background_noise_std=0.05, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_phantom<'py>(
    py: Python<'py>,
    shape: (usize, usize, usize),
    num_organs: usize,
    min_semi_axis: f64,
    max_semi_axis: f64,
    organ_noise_std: f64,
    background_noise_std: f64,
    seed: u64,
) -> PyResult<VolumePair<'py>> {
    let spec = PhantomSpec {
        shape,
        num_organs,
        min_semi_axis,
        max_semi_axis,
        organ_noise_std,
        background_noise_std,
        seed,
    };
    let (vol, gt) = phantom_gen(&spec).map_err(perr)?;
    let img = Array3::from_shape_vec(shape, vol.data).expect("phantom length matches shape");
    let lab = Array3::from_shape_vec(shape, gt.labels).expect("phantom length matches shape");
    Ok((img.into_pyarray(py), lab.into_pyarray(py)))
}

/// Signed Euclidean distance to the surface of a boolean mask: zero on
/// surface voxels, negative strictly inside, positive outside; an
/// all-background mask yields +inf everywhere. `spacing` scales each axis.
#[pyfunction]
#[pyo3(signature = (mask, spacing=(1.0, 1.0, 1.0)))]
fn signed_distance<'py>(
    py: Python<'py>,
    mask: PyReadonlyArray3<'py, bool>,
    spacing: (f64, f64, f64),
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let dims = dims_of(&mask);
    let d = signed_distance_to_surface(&to_vec3(&mask), dims, spacing);
    Ok(Array3::from_shape_vec(dims, d).expect("distance length matches mask").into_pyarray(py))
}

/// Dice overlap of one class between two uint8 label volumes.
#[pyfunction]
#[pyo3(signature = (pred, gt, class_label, spacing=(1.0, 1.0, 1.0)))]
fn dice(
    pred: PyReadonlyArray3<'_, u8>,
    gt: PyReadonlyArray3<'_, u8>,
    class_label: u8,
    spacing: (f64, f64, f64),
) -> PyResult<f64> {
    let c = joint_classes(&to_vec3(&pred), &to_vec3(&gt)).max(class_label as usize + 1);
    let p = label_volume(&pred, spacing, c)?;
    let g = label_volume(&gt, spacing, c)?;
    dice_score(&p, &g, class_label).map_err(perr)
}

/// 95th-percentile symmetric surface distance of one class, in physical
/// units. Returns None when the class is empty on either side.
#[pyfunction]
#[pyo3(signature = (pred, gt, class_label, spacing=(1.0, 1.0, 1.0)))]
fn hd95(
    pred: PyReadonlyArray3<'_, u8>,
    gt: PyReadonlyArray3<'_, u8>,
    class_label: u8,
    spacing: (f64, f64, f64),
) -> PyResult<Option<f64>> {
    let c = joint_classes(&to_vec3(&pred), &to_vec3(&gt)).max(class_label as usize + 1);
    let p = label_volume(&pred, spacing, c)?;
    let g = label_volume(&gt, spacing, c)?;
    hd95_volumes(&p, &g, class_label).map_err(perr)
}

/// Per-class Dice and HD95 over all non-background classes present in
/// either volume, plus their means. Returns a dict mirroring the library's
/// metrics report.
#[pyfunction]
#[pyo3(signature = (pred, gt, spacing=(1.0, 1.0, 1.0), case_id="case"))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: PyReadonlyArray3<'py, u8>,
    gt: PyReadonlyArray3<'py, u8>,
    spacing: (f64, f64, f64),
    case_id: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let c = joint_classes(&to_vec3(&pred), &to_vec3(&gt));
    let p = label_volume(&pred, spacing, c)?;
    let g = label_volume(&gt, spacing, c)?;
    let report = evaluate_case(&p, &g, case_id).map_err(perr)?;
    let out = PyDict::new(py);
    out.set_item("case_id", report.case_id)?;
    let per_class = PyDict::new(py);
    for (cls, m) in &report.per_class {
        let entry = PyDict::new(py);
        entry.set_item("dice", m.dice)?;
        entry.set_item("hd95", m.hd95)?;
        per_class.set_item(*cls, entry)?;
    }
    out.set_item("per_class", per_class)?;
    out.set_item("mean_dice", report.mean_dice)?;
    out.set_item("mean_hd95", report.mean_hd95)?;
    Ok(out)
}

/// JSON for the desk-scale model configuration (runs in seconds on a CPU).
#[pyfunction]
fn desk_config() -> String {
    serde_json::to_string_pretty(&ModelConfig::desk()).expect("config serializes")
}

/// JSON for the publication-scale model configuration (~45M parameters).
#[pyfunction]
fn paper_config() -> String {
    serde_json::to_string_pretty(&ModelConfig::paper()).expect("config serializes")
}

/// Closed-form learnable parameter count for a model configuration JSON,
/// without allocating any weights.
#[pyfunction(name = "param_count")]
fn param_count_py(config: &str) -> PyResult<usize> {
    let cfg: ModelConfig =
        serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?;
    param_count(&cfg).map_err(perr)
}

/// A multi-aperture fused transformer-convolution segmentation model with
/// its parameters and optimizer state.
///
/// Construct with a configuration JSON (see `desk_config()` /
/// `paper_config()`) or None for the desk preset. `train_step` consumes one
/// labeled patch; `predict` runs Gaussian-blended sliding-window inference
/// over a whole volume; `save`/`load` round-trip parameters bit-exactly.
#[pyclass(module = "mftc")]
struct Model {
    cfg: TrainConfig,
    store: ParamStore,
    opt: AdamW,
}

impl Model {
    fn logits_for_patch(&mut self, patch: &[f64]) -> mftc_core::Result<Vec<f64>> {
        let mc = self.cfg.model.clone();
        let mut g = Graph::new();
        self.store.begin_graph();
        let params = model_params(&mut g, &mut self.store, &mc)?;
        let crops = leaf_crops(&mut g, patch, mc.patch, mc.apertures)?;
        let out = forward(&mut g, &params, &mc, &crops, ForwardOptions::default())?;
        Ok(g.data(out.logits).to_vec())
    }

    fn check_patch_shape(&self, dims: (usize, usize, usize)) -> PyResult<()> {
        let p = self.cfg.model.patch;
        if dims != (p, p, p) {
            return Err(PyValueError::new_err(format!(
                "expected a cubic patch of shape ({p}, {p}, {p}), got {dims:?}"
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config=None, seed=0, weight_decay=5e-5, lambda_dist=1.0))]
    fn new(
        config: Option<&str>,
        seed: u64,
        weight_decay: f64,
        lambda_dist: f64,
    ) -> PyResult<Self> {
        let model: ModelConfig = match config {
            Some(s) => serde_json::from_str(s)
                .map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?,
            None => ModelConfig::desk(),
        };
        let cfg = TrainConfig {
            model,
            weight_decay,
            loss: LossConfig { lambda_dist, ..LossConfig::default() },
            ..TrainConfig::default()
        };
        cfg.validate().map_err(perr)?;
        let store = store_for_config(&cfg.model, seed).map_err(perr)?;
        let opt = AdamW::new(store.num_scalars(), weight_decay);
        Ok(Model { cfg, store, opt })
    }

    /// Number of learnable tensors.
    #[getter]
    fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Number of learnable scalars (the flat parameter vector length).
    #[getter]
    fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Cubic training patch edge length.
    #[getter]
    fn patch(&self) -> usize {
        self.cfg.model.patch
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.cfg.model.num_classes
    }

    #[getter]
    fn apertures(&self) -> usize {
        self.cfg.model.apertures
    }

    /// The model configuration as JSON.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string_pretty(&self.cfg.model).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        let m = &self.cfg.model;
        format!(
            "Model(patch={}, apertures={}, classes={}, fusion={}, scalars={})",
            m.patch,
            m.apertures,
            m.num_classes,
            m.fusion_enabled,
            self.store.num_scalars()
        )
    }

    /// Forward pass over one float64 patch of shape (patch, patch, patch);
    /// returns logits of shape (num_classes, patch, patch, patch).
    fn forward<'py>(
        &mut self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        self.check_patch_shape(dims_of(&image))?;
        let logits = self.logits_for_patch(&to_vec3(&image)).map_err(perr)?;
        let (c, p) = (self.cfg.model.num_classes, self.cfg.model.patch);
        Ok(Array4::from_shape_vec((c, p, p, p), logits)
            .expect("logit length matches shape")
            .into_pyarray(py))
    }

    /// One optimizer step on a labeled patch (AdamW on the combined Dice +
    /// cross-entropy + distance loss). Returns the loss components as a
    /// dict with keys total, dice, ce, dist.
    #[pyo3(signature = (image, labels, lr=1e-3))]
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        labels: PyReadonlyArray3<'py, u8>,
        lr: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_patch_shape(dims_of(&image))?;
        self.check_patch_shape(dims_of(&labels))?;
        let lab = to_vec3(&labels);
        let c = self.cfg.model.num_classes;
        if let Some(&bad) = lab.iter().find(|&&l| l as usize >= c) {
            return Err(PyValueError::new_err(format!(
                "label value {bad} out of range for num_classes {c}"
            )));
        }
        let p = self.cfg.model.patch;
        let sample = PatchSample {
            image: to_vec3(&image),
            labels: lab,
            shape: (p, p, p),
            corner: (0, 0, 0),
            case_id: "py".into(),
        };
        let (comp, grad) = loss_and_grad(&self.cfg, &mut self.store, &[sample]).map_err(perr)?;
        let mut theta = self.store.to_flat();
        self.opt.apply(&mut theta, &grad, lr);
        self.store.load_flat(&theta).map_err(perr)?;
        let out = PyDict::new(py);
        out.set_item("total", comp.total)?;
        out.set_item("dice", comp.dice)?;
        out.set_item("ce", comp.ce)?;
        out.set_item("dist", comp.dist)?;
        Ok(out)
    }

    /// Segment a whole float64 volume with Gaussian-blended sliding-window
    /// inference; returns a uint8 label volume of the same shape.
    #[pyo3(signature = (image, spacing=(1.0, 1.0, 1.0)))]
    fn predict<'py>(
        &mut self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        spacing: (f64, f64, f64),
    ) -> PyResult<Bound<'py, PyArray3<u8>>> {
        let dims = dims_of(&image);
        let data: Vec<f32> = image.as_array().iter().map(|&v| v as f32).collect();
        let vol = Volume::new(dims, spacing, data, "py").map_err(perr)?;
        let sw = SlidingWindowConfig::new(self.cfg.model.patch, self.cfg.model.num_classes);
        let mc = self.cfg.model.clone();
        let store = &mut self.store;
        let pred = sliding_window_inference(&vol, &sw, |patch: &[f64]| {
            let mut g = Graph::new();
            store.begin_graph();
            let params = model_params(&mut g, store, &mc)?;
            let crops = leaf_crops(&mut g, patch, mc.patch, mc.apertures)?;
            let out = forward(&mut g, &params, &mc, &crops, ForwardOptions::default())?;
            Ok(g.data(out.logits).to_vec())
        })
        .map_err(perr)?;
        Ok(Array3::from_shape_vec(dims, pred.labels)
            .expect("prediction length matches shape")
            .into_pyarray(py))
    }

    /// The flat parameter vector in canonical order (a copy).
    fn parameters<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        Array1::from_vec(self.store.to_flat()).into_pyarray(py)
    }

    /// Overwrite all parameters from a flat vector in canonical order.
    fn load_parameters(&mut self, flat: PyReadonlyArray1<'_, f64>) -> PyResult<()> {
        let v: Vec<f64> = flat.as_array().iter().copied().collect();
        self.store.load_flat(&v).map_err(perr)
    }

    /// Write `<stem>.json` + `<stem>.bin` (parameters) and `<stem>.opt.bin`
    /// (optimizer moments).
    fn save(&self, stem: &str) -> PyResult<()> {
        let meta = CheckpointMeta {
            config: self.cfg.model.clone(),
            epoch: 0,
            best_metric: 0.0,
            rng_state: RngState::capture(&ChaCha12Rng::seed_from_u64(0)),
            param_scalars: self.store.num_scalars(),
        };
        save_checkpoint(Path::new(stem), &meta, &self.store).map_err(perr)?;
        save_opt_state(Path::new(stem), &self.opt).map_err(perr)
    }

    /// Load a model (and its optimizer moments, when present) from a
    /// checkpoint stem written by `save`.
    #[staticmethod]
    #[pyo3(signature = (stem, weight_decay=5e-5, lambda_dist=1.0))]
    fn load(stem: &str, weight_decay: f64, lambda_dist: f64) -> PyResult<Model> {
        let (meta, flat) = load_checkpoint(Path::new(stem)).map_err(perr)?;
        let store = store_from_checkpoint(&meta, &flat).map_err(perr)?;
        let opt = load_opt_state(Path::new(stem), weight_decay)
            .unwrap_or_else(|_| AdamW::new(store.num_scalars(), weight_decay));
        let cfg = TrainConfig {
            model: meta.config,
            weight_decay,
            loss: LossConfig { lambda_dist, ..LossConfig::default() },
            ..TrainConfig::default()
        };
        cfg.validate().map_err(perr)?;
        Ok(Model { cfg, store, opt })
    }
}

#[pymodule]
fn mftc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(signed_distance, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(paper_config, m)?)?;
    m.add_function(wrap_pyfunction!(param_count_py, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
