//! Python bindings. Reports and configs cross the boundary as JSON-shaped
//! dicts; images as `Image` objects holding row-major RGB floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use imfa_core::budget::{budget as budget_report, BudgetQuery};
use imfa_core::checkpoint::{self, CheckpointConfig};
use imfa_core::config::RunConfig;
use imfa_core::data::{generate_dataset as write_scenes, generate_scene as make_scene, read_dataset, SceneAnnotation, SceneOptions};
use imfa_core::diagnostics::{op_suite, pipeline_check};
use imfa_core::eval::{detections_from_outputs, evaluate as ap_report, Detection, MAX_DETECTIONS};
use imfa_core::imageio::{read_image, write_blob};
use imfa_core::imfa::{infer as run_infer, init_params, ForwardOptions};
use imfa_core::matching::hungarian_match;
use imfa_core::params::ParamStore;
use imfa_core::pyramid::Image as CoreImage;
use imfa_core::train::{evaluate_dataset, train as run_training};
use imfa_core::visualize::{visualize as render_svg, VisualizeOptions};
use imfa_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Data(_) | Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Hands a serializable value to Python through the `json` module.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// RGB image with values in `[0, 1]`.
#[pyclass(module = "imfa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Image {
    inner: CoreImage,
}

#[pymethods]
impl Image {
    /// `data` holds `height·width·3` floats, row-major, channels last.
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        CoreImage::new(height, width, data).map(|inner| Image { inner }).map_err(py_err)
    }

    /// Reads a raw image blob or a binary PPM.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_image(&path).map(|inner| Image { inner }).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_blob(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn flipped(&self) -> Self {
        Image { inner: self.inner.flipped() }
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

fn scene_options(size: usize, min_objects: usize, max_objects: usize) -> SceneOptions {
    SceneOptions {
        size,
        min_objects,
        max_objects,
        ..SceneOptions::default()
    }
}

/// One synthetic scene: `(image, boxes, classes)` with normalized
/// `(cx, cy, w, h)` boxes.
#[pyfunction]
#[pyo3(signature = (seed, size = 128, min_objects = 1, max_objects = 4))]
fn generate_scene(seed: u64, size: usize, min_objects: usize, max_objects: usize) -> PyResult<(Image, Vec<[f64; 4]>, Vec<usize>)> {
    let (img, ann) = make_scene(seed, &scene_options(size, min_objects, max_objects)).map_err(py_err)?;
    Ok((Image { inner: img }, ann.boxes, ann.classes))
}

/// Writes `n` scenes under `root`; returns the number written.
#[pyfunction]
#[pyo3(signature = (root, n, seed = 0, size = 128, min_objects = 1, max_objects = 4))]
fn generate_dataset(root: PathBuf, n: usize, seed: u64, size: usize, min_objects: usize, max_objects: usize) -> PyResult<usize> {
    write_scenes(&root, n, seed, &scene_options(size, min_objects, max_objects))
        .map(|d| d.len())
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (height = 256, width = 256, d = 64, strides = vec![8, 16, 32], num_queries = 30, sampling_ratio = 0.2, keypoints = 8))]
#[allow(clippy::too_many_arguments)]
fn budget<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    d: usize,
    strides: Vec<usize>,
    num_queries: usize,
    sampling_ratio: f64,
    keypoints: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let report = budget_report(&BudgetQuery {
        height,
        width,
        d,
        dense_strides: strides,
        num_queries,
        sampling_ratio,
        keypoints,
    })
    .map_err(py_err)?;
    to_py(py, &report)
}

/// AP report for `detections[i] = [(box, class, score), ...]` against
/// `ground_truth[i] = (boxes, classes)`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, num_classes = 3))]
fn evaluate<'py>(
    py: Python<'py>,
    detections: Vec<Vec<([f64; 4], usize, f64)>>,
    ground_truth: Vec<(Vec<[f64; 4]>, Vec<usize>)>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let dets: Vec<Vec<Detection>> = detections
        .into_iter()
        .map(|img| img.into_iter().map(|(bbox, class, score)| Detection { bbox, class, score }).collect())
        .collect();
    let gts: Vec<SceneAnnotation> = ground_truth.into_iter().map(|(boxes, classes)| SceneAnnotation { boxes, classes }).collect();
    to_py(py, &ap_report(&dets, &gts, num_classes).map_err(py_err)?)
}

/// Minimum-cost assignment of a rectangular cost matrix; returns
/// `(row, column)` pairs.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let n = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    let flat: Vec<f64> = cost.into_iter().flatten().collect();
    hungarian_match(&flat, n, g).map(|m| m.pairs).map_err(py_err)
}

/// Per-operation gradient checks, plus the full pipeline unless
/// `ops_only`.
#[pyfunction]
#[pyo3(signature = (seed = 0, ops_only = true, max_coords = None))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, ops_only: bool, max_coords: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let mut results = op_suite(seed).map_err(py_err)?;
    if !ops_only {
        results.push(pipeline_check(seed, max_coords).map_err(py_err)?);
    }
    to_py(py, &results)
}

/// Detector parameters together with their run configuration.
#[pyclass(module = "imfa")]
struct Model {
    config: RunConfig,
    params: ParamStore<f32>,
}

#[pymethods]
impl Model {
    /// Fresh parameters. `config` is a (possibly partial) run-config dict
    /// laid over the defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(obj) => RunConfig::default().merge_json(&from_py(py, obj)?).map_err(py_err)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(py_err)?;
        let params = init_params(&cfg.model, cfg.seed).map_err(py_err)?;
        Ok(Model { config: cfg, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = checkpoint::load(&path).map_err(py_err)?;
        Ok(Model {
            config: ckpt.config.run,
            params: ckpt.params,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointConfig {
            run: self.config.clone(),
            seed: self.config.seed,
            precision: "f32".into(),
            threads: rayon::current_num_threads(),
            step: 0,
        };
        checkpoint::save(&path, &self.params, &meta).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.params.names().to_vec()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Last-stage class logits `[N][C]` and boxes `[N][4]`.
    fn infer(&self, image: &Image) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let (logits, boxes) = run_infer(&image.inner, &self.config.model, &self.params, ForwardOptions::default()).map_err(py_err)?;
        let rows = |t: &imfa_core::tensor::Tensor<f32>| t.data().chunks(t.last_dim()).map(<[f32]>::to_vec).collect();
        Ok((rows(&logits), rows(&boxes)))
    }

    /// Top detections as `(box, class, score)`, best first.
    #[pyo3(signature = (image, max_detections = MAX_DETECTIONS))]
    fn detect(&self, image: &Image, max_detections: usize) -> PyResult<Vec<([f64; 4], usize, f64)>> {
        let (logits, boxes) = run_infer(&image.inner, &self.config.model, &self.params, ForwardOptions::default()).map_err(py_err)?;
        let dets = detections_from_outputs(&logits, &boxes, max_detections).map_err(py_err)?;
        Ok(dets.into_iter().map(|d| (d.bbox, d.class, d.score)).collect())
    }

    /// SVG overlay of the last sampling stage.
    #[pyo3(signature = (image, zoom = 4.0))]
    fn visualize(&self, image: &Image, zoom: f64) -> PyResult<String> {
        let opts = VisualizeOptions {
            zoom,
            ..VisualizeOptions::default()
        };
        render_svg(&image.inner, &self.config.model, &self.params, &opts).map_err(py_err)
    }

    /// AP report over a dataset directory.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let set = read_dataset(&dataset).map_err(py_err)?;
        to_py(py, &evaluate_dataset(&self.params, &self.config.model, &set).map_err(py_err)?)
    }
}

/// Trains from scratch on `dataset`; returns the model and the per-step
/// metrics.
#[pyfunction]
#[pyo3(signature = (dataset, config = None))]
fn train<'py>(py: Python<'py>, dataset: PathBuf, config: Option<&Bound<'_, PyAny>>) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = match config {
        Some(obj) => RunConfig::default().merge_json(&from_py(py, obj)?).map_err(py_err)?,
        None => RunConfig::default(),
    };
    let set = read_dataset(&dataset).map_err(py_err)?;
    let outcome = run_training(&cfg, &set, &mut std::io::sink()).map_err(py_err)?;
    let metrics = to_py(py, &outcome.metrics)?;
    Ok((
        Model {
            config: cfg,
            params: outcome.params,
        },
        metrics,
    ))
}

#[pymodule]
fn imfa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
