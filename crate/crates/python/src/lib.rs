//! Python bindings for labelmend.
//!
//! Arrays cross the boundary as flat lists in row-major order; label maps use
//! `None` for unlabeled pixels.

use std::collections::BTreeSet;
use std::path::PathBuf;

use labelmend::camlab::{assign_labels, compute_cam, ClassifierWeights};
use labelmend::corrector::{correct_image, embed_clean, read_manifest, run_pipeline, CorrectionConfig};
use labelmend::detector::{detect_clean, pixel_loss, ProbabilityMap};
use labelmend::evalkit::iou as iou_report;
use labelmend::graphbuild::{handcrafted_features, pool_features, ImageGraph, Symmetrize};
use labelmend::superpixel::{slic, SlicParams, SuperpixelPartition};
use labelmend::synth::{generate_suite, write_scenes, SuiteSpec};
use labelmend::tensorio::{self, ImageRgb, LabelMap};
use labelmend::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for labelmend::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// N-dimensional f32 array (LMT1 on disk).
#[pyclass(name = "Tensor", module = "pylabelmend", frozen)]
struct PyTensor(tensorio::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        tensorio::Tensor::new(dims, data).py().map(PyTensor)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        tensorio::read_tensor(path).py().map(PyTensor)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        tensorio::write_tensor(&self.0, path).py()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.0.dims())
    }
}

/// Per-pixel class labels (PGM on disk, 255 = unlabeled).
#[pyclass(name = "LabelMap", module = "pylabelmend", frozen)]
struct PyLabelMap(LabelMap);

#[pymethods]
impl PyLabelMap {
    #[new]
    fn new(height: usize, width: usize, num_classes: usize, labels: Vec<Option<u8>>) -> PyResult<Self> {
        LabelMap::new(height, width, num_classes, labels).py().map(PyLabelMap)
    }

    #[staticmethod]
    fn read(path: PathBuf, num_classes: usize) -> PyResult<Self> {
        tensorio::read_label_map(path, num_classes).py().map(PyLabelMap)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        tensorio::write_label_map(&self.0, path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<Option<u8>> {
        self.0.labels().to_vec()
    }

    fn labeled_count(&self) -> usize {
        self.0.labeled_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelMap({}x{}, classes={})",
            self.0.height(),
            self.0.width(),
            self.0.num_classes()
        )
    }
}

/// RGB image with channels in `[0, 1]` (PPM on disk).
#[pyclass(name = "Image", module = "pylabelmend", frozen)]
struct PyImage(ImageRgb);

#[pymethods]
impl PyImage {
    /// `planar` holds the R plane, then G, then B.
    #[new]
    fn new(height: usize, width: usize, planar: Vec<f32>) -> PyResult<Self> {
        ImageRgb::from_planar(height, width, planar).py().map(PyImage)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        tensorio::read_image(path).py().map(PyImage)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }
}

#[pyclass(name = "Partition", module = "pylabelmend", frozen)]
struct PyPartition(SuperpixelPartition);

#[pymethods]
impl PyPartition {
    #[getter]
    fn count(&self) -> usize {
        self.0.count()
    }

    #[getter]
    fn assignment(&self) -> Vec<u32> {
        self.0.assignment().to_vec()
    }

    fn sizes(&self) -> Vec<usize> {
        self.0.sizes()
    }
}

/// Superpixel graph: node features, filtered adjacency with self-loops.
#[pyclass(name = "Graph", module = "pylabelmend", frozen)]
struct PyGraph(ImageGraph);

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        labelmend::graphbuild::read_graph(path).py().map(PyGraph)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        labelmend::graphbuild::write_graph(&self.0, path).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn adjacency(&self) -> Vec<Vec<usize>> {
        self.0.adjacency().to_vec()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma()
    }

    /// Undirected edges excluding self-loops.
    #[getter]
    fn edge_count(&self) -> usize {
        self.0.edge_count() / 2
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.features().dim()
    }
}

/// Pipeline settings, built from a TOML string with kebab-case keys.
#[pyclass(name = "PipelineConfig", module = "pylabelmend", frozen)]
struct PyConfig(labelmend::PipelineConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let cfg = labelmend::PipelineConfig::from_toml_str(toml).py()?;
        cfg.validate().py()?;
        Ok(PyConfig(cfg))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }
}

/// CAM planes from a feature stack and classifier weights, then initial
/// labels with a background threshold.
#[pyfunction]
#[pyo3(signature = (features, weights, relevant, bg_thresh = labelmend::camlab::DEFAULT_BACKGROUND_THRESHOLD))]
fn initial_labels(features: &PyTensor, weights: &PyTensor, relevant: Vec<u8>, bg_thresh: f64) -> PyResult<PyLabelMap> {
    let weights = ClassifierWeights::from_tensor(&weights.0).py()?;
    let relevant: BTreeSet<u8> = relevant.into_iter().collect();
    let scores = compute_cam(&features.0, &weights, &relevant).py()?;
    assign_labels(&scores, bg_thresh).py().map(PyLabelMap)
}

/// `-ln p(init)` per pixel as an `[H, W]` tensor.
#[pyfunction]
fn loss_map(probs: &PyTensor, init: &PyLabelMap) -> PyResult<PyTensor> {
    let probs = ProbabilityMap::from_tensor(&probs.0).py()?;
    pixel_loss(&probs, &init.0).py().map(PyTensor)
}

/// Initial labels kept where the loss is at most `theta`, unlabeled elsewhere.
#[pyfunction]
fn clean_labels(losses: &PyTensor, init: &PyLabelMap, theta: f64) -> PyResult<PyLabelMap> {
    let mask = detect_clean(&losses.0, theta).py()?;
    mask.apply(&init.0).py().map(PyLabelMap)
}

#[pyfunction]
#[pyo3(signature = (
    image,
    count = labelmend::superpixel::DEFAULT_SUPERPIXELS,
    compactness = labelmend::superpixel::DEFAULT_COMPACTNESS,
    iterations = labelmend::superpixel::DEFAULT_ITERATIONS,
))]
fn superpixels(image: &PyImage, count: usize, compactness: f64, iterations: usize) -> PyResult<PyPartition> {
    let params = SlicParams {
        target_count: count,
        compactness,
        iterations,
    };
    slic(&image.0, params).py().map(PyPartition)
}

/// Builds the graph from dense features when given, else handcrafted ones.
#[pyfunction]
#[pyo3(signature = (image, partition, features = None, symmetrize = "or"))]
fn build_graph(
    image: &PyImage,
    partition: &PyPartition,
    features: Option<&PyTensor>,
    symmetrize: &str,
) -> PyResult<PyGraph> {
    let mode: Symmetrize = symmetrize.parse().py()?;
    let nodes = match features {
        Some(t) => pool_features(&t.0, &partition.0, (image.0.height(), image.0.width())).py()?,
        None => handcrafted_features(&image.0, &partition.0).py()?,
    };
    ImageGraph::build(nodes, &partition.0, mode).py().map(PyGraph)
}

/// Trains on the clean superpixels of one image and returns the corrected map.
#[pyfunction]
#[pyo3(signature = (graph, partition, init, losses, config = None, seed = 0))]
fn correct(
    py: Python<'_>,
    graph: &PyGraph,
    partition: &PyPartition,
    init: &PyLabelMap,
    losses: &PyTensor,
    config: Option<&PyConfig>,
    seed: u64,
) -> PyResult<PyLabelMap> {
    let cfg = config.map(|c| c.0.clone()).unwrap_or_default();
    let mask = detect_clean(&losses.0, cfg.theta).py()?;
    let seeds = embed_clean(&mask, &init.0, &partition.0).py()?;
    let ccfg = CorrectionConfig {
        train: cfg.train_config(seed),
        shape: cfg.gat_shape(),
        trust_gat_everywhere: cfg.trust_gat_everywhere,
    };
    let result = py
        .detach(|| correct_image(&graph.0, &seeds, &partition.0, &init.0, &ccfg))
        .py()?;
    Ok(PyLabelMap(result.corrected))
}

/// Per-class IoU, mean IoU and pixel accuracy over labeled ground truth.
#[pyfunction]
fn iou<'py>(py: Python<'py>, pred: &PyLabelMap, gt: &PyLabelMap) -> PyResult<Bound<'py, PyDict>> {
    let r = iou_report(&pred.0, &gt.0).py()?;
    let out = PyDict::new(py);
    out.set_item("mean_iou", r.mean_iou)?;
    out.set_item("pixel_accuracy", r.pixel_accuracy)?;
    let per_class = PyDict::new(py);
    for c in &r.per_class {
        per_class.set_item(c.class, c.iou())?;
    }
    out.set_item("per_class", per_class)?;
    Ok(out)
}

/// Runs the whole pipeline over a manifest. Returns `(id, error or None)`
/// pairs sorted by id.
#[pyfunction]
#[pyo3(signature = (manifest, outdir, config = None))]
fn run_manifest(
    py: Python<'_>,
    manifest: PathBuf,
    outdir: PathBuf,
    config: Option<&PyConfig>,
) -> PyResult<Vec<(String, Option<String>)>> {
    let cfg = config.map(|c| c.0.clone()).unwrap_or_default();
    let rows = read_manifest(&manifest).py()?;
    let summary = py.detach(|| run_pipeline(&rows, &cfg, &outdir)).py()?;
    Ok(summary.rows.into_iter().map(|r| (r.id, r.outcome.err())).collect())
}

/// Writes a synthetic suite with manifests into `outdir`; returns the count.
#[pyfunction]
#[pyo3(signature = (outdir, count = 10, seed = 0, height = 128, width = 128))]
fn synth_suite(outdir: PathBuf, count: usize, seed: u64, height: usize, width: usize) -> PyResult<usize> {
    let spec = SuiteSpec {
        count,
        seed,
        height,
        width,
        ..SuiteSpec::default()
    };
    let scenes = generate_suite(&spec).py()?;
    write_scenes(&outdir, scenes.iter().map(|(id, _, s)| (id.as_str(), s))).py()
}

#[pymodule]
fn pylabelmend(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyPartition>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(initial_labels, m)?)?;
    m.add_function(wrap_pyfunction!(loss_map, m)?)?;
    m.add_function(wrap_pyfunction!(clean_labels, m)?)?;
    m.add_function(wrap_pyfunction!(superpixels, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(correct, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(run_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(synth_suite, m)?)?;
    Ok(())
}
