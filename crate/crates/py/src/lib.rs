//! Python module `gestalt`: thin wrappers over `gestalt_core`.

use std::path::PathBuf;

use gestalt_core::cnn::{train, CnnModel, TrainParams};
use gestalt_core::dataset::{self, GrayImage, SegmentParams};
use gestalt_core::harness::{self, ExperimentConfig, HarnessError};
use gestalt_core::intuition::{InferencePath, IntuitionLayer, IntuitionOptions, ScoreMode};
use gestalt_core::memory::{build_memory_bank, load_memory, save_memory, select_stock, MemoryLayer};
use gestalt_core::numerics::{self, DenseMatrix};
use gestalt_core::seeding::substream;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(gestalt, StaleArtifactError, PyException);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e.exit_code() {
        3 => StaleArtifactError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

/// A grayscale digit image with its label.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: GrayImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>, label: u8) -> PyResult<Self> {
        let inner = GrayImage::new(width, height, pixels, label).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn label(&self) -> u8 {
        self.inner.label()
    }

    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    fn nonzero_count(&self) -> usize {
        self.inner.nonzero_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}, label={}, nonzero={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.label(),
            self.inner.nonzero_count()
        )
    }
}

fn unwrap_images(images: Vec<PyImage>) -> Vec<GrayImage> {
    images.into_iter().map(|i| i.inner).collect()
}

#[pyfunction]
fn read_idx(images: PathBuf, labels: PathBuf) -> PyResult<Vec<PyImage>> {
    let set = dataset::read_idx_files(&images, &labels).map_err(value_err)?;
    Ok(set.into_iter().map(|inner| PyImage { inner }).collect())
}

/// Segment ids in row-major order; 0 marks background.
#[pyfunction]
#[pyo3(signature = (image, threshold = 64, min_size = 1))]
fn segment(image: &PyImage, threshold: u16, min_size: usize) -> Vec<u32> {
    let map = dataset::segment(&image.inner, SegmentParams { threshold, min_size });
    map.ids().to_vec()
}

/// Deficient copies of `images` for `s = 0..=s_max`, identical to the ones
/// the command-line tool writes for the same seed and segmentation.
#[pyfunction]
#[pyo3(signature = (images, s_max, seed, threshold = 64, min_size = 1))]
fn gen_deficient(images: Vec<PyImage>, s_max: usize, seed: u64, threshold: u16, min_size: usize) -> Vec<Vec<PyImage>> {
    let test = unwrap_images(images);
    dataset::gen_deficient_suite(&test, s_max, SegmentParams { threshold, min_size }, seed)
        .into_iter()
        .map(|set| set.images.into_iter().map(|inner| PyImage { inner }).collect())
        .collect()
}

/// Returns `(r, degenerate)`.
#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, bool)> {
    let c = numerics::pearson(&a, &b).map_err(value_err)?;
    Ok((c.value, c.degenerate))
}

/// Eigenvalues (descending) and the matching unit eigenvectors.
#[pyfunction]
fn sym_eig(rows: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = DenseMatrix::from_rows(&rows).map_err(value_err)?;
    let eig = numerics::sym_eig(&m).map_err(value_err)?;
    let vectors = (0..eig.values.len()).map(|q| eig.vector(q)).collect();
    Ok((eig.values, vectors))
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: CnnModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(value_err)?;
        let inner = CnnModel::read_from(bytes.as_slice()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (images, seed, epochs = 5))]
    fn train(images: Vec<PyImage>, seed: u64, epochs: usize) -> PyResult<Self> {
        let hp = TrainParams {
            epochs,
            ..TrainParams::default()
        };
        let inner = train(&unwrap_images(images), &hp, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(path, self.inner.to_bytes()).map_err(value_err)
    }

    /// `(class, confidence)`.
    fn predict(&self, image: &PyImage) -> PyResult<(usize, f64)> {
        self.inner.predict(&image.inner).map_err(value_err)
    }

    fn posterior(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward_full(&image.inner).map_err(value_err)?.probabilities)
    }

    fn accuracy(&self, images: Vec<PyImage>) -> PyResult<f64> {
        self.inner.accuracy(&unwrap_images(images)).map_err(value_err)
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }
}

#[pyclass(name = "Memory", from_py_object)]
#[derive(Clone)]
struct PyMemory {
    inner: MemoryLayer,
}

#[pymethods]
impl PyMemory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_memory(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (model, images, seed, delta = 3))]
    fn build(model: &PyModel, images: Vec<PyImage>, seed: u64, delta: usize) -> PyResult<Self> {
        let train_set = unwrap_images(images);
        let bank = build_memory_bank(&train_set, &model.inner, delta).map_err(value_err)?;
        let stock = select_stock(&train_set, &model.inner, &mut substream(seed, "stock", &[])).map_err(value_err)?;
        Ok(Self {
            inner: MemoryLayer {
                bank,
                stock,
                model_hash: model.inner.content_hash(),
            },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_memory(&path, &self.inner).map_err(value_err)
    }

    #[getter]
    fn model_hash(&self) -> String {
        self.inner.model_hash.clone()
    }

    #[getter]
    fn delta(&self) -> usize {
        self.inner.bank.delta()
    }
}

/// The gated intuition classifier.
#[pyclass(name = "Intuition")]
struct PyIntuition {
    model: CnnModel,
    memory: MemoryLayer,
    options: IntuitionOptions,
}

#[pymethods]
impl PyIntuition {
    #[new]
    #[pyo3(signature = (model, memory, score = "signed", fallback_on_lower_confidence = false))]
    fn new(model: &PyModel, memory: &PyMemory, score: &str, fallback_on_lower_confidence: bool) -> PyResult<Self> {
        let score = match score {
            "signed" => ScoreMode::Signed,
            "absolute" => ScoreMode::Absolute,
            other => return Err(value_err(format!("score must be `signed` or `absolute`, got `{other}`"))),
        };
        let options = IntuitionOptions {
            score,
            fallback_on_lower_confidence,
        };
        // fail at construction rather than on the first classify
        IntuitionLayer::new(&model.inner, &memory.inner, options)
            .map_err(|e| harness_err(HarnessError::Intuition(e)))?;
        Ok(Self {
            model: model.inner.clone(),
            memory: memory.inner.clone(),
            options,
        })
    }

    /// Returns a dict with `predicted`, `path`, `dominant_class` and
    /// `replaced_filters`.
    fn classify<'py>(&self, py: Python<'py>, image: &PyImage, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
        let layer = IntuitionLayer::new(&self.model, &self.memory, self.options).map_err(value_err)?;
        let d = layer.gated_classify(&image.inner, threshold).map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("predicted", d.predicted())?;
        let path = match d.path {
            InferencePath::Standard => "standard",
            InferencePath::Intuition => "intuition",
        };
        out.set_item("path", path)?;
        out.set_item("dominant_class", d.dominant_class)?;
        out.set_item("replaced_filters", d.replaced_filters)?;
        Ok(out)
    }
}

/// Runs `sweep` for a config file; returns one dict per results row.
#[pyfunction]
fn sweep<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::load(&config).map_err(harness_err)?;
    let records = harness::cmd_sweep(&cfg).map_err(harness_err)?;
    records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("s", r.s)?;
            d.set_item("mode", r.mode.to_string())?;
            d.set_item("accuracy", r.accuracy())?;
            d.set_item("n", r.n)?;
            d.set_item("activations", r.activations)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn gestalt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMemory>()?;
    m.add_class::<PyIntuition>()?;
    m.add_function(wrap_pyfunction!(read_idx, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(gen_deficient, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(sym_eig, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add("StaleArtifactError", m.py().get_type::<StaleArtifactError>())?;
    Ok(())
}
