//! Python bindings. Built as the `xmodal` extension module.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError};
use pyo3::prelude::*;

use xmodal::config::parse_config;
use xmodal::{eval, io, Matrix, Modality, RunConfig, Temperature};

create_exception!(xmodal, XmodalError, PyException);

fn to_py(e: xmodal::Error) -> PyErr {
    match e {
        xmodal::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => XmodalError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, cols_if_empty: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols_if_empty));
    }
    Matrix::from_rows(&rows).map_err(to_py)
}

fn modality(name: &str) -> PyResult<Modality> {
    Modality::ALL
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| XmodalError::new_err(format!("unknown modality `{name}`")))
}

fn config(text: &str, seed: Option<u64>, output_dir: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut c = parse_config(text).map_err(to_py)?;
    if let Some(s) = seed {
        c = c.with_seed(s);
    }
    if let Some(dir) = output_dir {
        c.output_dir = dir;
    }
    Ok(c)
}

/// Labelled embedding rows of one modality.
#[pyclass(name = "EmbeddingSet", module = "xmodal", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEmbeddingSet(xmodal::EmbeddingSet);

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    #[pyo3(signature = (rows, labels, modality, dim = 0))]
    fn new(rows: Vec<Vec<f64>>, labels: Vec<u32>, modality: &str, dim: usize) -> PyResult<Self> {
        let m = matrix(rows, dim)?;
        xmodal::EmbeddingSet::new(m, labels, self::modality(modality)?)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_embedding_set(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_embedding_set(&self.0, path).map_err(to_py)
    }

    fn to_bytes(&self) -> Vec<u8> {
        io::encode_embedding_set(&self.0)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        io::decode_embedding_set(data).map(Self).map_err(to_py)
    }

    fn normalized(&self) -> PyResult<Self> {
        xmodal::normalize_rows(&self.0).map(Self).map_err(to_py)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.matrix().to_rows()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        self.0.modality().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn checksum(&self) -> String {
        self.0.checksum()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingSet(modality={}, n={}, dim={})", self.0.modality().name(), self.0.len(), self.0.dim())
    }
}

/// A generated synthetic world.
#[pyclass(name = "World", module = "xmodal", frozen)]
struct PyWorld(xmodal::World);

#[pymethods]
impl PyWorld {
    /// Generates the world described by the `world.*` keys of `config`.
    #[new]
    #[pyo3(signature = (config = "", seed = None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let c = self::config(config, seed, None)?;
        xmodal::generate_world(&c.world).map(Self).map_err(to_py)
    }

    #[getter]
    fn n_species(&self) -> usize {
        self.0.n_species()
    }

    #[getter]
    fn teacher_text(&self) -> PyEmbeddingSet {
        PyEmbeddingSet(self.0.teacher_text.clone())
    }

    #[getter]
    fn images(&self) -> PyEmbeddingSet {
        PyEmbeddingSet(self.0.images.clone())
    }

    #[getter]
    fn audio(&self) -> PyEmbeddingSet {
        PyEmbeddingSet(self.0.audio_features.clone())
    }

    #[getter]
    fn student_text(&self) -> PyEmbeddingSet {
        PyEmbeddingSet(self.0.student_text.clone())
    }

    fn common_name_prototypes(&self) -> PyEmbeddingSet {
        PyEmbeddingSet(self.0.common_name_prototypes())
    }

    /// `(family, genus, species)` ids for every species.
    fn taxonomy(&self) -> Vec<(u32, u32, u32)> {
        self.0
            .taxonomy
            .iter()
            .map(|t| (t.family_id, t.genus_id, t.species_id))
            .collect()
    }
}

/// Contrastive distillation loss and its gradient with respect to the student rows.
#[pyfunction]
fn distill_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, tau: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let tau = Temperature::new(tau).map_err(to_py)?;
    let out = xmodal::distill_loss(&matrix(student, 0)?, &matrix(teacher, 0)?, tau).map_err(to_py)?;
    Ok((out.loss, out.grad_student.to_rows()))
}

/// Maximum relative error between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (n, d, tau, seed = 0))]
fn gradient_check(n: usize, d: usize, tau: f64, seed: u64) -> PyResult<f64> {
    let tau = Temperature::new(tau).map_err(to_py)?;
    xmodal::distill_loss_symbolic_check(n, d, tau, seed).map_err(to_py)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = xmodal::Embedding::new(a).map_err(to_py)?;
    let b = xmodal::Embedding::new(b).map_err(to_py)?;
    xmodal::cosine_similarity(&a, &b).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (queries, gallery, k = None))]
fn map_retrieval(queries: &PyEmbeddingSet, gallery: &PyEmbeddingSet, k: Option<usize>) -> PyResult<f64> {
    eval::map_retrieval(&queries.0, &gallery.0, k).map(|r| r.value).map_err(to_py)
}

#[pyfunction]
fn knn_accuracy(queries: &PyEmbeddingSet, reference: &PyEmbeddingSet, k: usize) -> PyResult<f64> {
    eval::knn_classify(&queries.0, &reference.0, k).map(|r| r.value).map_err(to_py)
}

#[pyfunction]
fn zero_shot_accuracy(queries: &PyEmbeddingSet, prototypes: &PyEmbeddingSet) -> PyResult<f64> {
    eval::zero_shot_classify(&queries.0, &prototypes.0).map(|r| r.value).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (n_per_class, n_classes, k = None, trials = 1000, seed = 0))]
fn chance_map(n_per_class: usize, n_classes: usize, k: Option<usize>, trials: usize, seed: u64) -> f64 {
    eval::chance_map_oracle(n_per_class, n_classes, k, trials, seed)
}

/// Canonical text of a config, with every default filled in.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn canonical_config(text: &str) -> PyResult<String> {
    parse_config(text).map(|c| c.to_text()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (text = ""))]
fn config_hash(text: &str) -> PyResult<String> {
    parse_config(text).map(|c| c.config_hash()).map_err(to_py)
}

/// Trains the adapter on the train split; returns the per-epoch loss curve.
#[pyfunction]
#[pyo3(signature = (config = "", seed = None))]
fn train(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<Vec<f64>> {
    let c = self::config(config, seed, None)?;
    py.detach(|| {
        let world = xmodal::generate_world(&c.world)?;
        let split = xmodal::world_split(&world, c.eval.holdout_fraction, c.eval.split_seed)?;
        xmodal::train_adapter(&split.train, &c.train, c.mode).map(|r| r.loss_curve)
    })
    .map_err(to_py)
}

/// Runs the full pipeline, writing artifacts under `output_dir`. Returns the
/// rendered summary and its metrics.
#[pyfunction]
#[pyo3(signature = (output_dir, config = "", seed = None))]
fn run_experiment(
    py: Python<'_>,
    output_dir: PathBuf,
    config: &str,
    seed: Option<u64>,
) -> PyResult<(String, BTreeMap<String, f64>)> {
    let c = self::config(config, seed, Some(output_dir))?;
    let summary = py.detach(|| xmodal::run_experiment(&c)).map_err(to_py)?;
    Ok((summary.render(), summary.metrics.into_iter().collect()))
}

#[pymodule]
#[pyo3(name = "xmodal")]
fn xmodal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("XmodalError", m.py().get_type::<XmodalError>())?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(map_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(knn_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(chance_map, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
