//! Python bindings. Arrays cross the boundary as flat C-order lists plus a
//! shape; structured results come back as plain dicts.

use std::path::PathBuf;

use duoseg::data::{load_dataset, write_dataset, Dataset as CoreDataset};
use duoseg::metrics::evaluate_mask;
use duoseg::mixing::sample_mask;
use duoseg::pseudolabel::{sharpen as core_sharpen, LabelKind, ProbabilityVolume, SubnetId};
use duoseg::trainer::{
    evaluate_nets, poly_lr as core_poly_lr, train as core_train, CheckpointRecord, TrainConfig as CoreConfig,
    TrainState,
};
use duoseg::volgeom::{compose_dynamic_label, overlap_in_fixed_frame, CropBox};
use ndarray::{Array3, Array4};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn to_py(e: duoseg::Error) -> PyErr {
    use duoseg::Error as E;
    match e {
        E::Config(_) | E::InvalidParameter(_) | E::Shape(_) | E::OutOfBounds { .. } | E::NoOverlap | E::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        E::Io(_) | E::Format { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn array3<T: Clone>(values: Vec<T>, shape: [usize; 3]) -> PyResult<Array3<T>> {
    Array3::from_shape_vec(shape, values).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Experiment configuration.
#[pyclass(module = "duoseg_py", skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::preset(preset).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::from_json(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Returns a copy with `key=value` overrides applied.
    fn with_overrides(&self, sets: Vec<String>) -> PyResult<Self> {
        let inner = self.inner.with_overrides(&sets).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn sigma(&self) -> i64 {
        self.inner.sigma
    }

    #[getter]
    fn max_iterations(&self) -> usize {
        self.inner.max_iterations
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(alpha={}, beta={}, sigma={}, max_iterations={})",
            self.inner.alpha, self.inner.beta, self.inner.sigma, self.inner.max_iterations
        )
    }
}

/// A split training set plus the held-out test set.
#[pyclass(module = "duoseg_py")]
struct Dataset {
    inner: CoreDataset,
    withheld: duoseg::data::WithheldMasks,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn generate(config: &TrainConfig) -> PyResult<Self> {
        let (inner, withheld) = CoreDataset::generate(&config.inner.data).map_err(to_py)?;
        Ok(Self { inner, withheld })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&path).map_err(to_py)?,
            withheld: Default::default(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&path, &self.inner, &self.withheld).map_err(to_py)
    }

    #[getter]
    fn n_labeled(&self) -> usize {
        self.inner.split.labeled.len()
    }

    #[getter]
    fn n_unlabeled(&self) -> usize {
        self.inner.split.unlabeled.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn volume_shape(&self) -> Option<[usize; 3]> {
        self.inner.volume_shape()
    }
}

/// Step-by-step co-training.
#[pyclass(module = "duoseg_py")]
struct Trainer {
    state: TrainState,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &TrainConfig) -> PyResult<Self> {
        config.inner.validate().map_err(to_py)?;
        Ok(Self {
            state: TrainState::new(&config.inner).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: CheckpointRecord::load(&path).map_err(to_py)?.state,
        })
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        CheckpointRecord {
            state: self.state.clone(),
            best: None,
        }
        .save(&path)
        .map_err(to_py)
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// One co-training iteration; returns both subnets' loss terms.
    fn step(&mut self, py: Python<'_>, data: &Dataset) -> PyResult<Py<PyAny>> {
        let out = self.state.step(&data.inner.split).map_err(to_py)?;
        to_dict(
            py,
            &serde_json::json!({
                "iteration": out.iteration,
                "lr": out.lr,
                "sn1": out.sn1,
                "sn2": out.sn2,
            }),
        )
    }

    /// Sliding-window evaluation on the test set.
    #[pyo3(signature = (data, ensemble = false))]
    fn evaluate(&self, py: Python<'_>, data: &Dataset, ensemble: bool) -> PyResult<Py<PyAny>> {
        let (report, _) =
            evaluate_nets(&self.state.nets, &data.inner.test, &self.state.config, ensemble).map_err(to_py)?;
        to_dict(py, &report)
    }
}

/// Full training run writing a run directory; returns the final report.
#[pyfunction]
fn train(py: Python<'_>, config: &TrainConfig, data: &Dataset, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let outcome = core_train(&config.inner, &data.inner, &out_dir).map_err(to_py)?;
    to_dict(py, &outcome.report)
}

#[pyfunction]
fn poly_lr(iteration: usize, config: &TrainConfig) -> PyResult<f64> {
    core_poly_lr(iteration, &config.inner).map_err(to_py)
}

/// Dice, Jaccard, hd95 and asd of two binary masks given as flat lists.
#[pyfunction]
fn metrics(py: Python<'_>, pred: Vec<u8>, gt: Vec<u8>, shape: [usize; 3]) -> PyResult<Py<PyAny>> {
    let (p, g) = (array3(pred, shape)?, array3(gt, shape)?);
    to_dict(py, &evaluate_mask("case", &p.view(), &g.view()).map_err(to_py)?)
}

/// Dynamic label of one channel: overlap values from `temp`, the rest from `fixed`.
#[pyfunction]
fn compose_dynamic(
    fixed: Vec<f64>,
    temp: Vec<f64>,
    shape: [usize; 3],
    fixed_origin: [i64; 3],
    shifted_origin: [i64; 3],
) -> PyResult<Vec<f64>> {
    let f = CropBox::new(fixed_origin, shape).map_err(to_py)?;
    let s = CropBox::new(shifted_origin, shape).map_err(to_py)?;
    let map = overlap_in_fixed_frame(&f, &s).map_err(to_py)?;
    let out =
        compose_dynamic_label(&array3(fixed, shape)?.view(), &array3(temp, shape)?.view(), &map).map_err(to_py)?;
    Ok(out.into_iter().collect())
}

/// Temperature sharpening of a `(classes, x, y, z)` probability field.
#[pyfunction]
fn sharpen(probs: Vec<f64>, shape: [usize; 4], temperature: f64) -> PyResult<Vec<f64>> {
    let values = Array4::from_shape_vec(shape, probs).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let vol = ProbabilityVolume::new(values, SubnetId::External, None).map_err(to_py)?;
    let label = core_sharpen(&vol, temperature, LabelKind::Fixed).map_err(to_py)?;
    Ok(label.values.into_iter().collect())
}

/// A seeded CutMix mask as a flat list of 0/1 values.
#[pyfunction]
#[pyo3(signature = (shape, ratio = 0.5, seed = 0))]
fn cutmix_mask(shape: [usize; 3], ratio: f64, seed: u64) -> PyResult<Vec<u8>> {
    let m = sample_mask(shape, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
    Ok(m.mask.into_iter().collect())
}

#[pymodule]
fn duoseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TrainConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compose_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(cutmix_mask, m)?)?;
    Ok(())
}
