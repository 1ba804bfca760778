//! Python bindings: `import nstlab`.

use std::path::PathBuf;

use nst_core::bench::{self, DatasetSpec, LabConfig};
use nst_core::datagen::{self, ClassMode, DatasetKind};
use nst_core::ndgrad::Tensor;
use nst_core::nnmodel::{self, MlpParams, ModelConfig};
use nst_core::ssl;
use nst_core::trainer::{self, Method, TrainConfig};
use nst_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(<[f64]>::to_vec).collect()
}

fn method(name: &str) -> PyResult<Method> {
    name.parse().map_err(err)
}

/// Labeled point cloud.
#[pyclass(name = "Dataset", module = "nstlab", frozen)]
struct PyDataset(datagen::Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, classes=None, seed=0))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: Option<usize>, seed: u64) -> PyResult<Self> {
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Ok(Self(
            datagen::Dataset::new(tensor(features)?, labels, classes, seed).map_err(err)?,
        ))
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self(datagen::load_dataset_csv(path).map_err(err)?))
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        datagen::save_dataset_csv(&self.0, path).map_err(err)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.0.features())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, classes={})",
            self.0.len(),
            self.0.dim(),
            self.0.classes()
        )
    }
}

/// Generates `n` examples; `kind` is `two-moons`, `blobs` or `rings`.
#[pyfunction]
#[pyo3(signature = (kind, n, seed=0, noise=0.1, classes=3, spread=1.0, dim=2))]
fn make_dataset(
    kind: &str,
    n: usize,
    seed: u64,
    noise: f64,
    classes: usize,
    spread: f64,
    dim: usize,
) -> PyResult<PyDataset> {
    let kind = match kind {
        "two-moons" => DatasetKind::TwoMoons { noise },
        "blobs" => DatasetKind::Blobs { classes, spread, dim },
        "rings" => DatasetKind::Rings { noise },
        other => return Err(PyValueError::new_err(format!("unknown dataset kind `{other}`"))),
    };
    Ok(PyDataset(datagen::make_dataset(&kind, n, seed).map_err(err)?))
}

/// MLP parameters.
#[pyclass(name = "Model", module = "nstlab", frozen)]
struct PyModel(MlpParams);

#[pymethods]
impl PyModel {
    /// Freshly initialized network with layer widths `[input, hidden…, classes]`.
    #[new]
    #[pyo3(signature = (widths, seed=0))]
    fn new(widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self(
            nnmodel::init_params(&ModelConfig::new(widths, seed)).map_err(err)?,
        ))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(MlpParams::load(path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.0.widths()
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&nnmodel::predict_proba(&self.0, &tensor(x)?).map_err(err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let probs = nnmodel::predict_proba(&self.0, &tensor(x)?).map_err(err)?;
        Ok(probs.row_iter().map(trainer::argmax_row).collect())
    }

    /// Post-ReLU output of hidden layer `layer` (1-based).
    fn activations(&self, x: Vec<Vec<f64>>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&nnmodel::activations(&self.0, &tensor(x)?, layer).map_err(err)?))
    }

    /// PCA of hidden layer `layer` down to two coordinates.
    #[pyo3(signature = (x, layer=1))]
    fn embed(&self, x: Vec<Vec<f64>>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&bench::embed_features(&self.0, layer, &tensor(x)?).map_err(err)?))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Model(widths={:?})", self.0.widths())
    }
}

/// Outcome of one training run.
#[pyclass(name = "Run", module = "nstlab", frozen, get_all)]
struct PyRun {
    method: String,
    test_error: f64,
    /// `(step, train_loss, validation_error or None, test_error)` tuples.
    history: Vec<(usize, f64, Option<f64>, f64)>,
    losses: Vec<f64>,
    model: Py<PyModel>,
}

/// Splits `dataset` and trains one model.
///
/// `config` is TOML text in the shape of a config file's `[train]` table;
/// `method` and `seed` override it. Equivalence classes are one per hidden
/// label, or chunks of `class_size` when given.
#[pyfunction]
#[pyo3(signature = (dataset, method, n_labeled, seed=0, test=500, validation=0, class_size=None, config=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    method: &str,
    n_labeled: usize,
    seed: u64,
    test: usize,
    validation: usize,
    class_size: Option<usize>,
    config: Option<&str>,
) -> PyResult<PyRun> {
    let mut train_config: TrainConfig = match config {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    train_config.method = self::method(method)?;
    train_config.seed = seed;
    let spec = DatasetSpec {
        validation,
        test,
        ..DatasetSpec::default()
    };
    let mode = class_size.map_or(ClassMode::PerLabel, |size| ClassMode::FixedSize { size });
    let data = &dataset.0;
    let result = py
        .detach(|| {
            let split = bench::prepare_split(data, &spec, mode, n_labeled, seed)?;
            trainer::train(&train_config, &split)
        })
        .map_err(err)?;
    Ok(PyRun {
        method: method.to_string(),
        test_error: result.final_test_error,
        history: result
            .history
            .iter()
            .map(|h| (h.step, h.train_loss, h.validation_error, h.test_error))
            .collect(),
        losses: result.losses,
        model: Py::new(py, PyModel(result.params))?,
    })
}

/// `(method, dataset, n_labeled, mean_error, std_error, n_seeds)`
type AggregateTuple = (String, String, usize, f64, f64, usize);

/// Runs the sweep described by a config file and returns its aggregate
/// rows. Writes the usual files when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, jobs=1, out=None))]
fn sweep(py: Python<'_>, config: PathBuf, jobs: usize, out: Option<PathBuf>) -> PyResult<Vec<AggregateTuple>> {
    let LabConfig::Sweep(spec) = bench::parse_config(&config).map_err(err)? else {
        return Err(PyValueError::new_err("config has no [sweep] table"));
    };
    let outcome = py.detach(|| bench::run_sweep(&spec, jobs.max(1))).map_err(err)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        bench::write_sweep(&outcome, &dir).map_err(err)?;
    }
    Ok(outcome
        .aggregate
        .into_iter()
        .map(|a| {
            (
                a.method.name().to_string(),
                a.dataset,
                a.n_labeled,
                a.mean_error,
                a.std_error,
                a.n_seeds,
            )
        })
        .collect())
}

/// Renders an aggregate CSV as an SVG learning-curve plot.
#[pyfunction]
fn plot(aggregate_csv: PathBuf, svg: PathBuf) -> PyResult<()> {
    bench::plot_curves(aggregate_csv, svg).map_err(err)
}

/// Projects rows onto their two leading principal components.
#[pyfunction]
fn pca_2d(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&bench::pca_2d(&tensor(features)?).map_err(err)?))
}

#[pyfunction]
fn sharpen(p: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    ssl::sharpen(&p, temperature).map_err(err)
}

/// Squared Euclidean distance between two class distributions.
#[pyfunction]
fn pair_consistency_loss(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    ssl::pair_consistency_loss(&p, &q).map_err(err)
}

#[pyfunction]
fn combined_loss(lx: f64, lu: f64, le: f64, lambda_u: f64, lambda_e: f64) -> f64 {
    ssl::combined_loss(lx, lu, le, lambda_u, lambda_e)
}

/// Names accepted wherever a method is expected.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn nstlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    m.add_function(wrap_pyfunction!(pca_2d, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(pair_consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    Ok(())
}
