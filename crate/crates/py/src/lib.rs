//! Python module `rmtr`: networks, datasets, mini-batch control and training runs.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmtr_core::datasets::{Generator, LabeledDataset};
use rmtr_core::dss::{gcontrol_decision, gen_minibatches, DssConstants, DssState};
use rmtr_core::harness::{replicate as replicate_runs, run_experiment, ExperimentConfig};
use rmtr_core::ledger::WorkLedger;
use rmtr_core::resnet::{self, Batch, NetworkConfig, ParamVector};

fn err(e: rmtr_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Row-major samples (one inner list per sample) as a column-per-sample batch.
fn batch(n_in: usize, n_out: usize, x: Vec<Vec<f64>>, c: Option<Vec<Vec<f64>>>) -> PyResult<Batch> {
    let n = x.len();
    let c = c.unwrap_or_else(|| vec![vec![0.0; n_out]; n]);
    if c.len() != n || x.iter().any(|r| r.len() != n_in) || c.iter().any(|r| r.len() != n_out) {
        return Err(PyValueError::new_err(format!(
            "expected {n} rows of {n_in} features and {n_out} targets"
        )));
    }
    let flat_x: Vec<f64> = x.into_iter().flatten().collect();
    let flat_c: Vec<f64> = c.into_iter().flatten().collect();
    Batch::from_rows(n_in, n_out, &flat_x, &flat_c).map_err(err)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Forward-Euler residual network with a flat parameter vector.
#[pyclass(name = "Network", module = "rmtr", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    cfg: NetworkConfig,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (n_in, n_out, width, blocks, final_time=1.0, classifier=true, beta1=0.0, beta2=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_in: usize,
        n_out: usize,
        width: usize,
        blocks: usize,
        final_time: f64,
        classifier: bool,
        beta1: f64,
        beta2: f64,
    ) -> PyResult<Self> {
        let cfg = if classifier {
            NetworkConfig::classifier(n_in, n_out, width, blocks, final_time)
        } else {
            NetworkConfig::regressor(n_in, n_out, width, blocks, final_time)
        }
        .with_regularization(beta1, beta2);
        cfg.validate().map_err(err)?;
        Ok(Self { cfg })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.cfg.num_params()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.cfg.blocks
    }

    /// Seeded normal weights with standard deviation `1/sqrt(width)`, zero biases.
    fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamVector::random(&self.cfg, &mut rng).to_flat().as_slice().to_vec()
    }

    fn loss(&self, theta: Vec<f64>, x: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> PyResult<f64> {
        let b = batch(self.cfg.n_in, self.cfg.n_out, x, Some(c))?;
        resnet::loss(&self.cfg, &theta, &b).map_err(err)
    }

    fn gradient(&self, theta: Vec<f64>, x: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let b = batch(self.cfg.n_in, self.cfg.n_out, x, Some(c))?;
        Ok(resnet::gradient(&self.cfg, &theta, &b)
            .map_err(err)?
            .as_slice()
            .to_vec())
    }

    /// Hessian-vector product of the loss.
    fn hvp(&self, theta: Vec<f64>, x: Vec<Vec<f64>>, c: Vec<Vec<f64>>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let b = batch(self.cfg.n_in, self.cfg.n_out, x, Some(c))?;
        Ok(resnet::hvp(&self.cfg, &theta, &b, &v).map_err(err)?.as_slice().to_vec())
    }

    /// Network outputs after the hypothesis, one list per sample.
    fn predict(&self, theta: Vec<f64>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let b = batch(self.cfg.n_in, self.cfg.n_out, x, None)?;
        Ok(rows(&resnet::predict(&self.cfg, &theta, &b).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(n_in={}, n_out={}, width={}, blocks={}, final_time={})",
            self.cfg.n_in, self.cfg.n_out, self.cfg.width, self.cfg.blocks, self.cfg.final_time
        )
    }
}

/// `(features, targets)` as row lists.
type Rows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Synthetic dataset as `(features, targets)` row lists.
#[pyfunction]
#[pyo3(signature = (name, n, seed=0))]
fn generate(name: &str, n: usize, seed: u64) -> PyResult<Rows> {
    let g: Generator = name.parse().map_err(err)?;
    let ds = g.generate(n, seed).map_err(err)?;
    Ok((rows(&ds.features), rows(&ds.targets)))
}

/// Writes a synthetic dataset to CSV with its metadata sidecar.
#[pyfunction]
#[pyo3(signature = (name, n, path, seed=0))]
fn write_dataset(name: &str, n: usize, path: std::path::PathBuf, seed: u64) -> PyResult<()> {
    let g: Generator = name.parse().map_err(err)?;
    g.generate(n, seed).and_then(|ds| ds.write_csv(&path)).map_err(err)
}

/// Reads a dataset CSV as `(features, targets)`.
#[pyfunction]
fn read_dataset(path: std::path::PathBuf) -> PyResult<Rows> {
    let ds = LabeledDataset::read_csv(&path).map_err(err)?;
    Ok((rows(&ds.features), rows(&ds.targets)))
}

/// Overlapping mini-batches of `0..n` as lists of indices.
#[pyfunction]
#[pyo3(signature = (n, mbs, overlap, seed=0))]
fn minibatches(n: usize, mbs: usize, overlap: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gen_minibatches(n, mbs, overlap, &mut rng).map_err(err)?.batches)
}

/// Applies the global acceptance rule; returns `(accepted, grew, mbs, memory)`.
#[pyfunction]
#[pyo3(signature = (rho, mbs, dataset_size, memory=1))]
fn gcontrol(rho: f64, mbs: usize, dataset_size: usize, memory: usize) -> PyResult<(bool, bool, usize, usize)> {
    let mut state = DssState::new(dataset_size, mbs, memory, DssConstants::default()).map_err(err)?;
    let d = gcontrol_decision(rho, &mut state);
    Ok((d.accepted, d.grew, state.mbs, state.memory))
}

/// Work units charged for gradient calls: `(level, batch_size, calls)` triples.
#[pyfunction]
fn work_units(dataset_size: usize, levels: usize, calls: Vec<(usize, usize, u64)>) -> PyResult<f64> {
    let mut ledger = WorkLedger::new(dataset_size, levels).map_err(err)?;
    for (i, (level, n_b, q)) in calls.into_iter().enumerate() {
        ledger.record(0, i, level, n_b, q).map_err(err)?;
    }
    Ok(ledger.total())
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(err)
}

fn parse_config(config: Option<&str>) -> PyResult<ExperimentConfig> {
    match config {
        Some(text) => ExperimentConfig::from_toml(text).map_err(err),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Runs one experiment; returns `{"header", "rows", "summary", "ledger", "wall_time_s"}`.
#[pyfunction]
#[pyo3(signature = (config=None, seed=0))]
fn train<'py>(py: Python<'py>, config: Option<&str>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config)?;
    let record = py.detach(|| run_experiment(&cfg, seed)).map_err(err)?;
    let value = serde_json::json!({
        "header": record.header,
        "rows": record.rows,
        "summary": record.summary,
        "ledger": serde_json::from_str::<serde_json::Value>(&record.ledger_json).map_err(|e| err(e.into()))?,
        "wall_time_s": record.wall_time_s,
    });
    json_to_py(py, &value.to_string())
}

/// Runs every seed; returns the summary statistics as a dict.
#[pyfunction]
#[pyo3(signature = (config, seeds))]
fn replicate<'py>(py: Python<'py>, config: Option<&str>, seeds: Vec<u64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config)?;
    let (summary, _) = py.detach(|| replicate_runs(&cfg, &seeds)).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&summary).map_err(|e| err(e.into()))?)
}

#[pymodule]
fn rmtr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(minibatches, m)?)?;
    m.add_function(wrap_pyfunction!(gcontrol, m)?)?;
    m.add_function(wrap_pyfunction!(work_units, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(replicate, m)?)?;
    m.add("LOG_SCHEMA_VERSION", rmtr_core::harness::LOG_SCHEMA_VERSION)?;
    Ok(())
}
