//! Python bindings for the tricon detector.
//!
//! Structured values cross the boundary as plain dicts and lists: Rust
//! serializes to JSON and Python's own `json` module builds the objects.

use std::path::Path;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use tricon::classifier::{composite_uncertainty, confidence, entropy};
use tricon::features::{decode_container, encode_container, generate_synthetic, FeatureRecord};
use tricon::model::Detector as CoreDetector;
use tricon::pipeline::{
    analyze_stage, eval_stage, read_input, route_stage, split_records, train_stage, write_atomic, BundleRow,
    PipelineError, PredictionRow, RoutingConfig, RoutingReport, RunConfig, TrainHistory,
};

create_exception!(tricon_py, TriconError, PyException);
create_exception!(tricon_py, UserError, TriconError);
create_exception!(tricon_py, DataError, TriconError);
create_exception!(tricon_py, NumericalError, TriconError);

fn to_py(e: PipelineError) -> PyErr {
    match e {
        PipelineError::User(m) => UserError::new_err(m),
        PipelineError::Data(m) => DataError::new_err(m),
        PipelineError::Numerical(m) => NumericalError::new_err(m),
    }
}

fn user(msg: impl std::fmt::Display) -> PyErr {
    UserError::new_err(msg.to_string())
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| TriconError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_object<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let s: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| user(format!("{what}: {e}")))
}

fn run_config(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg: RunConfig = match config {
        Some(c) => from_object(py, c.as_any(), "config")?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn load_records(path: &str) -> PyResult<Vec<FeatureRecord>> {
    let bytes = read_input(Path::new(path)).map_err(to_py)?;
    decode_container(&bytes).map_err(|e| to_py(e.into()))
}

fn select_split(records: Vec<FeatureRecord>, cfg: &RunConfig, split: &str) -> PyResult<Vec<FeatureRecord>> {
    if split == "all" {
        return Ok(records);
    }
    let (tr, va, te) = split_records(&records, &cfg.split).map_err(to_py)?;
    match split {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(user(format!(
            "unknown split {other:?}; expected train, val, test or all"
        ))),
    }
}

/// Writes a synthetic feature container and returns the record count.
#[pyfunction]
#[pyo3(signature = (path, config=None, seed=None))]
fn generate(py: Python<'_>, path: &str, config: Option<&Bound<'_, PyDict>>, seed: Option<u64>) -> PyResult<usize> {
    let cfg = run_config(py, config, seed)?;
    let corpus = generate_synthetic(&cfg.synthetic).map_err(user)?;
    let bytes = encode_container(&corpus.records).map_err(|e| to_py(e.into()))?;
    write_atomic(Path::new(path), &bytes).map_err(to_py)?;
    Ok(corpus.records.len())
}

/// `(id, label, timestamp)` of every record in a container.
#[pyfunction]
fn read_index(path: &str) -> PyResult<Vec<(String, u8, i64)>> {
    Ok(load_records(path)?
        .into_iter()
        .map(|r| (r.id, r.label, r.timestamp))
        .collect())
}

#[pyfunction]
#[pyo3(name = "entropy")]
fn py_entropy(p_fake: f64) -> f64 {
    entropy(p_fake)
}

#[pyfunction]
#[pyo3(name = "confidence")]
fn py_confidence(p_fake: f64) -> f64 {
    confidence(p_fake)
}

#[pyfunction]
#[pyo3(name = "composite_uncertainty")]
fn py_composite_uncertainty(u_ent: f64, u_hat: f64) -> f64 {
    composite_uncertainty(u_ent, u_hat)
}

/// A trained detector.
#[pyclass(name = "Detector", module = "tricon_py")]
struct Detector {
    inner: CoreDetector,
    history: Option<TrainHistory>,
}

#[pymethods]
impl Detector {
    /// Trains on the train split of a container, selecting the epoch with
    /// the best validation macro-F1. Runs without the GIL.
    #[staticmethod]
    #[pyo3(signature = (data, config=None, seed=None))]
    fn train(py: Python<'_>, data: &str, config: Option<&Bound<'_, PyDict>>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = run_config(py, config, seed)?;
        let records = load_records(data)?;
        let outcome = py.detach(|| train_stage(&records, &cfg, |_| {})).map_err(to_py)?;
        let history = TrainHistory::from(&outcome);
        Ok(Self {
            inner: outcome.detector,
            history: Some(history),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = read_input(Path::new(path)).map_err(to_py)?;
        let inner = CoreDetector::read_checkpoint(bytes.as_slice())
            .map_err(|e| DataError::new_err(format!("checkpoint: {e}")))?;
        Ok(Self { inner, history: None })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut bytes = Vec::new();
        self.inner
            .write_checkpoint(&mut bytes)
            .map_err(|e| DataError::new_err(e.to_string()))?;
        write_atomic(Path::new(path), &bytes).map_err(to_py)
    }

    /// Model configuration as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.config)
    }

    /// Per-epoch history when this detector was trained in this process.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.history.as_ref().map(|h| to_object(py, h)).transpose()
    }

    /// Predictions for one split as a list of dicts.
    #[pyo3(signature = (data, split="test", config=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        data: &str,
        split: &str,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (preds, _) = self.evaluate(py, data, split, config)?;
        to_object(py, &preds)
    }

    /// `(predictions, consistency bundles)` for one split.
    #[pyo3(signature = (data, split="test", config=None))]
    fn predict_with_bundles<'py>(
        &self,
        py: Python<'py>,
        data: &str,
        split: &str,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let (preds, bundles) = self.evaluate(py, data, split, config)?;
        Ok((to_object(py, &preds)?, to_object(py, &bundles)?))
    }
}

impl Detector {
    fn evaluate(
        &self,
        py: Python<'_>,
        data: &str,
        split: &str,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<(Vec<PredictionRow>, Vec<BundleRow>)> {
        let cfg = run_config(py, config, None)?;
        let records = select_split(load_records(data)?, &cfg, split)?;
        py.detach(|| eval_stage(&self.inner, &records, cfg.train.ablation))
            .map_err(to_py)
    }
}

/// Tunes a threshold on validation predictions and routes test predictions.
#[pyfunction]
#[pyo3(signature = (val, test, strategy="entropy", ratio=0.25, provider="synthetic:0.95:0"))]
fn route<'py>(
    py: Python<'py>,
    val: &Bound<'py, PyAny>,
    test: &Bound<'py, PyAny>,
    strategy: &str,
    ratio: f64,
    provider: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let val: Vec<PredictionRow> = from_object(py, val, "validation predictions")?;
    let test: Vec<PredictionRow> = from_object(py, test, "test predictions")?;
    let cfg: RoutingConfig = from_object(
        py,
        &to_object(
            py,
            &serde_json::json!({ "strategy": strategy, "ratio": ratio, "provider": provider }),
        )?,
        "routing",
    )?;
    let report = route_stage(&val, &test, &cfg).map_err(to_py)?;
    to_object(py, &report)
}

/// Metrics, consistency statistics and calibration for one prediction set.
#[pyfunction]
#[pyo3(signature = (preds, bundles, routing=None, seed=0))]
fn analyze<'py>(
    py: Python<'py>,
    preds: &Bound<'py, PyAny>,
    bundles: &Bound<'py, PyAny>,
    routing: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let preds: Vec<PredictionRow> = from_object(py, preds, "predictions")?;
    let bundles: Vec<BundleRow> = from_object(py, bundles, "bundles")?;
    let routing: Option<RoutingReport> = routing.map(|r| from_object(py, r, "routing")).transpose()?;
    let report = py
        .detach(|| analyze_stage(&preds, &bundles, routing, seed))
        .map_err(to_py)?;
    to_object(py, &report)
}

#[pymodule]
fn tricon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("TriconError", py.get_type::<TriconError>())?;
    m.add("UserError", py.get_type::<UserError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_index, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(py_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(py_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(py_composite_uncertainty, m)?)?;
    Ok(())
}
