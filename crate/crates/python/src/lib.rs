//! Python bindings: bags, synthetic data, models, training and metrics.
//!
//! Tensors cross the boundary as nested lists of floats.

use std::path::PathBuf;

use marble::bagdata::{self, Dataset, Split, Target};
use marble::config::RunConfig;
use marble::metrics::{self, SurvivalRecord};
use marble::model::{self, HeadKind, HeadOutput, MarbleParams, ModelConfig};
use marble::numerics::{Tape, Tensor};
use marble::pyramid::{self, TokenBag};
use marble::train::{self, EpochRow};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(pymarble, MarbleError, PyException);

fn err(e: marble::Error) -> PyErr {
    MarbleError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    if t.ndim() == 1 {
        return vec![t.data().to_vec()];
    }
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn records(times: &[f64], events: &[bool]) -> PyResult<Vec<SurvivalRecord>> {
    if times.len() != events.len() {
        return Err(MarbleError::new_err(format!(
            "{} times for {} event flags",
            times.len(),
            events.len()
        )));
    }
    times
        .iter()
        .zip(events)
        .map(|(&t, &e)| SurvivalRecord::new(t, e).map_err(err))
        .collect()
}

/// One slide as a multi-level token bag.
#[pyclass(name = "Bag", module = "pymarble")]
#[derive(Clone)]
struct PyBag {
    inner: TokenBag,
}

#[pymethods]
impl PyBag {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: bagdata::read_bag(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: bagdata::decode_bag(data).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        bagdata::write_bag(&self.inner, &path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = bagdata::encode_bag(&self.inner).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_levels(&self) -> usize {
        self.inner.num_levels()
    }

    fn token_counts(&self) -> Vec<usize> {
        self.inner.token_counts()
    }

    fn embeddings(&self, level: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.level(level)?.embeddings))
    }

    fn coords(&self, level: usize) -> PyResult<Vec<(i32, i32)>> {
        Ok(self.level(level)?.coords.clone())
    }

    /// Parent index per token; empty at level 0.
    fn parents(&self, level: usize) -> PyResult<Vec<usize>> {
        Ok(self.level(level)?.parents.clone())
    }

    fn coarse_branch_drop(&self, alpha: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: pyramid::coarse_branch_drop(&self.inner, alpha, seed).map_err(err)?,
        })
    }

    fn shuffle_within_levels(&self, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: pyramid::shuffle_within_levels(&self.inner, seed).map_err(err)?,
        })
    }

    fn single_level(&self, level: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.single_level(level).map_err(err)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Bag(dim={}, tokens={:?})", self.inner.dim, self.inner.token_counts())
    }
}

impl PyBag {
    fn level(&self, k: usize) -> PyResult<&pyramid::BagLevel> {
        self.inner
            .levels
            .get(k)
            .ok_or_else(|| MarbleError::new_err(format!("level {k} out of range")))
    }
}

/// Model parameters plus their dimensions.
#[pyclass(name = "Model", module = "pymarble")]
#[derive(Clone)]
struct PyModel {
    params: MarbleParams,
    config: ModelConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_model, levels, head="classification", inner=None, state=16, classes=2, seed=0))]
    fn new(
        d_model: usize,
        levels: usize,
        head: &str,
        inner: Option<usize>,
        state: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let head: HeadKind = head.parse().map_err(err)?;
        let config = ModelConfig {
            inner: inner.unwrap_or(2 * d_model),
            state,
            classes,
            seed,
            ..ModelConfig::new(d_model, levels, head)
        };
        let params = MarbleParams::init(&config).map_err(err)?;
        Ok(Self { params, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = model::read_checkpoint(&path).map_err(err)?;
        Ok(Self { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::write_checkpoint(&path, &self.params, &self.config).map_err(err)
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.config.head.name()
    }

    #[getter]
    fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Inference pass: `levels`, `pooled`, `pool_weights` and either
    /// `logits` or `risk`.
    fn forward<'py>(&self, py: Python<'py>, bag: &PyBag) -> PyResult<Bound<'py, PyDict>> {
        let out = model::encode_slide(&bag.inner, &self.params).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("levels", out.levels.iter().map(rows).collect::<Vec<_>>())?;
        d.set_item("pooled", out.pooled.data().to_vec())?;
        d.set_item("pool_weights", out.pool_weights.data().to_vec())?;
        match out.head {
            HeadOutput::Logits(l) => d.set_item("logits", l.data().to_vec())?,
            HeadOutput::Risk(r) => d.set_item("risk", r)?,
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(head={}, D={}, E={}, N={}, levels={})",
            self.config.head.name(),
            self.config.d_model,
            self.config.inner,
            self.config.state,
            self.config.levels
        )
    }
}

fn spec_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                "None" => "auto".to_string(),
                _ => value,
            };
            cfg.set(&key, &value).map_err(err)?;
        }
    }
    Ok(cfg)
}

/// Planted synthetic slides as `(id, bag, target)`; the target is a class
/// index or a `(time, event)` pair. Keyword arguments use config keys.
#[pyfunction]
#[pyo3(signature = (**spec))]
fn generate(py: Python<'_>, spec: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, PyBag, PyObject)>> {
    let cfg = spec_from(spec)?;
    let slides = bagdata::generate_dataset(&cfg.synth).map_err(err)?;
    slides
        .into_iter()
        .map(|s| {
            let target = match s.target {
                Target::Class(c) => c.into_pyobject(py)?.into_any().unbind(),
                Target::Survival(r) => (r.time, r.event).into_pyobject(py)?.into_any().unbind(),
            };
            Ok((s.id, PyBag { inner: s.planted.bag }, target))
        })
        .collect()
}

fn epoch_dict<'py>(py: Python<'py>, row: &EpochRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", row.epoch)?;
    d.set_item("lr", row.lr)?;
    d.set_item("train_loss", row.train_loss)?;
    d.set_item("val_metric", row.val_metric)?;
    d.set_item("best_so_far", row.best_so_far)?;
    d.set_item("stopped", row.stopped)?;
    Ok(d)
}

/// Trains on a manifest and returns the best model with the epoch report.
/// Keyword arguments use config keys (`task`, `seed`, `base_lr`, ...).
#[pyfunction]
#[pyo3(signature = (manifest, **config))]
fn train_manifest<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = spec_from(config)?;
    cfg.train.validate().map_err(err)?;
    let ds = Dataset::load(&manifest, cfg.task(), cfg.seed()).map_err(err)?;
    let out = py.allow_threads(|| train::train(&ds, &cfg.train)).map_err(err)?;
    let report = out.report.iter().map(|r| epoch_dict(py, r)).collect::<PyResult<_>>()?;
    Ok((
        PyModel {
            params: out.best,
            config: out.model,
        },
        report,
    ))
}

/// Deterministic evaluation of one split: metrics plus per-slide scores.
#[pyfunction]
#[pyo3(signature = (model, manifest, split="test", seed=None))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    manifest: PathBuf,
    split: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let split: Split = split.parse().map_err(err)?;
    let ds = Dataset::load(&manifest, model.config.head, seed.unwrap_or(model.config.seed)).map_err(err)?;
    let report = train::evaluate(&model.params, &ds, split).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", report.accuracy)?;
    d.set_item("auc", report.auc)?;
    d.set_item("c_index", report.c_index)?;
    let preds = PyDict::new(py);
    for p in &report.predictions {
        preds.set_item(&p.id, p.scores.clone())?;
    }
    d.set_item("predictions", preds)?;
    Ok(d)
}

/// Selective scan over `u[T×E]`, `delta[T×E]`, `b[T×N]`, `c[T×N]`,
/// `a[E]` (negative) and `d[E]`; returns `y[T×E]`.
#[pyfunction]
fn selective_scan(
    u: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    a: Vec<f64>,
    d: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let mut tape = Tape::inference();
    let vars = [matrix(&u)?, matrix(&delta)?, matrix(&b)?, matrix(&c)?, Tensor::vector(a), Tensor::vector(d)]
        .map(|t| tape.leaf(t));
    let y = tape
        .selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])
        .map_err(err)?;
    Ok(rows(tape.value(y)))
}

#[pyfunction]
fn c_index(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    metrics::c_index(&risks, &records(&times, &events)?).map_err(err)
}

/// Negative Cox partial log-likelihood with Breslow ties.
#[pyfunction]
fn cox_nll(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    metrics::cox_nll_value(&risks, &records(&times, &events)?).map_err(err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc_binary(&scores, &labels).map_err(err)
}

#[pymodule]
fn pymarble(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MarbleError", m.py().get_type::<MarbleError>())?;
    m.add_class::<PyBag>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(cox_nll, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    Ok(())
}
