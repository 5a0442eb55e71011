//! Python bindings: losses, metrics, verification, configuration, training
//! and decoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use jointslu::autodiff::Tensor;
use jointslu::config::RunConfig;
use jointslu::metrics::EntitySet;
use jointslu::model::{OutputKind, SluModel};
use jointslu::pipeline::{evaluate, Example, Session as CoreSession};
use jointslu::verify::{self, Suite};
use jointslu::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.outer()).map(|i| t.row(i).to_vec()).collect()
}

/// CTC loss of `[T, V]` logits against `target`; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (logits, target, blank = 0))]
fn ctc_loss(logits: Vec<Vec<f64>>, target: Vec<usize>, blank: usize) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let out = jointslu::ctc::ctc_loss(&matrix(logits)?, &target, blank).map_err(err)?;
    Ok((out.loss, rows(&out.grad)))
}

/// RNN-T loss of `[T][U+1][V]` joint log-probabilities; returns
/// `(loss, grad)` with the gradient in the same nesting.
#[pyfunction]
#[pyo3(signature = (logprobs, target, blank = 0))]
fn rnnt_loss(logprobs: Vec<Vec<Vec<f64>>>, target: Vec<usize>, blank: usize) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let t = logprobs.len();
    let u = logprobs.first().map_or(0, Vec::len);
    let v = logprobs.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(t * u * v);
    for plane in &logprobs {
        if plane.len() != u || plane.iter().any(|r| r.len() != v) {
            return Err(PyValueError::new_err("ragged log-probability array"));
        }
        plane.iter().for_each(|r| flat.extend_from_slice(r));
    }
    let jlp = Tensor::new(vec![t, u, v], flat).map_err(err)?;
    let out = jointslu::rnnt::rnnt_loss(&jlp, &target, blank).map_err(err)?;
    let grad = out
        .grad
        .data()
        .chunks(u * v)
        .map(|p| p.chunks(v).map(<[f64]>::to_vec).collect())
        .collect();
    Ok((out.loss, grad))
}

/// Word error rate of one hypothesis.
#[pyfunction]
fn wer(hyp: &str, reference: &str) -> f64 {
    jointslu::metrics::wer(hyp, reference)
}

/// Runs a verification suite (`oracles`, `grads`, `identities` or `all`)
/// and returns one dict per check.
#[pyfunction]
#[pyo3(signature = (suite = "all"))]
fn run_verify<'py>(py: Python<'py>, suite: &str) -> PyResult<Bound<'py, PyAny>> {
    let suite: Suite = suite.parse().map_err(err)?;
    to_py(py, &verify::run(suite))
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(s) => RunConfig::from_json(s).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(name = "Model")]
struct Model {
    inner: SluModel,
}

fn decoded<'py>(py: Python<'py>, model: &SluModel, symbols: &[usize], score: f64) -> PyResult<Bound<'py, PyAny>> {
    #[derive(Serialize)]
    struct Decoded {
        tokens: Vec<String>,
        score: f64,
        intent: Option<String>,
        entities: Vec<(String, String)>,
        text: Option<String>,
    }
    let tokens = symbols.iter().map(|&s| model.vocab.symbol(s).to_string()).collect();
    let out = match model.output {
        OutputKind::Tags => {
            let e = EntitySet::from_tags(symbols, &model.vocab);
            Decoded {
                tokens,
                score,
                intent: e.intent,
                entities: e.entities,
                text: None,
            }
        }
        OutputKind::Transcript => Decoded {
            tokens,
            score,
            intent: None,
            entities: Vec::new(),
            text: Some(model.vocab.decode_text(symbols)),
        },
    };
    to_py(py, &out)
}

#[pymethods]
impl Model {
    /// Loads a checkpoint; returns `(model, config_hash)`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, String)> {
        let f = File::open(path)?;
        let (inner, meta) = SluModel::load(BufReader::new(f)).map_err(err)?;
        Ok((Self { inner }, meta.config_hash))
    }

    fn save(&self, path: &str, config_hash: &str) -> PyResult<()> {
        self.inner.save(BufWriter::new(File::create(path)?), config_hash).map_err(err)
    }

    fn greedy<'py>(&self, py: Python<'py>, frames: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
        let h = self.inner.greedy(&matrix(frames)?).map_err(err)?;
        decoded(py, &self.inner, &h.symbols, h.score)
    }

    #[pyo3(signature = (frames, beam = 4))]
    fn beam<'py>(&self, py: Python<'py>, frames: Vec<Vec<f64>>, beam: usize) -> PyResult<Bound<'py, PyAny>> {
        let h = self.inner.beam(&matrix(frames)?, beam).map_err(err)?;
        decoded(py, &self.inner, &h.symbols, h.score)
    }

    fn num_params(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn vocab_hash(&self) -> String {
        self.inner.vocab.hash()
    }
}

/// A configuration bound to its generated corpus.
#[pyclass(name = "Session")]
struct Session {
    inner: CoreSession,
}

impl Session {
    fn split(&self, name: &str) -> PyResult<&[Example]> {
        match name {
            "train" => Ok(&self.inner.train),
            "dev" => Ok(&self.inner.dev),
            "test" => Ok(&self.inner.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

#[pymethods]
impl Session {
    #[new]
    fn new(config: Config) -> PyResult<Self> {
        Ok(Self {
            inner: CoreSession::generate(config.inner).map_err(err)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len()
    }

    /// Trains every configured stage; returns `(model, records)`.
    fn train<'py>(&self, py: Python<'py>) -> PyResult<(Model, Bound<'py, PyAny>)> {
        let (model, records) = py.detach(|| self.inner.run_all()).map_err(err)?;
        Ok((Model { inner: model }, to_py(py, &records)?))
    }

    #[pyo3(signature = (model, split = "test", beam = 1))]
    fn evaluate<'py>(&self, py: Python<'py>, model: &Model, split: &str, beam: usize) -> PyResult<Bound<'py, PyAny>> {
        let report = evaluate(&model.inner, self.split(split)?, beam).map_err(err)?;
        to_py(py, &report)
    }

    /// `(id, text, frames)` of every utterance in a split.
    #[pyo3(signature = (split = "test"))]
    fn utterances(&self, split: &str) -> PyResult<Vec<(String, String, Vec<Vec<f64>>)>> {
        Ok(self
            .split(split)?
            .iter()
            .map(|e| (e.id.clone(), e.text.clone(), rows(&e.frames)))
            .collect())
    }
}

#[pymodule]
#[pyo3(name = "jointslu")]
fn jointslu_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rnnt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add("verify", wrap_pyfunction!(run_verify, m)?)?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    Ok(())
}
