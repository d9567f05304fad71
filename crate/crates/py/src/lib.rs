//! Python bindings: datasets, branch models, training, evaluation, probes and the
//! loss functions with their gradients.
//!
//! Structured values (specs, configs, instances, metrics) cross the boundary as plain
//! Python dicts via JSON.

use std::path::PathBuf;

use arckd::arckd::{ce_loss, kd_a_loss, kd_r_loss};
use arckd::branchnet::{compose_query, BranchKind, BranchModel, ModelConfig};
use arckd::diffcore::{softmax_values, Tape, Tensor};
use arckd::probe::{attention_ratio as ratio, run_probe};
use arckd::synthgen::{read_dataset, write_dataset, DatasetSpec, Instance};
use arckd::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train_arc as arc, train_teacher as teacher_stage,
    Checkpoint, Corpus, EvalMode, Models, TrainConfig,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(arckd_py, ArckdError, PyException);

fn err(e: arckd::Error) -> PyErr {
    ArckdError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    ArckdError::new_err(format!("invalid value: {e}"))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Deserialize a dict (or `None` for the default) through JSON.
fn from_py<T: DeserializeOwned + Default>(value: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(value) = value else {
        return Ok(T::default());
    };
    let text: String = value
        .py()
        .import("json")?
        .call_method1("dumps", (value,))?
        .extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

fn instance(value: &Bound<'_, PyAny>) -> PyResult<Instance> {
    let text: String = value
        .py()
        .import("json")?
        .call_method1("dumps", (value,))?
        .extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

fn parse_kind(name: &str) -> PyResult<BranchKind> {
    name.parse().map_err(err)
}

fn mode(name: &str) -> PyResult<EvalMode> {
    name.parse().map_err(err)
}

/// Train and validation splits plus the spec that generated them.
#[pyclass(name = "Dataset", module = "arckd_py", frozen)]
struct PyDataset {
    corpus: Corpus,
}

#[pymethods]
impl PyDataset {
    /// Generate both splits from a spec dict; missing keys take their defaults.
    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn generate(spec: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: DatasetSpec = from_py(spec)?;
        Ok(PyDataset {
            corpus: Corpus::generate(&spec).map_err(err)?,
        })
    }

    /// Read `train.jsonl` and `val.jsonl` from `dir`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (header, train) = read_dataset(&dir.join("train.jsonl")).map_err(err)?;
        let (_, val) = read_dataset(&dir.join("val.jsonl")).map_err(err)?;
        Ok(PyDataset {
            corpus: Corpus {
                spec: header.spec,
                train,
                val,
            },
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| ArckdError::new_err(format!("{}: {e}", dir.display())))?;
        let c = &self.corpus;
        write_dataset(&dir.join("train.jsonl"), &c.spec, "train", &c.train).map_err(err)?;
        write_dataset(&dir.join("val.jsonl"), &c.spec, "val", &c.val).map_err(err)
    }

    #[getter]
    fn spec(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.corpus.spec)
    }

    fn __len__(&self) -> usize {
        self.corpus.train.len() + self.corpus.val.len()
    }

    /// Number of instances in `split` ("train" or "val").
    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    fn instance(&self, py: Python<'_>, split: &str, index: usize) -> PyResult<Py<PyAny>> {
        let data = self.split(split)?;
        let x = data.get(index).ok_or_else(|| {
            ArckdError::new_err(format!("index {index} out of range for {} instances", data.len()))
        })?;
        to_py(py, x)
    }
}

impl PyDataset {
    fn split(&self, name: &str) -> PyResult<&[Instance]> {
        match name {
            "train" => Ok(&self.corpus.train),
            "val" => Ok(&self.corpus.val),
            other => Err(ArckdError::new_err(format!(
                "unknown split `{other}`, expected train or val"
            ))),
        }
    }
}

/// One branch: answering, reasoning or teacher.
#[pyclass(name = "Model", module = "arckd_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: BranchModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, vocab_size, embed_dim=32, hidden_dim=32, seed=0))]
    fn new(kind: &str, vocab_size: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
        };
        Ok(PyModel {
            inner: BranchModel::new(parse_kind(kind)?, config, seed).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    /// Logits, per-candidate attention maps (query x response) and fused features.
    fn forward(&self, py: Python<'_>, instance_dict: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let x = instance(instance_dict)?;
        let out = self
            .inner
            .forward(&compose_query(self.inner.kind, &x))
            .map_err(err)?;
        let maps: Vec<Vec<Vec<f64>>> = out
            .attention_maps
            .iter()
            .map(|w| (0..w.rows()).map(|r| w.row(r).to_vec()).collect())
            .collect();
        to_py(
            py,
            &serde_json::json!({
                "logits": out.logits,
                "attention": maps,
                "features": out.features,
            }),
        )
    }

    fn predict(&self, instance_dict: &Bound<'_, PyAny>) -> PyResult<usize> {
        self.inner
            .predict_instance(&instance(instance_dict)?)
            .map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train_teacher(py: Python<'_>, dataset: &PyDataset, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyModel> {
    let cfg: TrainConfig = from_py(config)?;
    let trained = py
        .detach(|| teacher_stage(&dataset.corpus, &cfg))
        .map_err(err)?;
    Ok(PyModel {
        inner: trained.model,
    })
}

/// Train the answering and reasoning branches. `teacher` may be omitted only when
/// both distillation weights are zero.
#[pyfunction]
#[pyo3(signature = (dataset, teacher=None, config=None))]
fn train_arc(
    py: Python<'_>,
    dataset: &PyDataset,
    teacher: Option<&PyModel>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyModel, PyModel)> {
    let cfg: TrainConfig = from_py(config)?;
    let t = teacher.map(|m| &m.inner);
    let pair = py.detach(|| arc(&dataset.corpus, t, &cfg)).map_err(err)?;
    Ok((
        PyModel {
            inner: pair.answering,
        },
        PyModel {
            inner: pair.reasoning,
        },
    ))
}

#[pyfunction]
#[pyo3(signature = (answering, reasoning, dataset, mode_name="standard", teacher=None))]
fn evaluate_models(
    py: Python<'_>,
    answering: &PyModel,
    reasoning: &PyModel,
    dataset: &PyDataset,
    mode_name: &str,
    teacher: Option<&PyModel>,
) -> PyResult<Py<PyAny>> {
    let models = Models {
        answering: &answering.inner,
        reasoning: &reasoning.inner,
        teacher: teacher.map(|t| &t.inner),
    };
    let map = dataset.corpus.synonym_map().map_err(err)?;
    let m = evaluate(models, &dataset.corpus.val, "val", mode(mode_name)?, &map).map_err(err)?;
    to_py(py, &m)
}

/// Probe summary on the validation split.
#[pyfunction]
fn probe(py: Python<'_>, answering: &PyModel, reasoning: &PyModel, dataset: &PyDataset) -> PyResult<Py<PyAny>> {
    let models = Models {
        answering: &answering.inner,
        reasoning: &reasoning.inner,
        teacher: None,
    };
    let map = dataset.corpus.synonym_map().map_err(err)?;
    let report = run_probe(models, &dataset.corpus.val, &map, serde_json::Value::Null).map_err(err)?;
    to_py(py, &report.summary)
}

#[pyfunction]
fn save_models(path: PathBuf, models: Vec<PyModel>) -> PyResult<()> {
    let branches = models.into_iter().map(|m| m.inner).collect();
    let ckpt = Checkpoint::new(branches, serde_json::Value::Null, 0, Vec::new());
    save_checkpoint(&ckpt, &path).map_err(err)
}

#[pyfunction]
fn load_models(path: PathBuf) -> PyResult<Vec<PyModel>> {
    let ckpt = load_checkpoint(&path).map_err(err)?;
    Ok(ckpt
        .branches
        .into_iter()
        .map(|inner| PyModel { inner })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn softmax(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(ArckdError::new_err("temperature must be positive"));
    }
    Ok(softmax_values(&logits, temperature))
}

fn with_grad<F>(shape: Vec<usize>, values: Vec<f64>, f: F) -> PyResult<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(arckd::diffcore::Var<'t>) -> arckd::Result<arckd::diffcore::Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.param(Tensor::new(shape, values).map_err(err)?);
    let loss = f(x).map_err(err)?;
    let value = loss.value().item().map_err(err)?;
    tape.backward(loss).map_err(err)?;
    Ok((value, x.grad().into_data()))
}

/// Cross-entropy of `logits` against `gold`; returns `(loss, d loss / d logits)`.
#[pyfunction]
fn cross_entropy(logits: Vec<f64>, gold: usize) -> PyResult<(f64, Vec<f64>)> {
    let n = logits.len();
    with_grad(vec![n], logits, |x| ce_loss(x, gold))
}

/// Logit distillation loss; the gradient is with respect to the student logits.
#[pyfunction]
#[pyo3(signature = (teacher, student, temperature=2.0))]
fn kd_answer(teacher: Vec<f64>, student: Vec<f64>, temperature: f64) -> PyResult<(f64, Vec<f64>)> {
    let n = student.len();
    with_grad(vec![n], student, |x| kd_a_loss(&teacher, x, temperature, false))
}

/// Feature distillation loss; `features` holds one row per rationale candidate and
/// the gradient has the same layout, flattened.
#[pyfunction]
fn kd_rationale(teacher_feature: Vec<f64>, features: Vec<Vec<f64>>, gold: usize) -> PyResult<(f64, Vec<f64>)> {
    let rows = features.len();
    let cols = features.first().map_or(0, Vec::len);
    let flat: Vec<f64> = features.into_iter().flatten().collect();
    with_grad(vec![rows, cols], flat, |x| {
        kd_r_loss(&teacher_feature, x, gold, false)
    })
}

/// Share of attention mass on the answer rows of a `(l_q + l_a) x l_r` map.
#[pyfunction]
fn attention_ratio(w: Vec<Vec<f64>>, question_len: usize, answer_len: usize) -> PyResult<f64> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    let t = Tensor::new(vec![rows, cols], w.into_iter().flatten().collect()).map_err(err)?;
    ratio(&t, question_len, answer_len).map_err(err)
}

/// Run the command-line interface in-process; returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let mut errs = Vec::new();
        let argv = std::iter::once("arckd".to_string()).chain(args);
        let code = arckd::cli::run(argv, &mut out, &mut errs);
        (
            code,
            String::from_utf8_lossy(&out).into_owned(),
            String::from_utf8_lossy(&errs).into_owned(),
        )
    })
}

#[pymodule]
fn arckd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ArckdError", m.py().get_type::<ArckdError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train_arc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_models, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(save_models, m)?)?;
    m.add_function(wrap_pyfunction!(load_models, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_answer, m)?)?;
    m.add_function(wrap_pyfunction!(kd_rationale, m)?)?;
    m.add_function(wrap_pyfunction!(attention_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
