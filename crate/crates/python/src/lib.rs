//! Python bindings: models, datasets and masks as classes, the pipeline
//! stages as functions. Heavy work runs with the interpreter detached.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use neft_core::analysis::{categorize as core_categorize, rank_diff as core_rank_diff, Threshold};
use neft_core::io::{self, SyntheticKind};
use neft_core::model::record_trace;
use neft_core::{
    Activation, JsonArtifact, ModelConfig, NeuronId, Optimizer, ParameterSet, SelectionMode, TrainOptions, Trainer, TrainingMask,
    UtilizationProfile,
};

fn err(e: neft_core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn neuron_tuple(id: NeuronId) -> (usize, String, usize) {
    (id.layer, id.role.as_str().to_string(), id.row)
}

fn neuron_from(t: (usize, String, usize)) -> PyResult<NeuronId> {
    let role = t.1.parse().map_err(err)?;
    Ok(NeuronId::new(t.0, role, t.2))
}

/// A model shape plus its initialization seed.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (vocab_size, d_model, d_hidden, n_layers, n_classes, activation = "silu", seed = 0))]
    fn new(
        vocab_size: usize,
        d_model: usize,
        d_hidden: usize,
        n_layers: usize,
        n_classes: usize,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let activation: Activation = activation.parse().map_err(err)?;
        let inner = ModelConfig {
            vocab_size,
            d_model,
            d_hidden,
            n_layers,
            n_classes,
            activation,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn small(seed: u64) -> Self {
        Self {
            inner: ModelConfig::small(seed),
        }
    }

    #[getter]
    fn neuron_count(&self) -> usize {
        self.inner.neuron_count()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn d_hidden(&self) -> usize {
        self.inner.d_hidden
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Every neuron as `(layer, role, row)` in canonical order.
    fn neurons(&self) -> Vec<(usize, String, usize)> {
        self.inner.neurons().map(neuron_tuple).collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(vocab_size={}, d_model={}, d_hidden={}, n_layers={}, n_classes={}, activation='{}', seed={})",
            c.vocab_size,
            c.d_model,
            c.d_hidden,
            c.n_layers,
            c.n_classes,
            format!("{:?}", c.activation).to_lowercase(),
            c.seed
        )
    }
}

/// f32 parameters of one model.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ParameterSet<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn init(config: &PyModelConfig) -> PyResult<Self> {
        Ok(Self {
            inner: ParameterSet::init(&config.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = io::read_file(&path).map_err(err)?;
        Ok(Self {
            inner: io::load_checkpoint(&bytes).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = io::save_checkpoint(&self.inner).map_err(err)?;
        io::write_file(path, &bytes).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn content_hash(&self) -> u64 {
        self.inner.content_hash()
    }

    fn neuron_row(&self, layer: usize, role: String, row: usize) -> PyResult<Vec<f32>> {
        let id = neuron_from((layer, role, row))?;
        self.inner.config.check_neuron(id).map_err(err)?;
        Ok(self.inner.neuron_row(id).map_err(err)?.to_vec())
    }

    /// Logits for each token sequence.
    fn forward(&self, py: Python<'_>, batch: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f32>>> {
        let out = py
            .detach(|| neft_core::model::forward(&self.inner, &batch, false))
            .map_err(err)?;
        let (rows, _) = out.logits.dims2().map_err(err)?;
        Ok((0..rows).map(|r| out.logits.row(r).to_vec()).collect())
    }

    /// `(loss, accuracy)` on a dataset.
    fn evaluate(&self, py: Python<'_>, data: &PyDataset) -> PyResult<(f64, f64)> {
        let r = py.detach(|| neft_core::evaluate(&self.inner, &data.inner)).map_err(err)?;
        Ok((r.loss, r.accuracy))
    }

    fn __eq__(&self, other: &PyModel) -> bool {
        self.inner == other.inner
    }
}

/// Labelled token sequences.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: neft_core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(examples: Vec<(Vec<u32>, u32)>) -> Self {
        let examples = examples
            .into_iter()
            .map(|(tokens, label)| neft_core::Example { tokens, label })
            .collect();
        Self {
            inner: neft_core::Dataset::new(examples),
        }
    }

    /// `kind` is `"blobs"` or `"planted-neurons"`.
    #[staticmethod]
    fn synthetic(kind: &str, config: &PyModelConfig, n: usize, seed: u64) -> PyResult<Self> {
        let kind: SyntheticKind = kind.parse().map_err(err)?;
        Ok(Self {
            inner: io::make_synthetic_dataset(kind, &config.inner, n, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = io::read_file(&path).map_err(err)?;
        Ok(Self {
            inner: neft_core::Dataset::from_jsonl(&bytes).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_file(path, &self.inner.to_jsonl()).map_err(err)
    }

    #[getter]
    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn examples(&self) -> Vec<(Vec<u32>, u32)> {
        self.inner
            .examples()
            .iter()
            .map(|e| (e.tokens.clone(), e.label))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A set of MLP rows plus the model it was selected for.
#[pyclass(name = "Mask", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: neft_core::NeuronMask,
}

#[pymethods]
impl PyMask {
    #[staticmethod]
    #[pyo3(signature = (config, neurons, model_hash, provenance = "python"))]
    fn from_neurons(
        config: &PyModelConfig,
        neurons: Vec<(usize, String, usize)>,
        model_hash: u64,
        provenance: &str,
    ) -> PyResult<Self> {
        let ids = neurons.into_iter().map(neuron_from).collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: neft_core::NeuronMask::from_neurons(&config.inner, ids, provenance, model_hash).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = io::read_file(&path).map_err(err)?;
        Ok(Self {
            inner: io::load_mask(&bytes).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = io::save_mask(&self.inner).map_err(err)?;
        io::write_file(path, &bytes).map_err(err)
    }

    fn neurons(&self) -> Vec<(usize, String, usize)> {
        self.inner.neurons().iter().copied().map(neuron_tuple).collect()
    }

    fn contains(&self, layer: usize, role: String, row: usize) -> PyResult<bool> {
        Ok(self.inner.contains(neuron_from((layer, role, row))?))
    }

    #[getter]
    fn fraction(&self) -> f64 {
        self.inner.fraction
    }

    #[getter]
    fn model_hash(&self) -> u64 {
        self.inner.model_hash
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    fn union(&self, other: &PyMask) -> PyResult<PyMask> {
        Ok(PyMask {
            inner: neft_core::union_masks(&self.inner, &other.inner).map_err(err)?,
        })
    }

    fn overlap(&self, other: &PyMask) -> PyResult<f64> {
        neft_core::overlap(&self.inner, &other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Per-neuron cosine similarity between an original and a fine-tuned model.
#[pyfunction]
fn similarity(py: Python<'_>, org: &PyModel, ft: &PyModel) -> PyResult<Vec<f64>> {
    Ok(py
        .detach(|| neft_core::neuron_similarity(&org.inner, &ft.inner))
        .map_err(err)?
        .scores)
}

/// Rows whose similarity is lowest (`sensitive`) or highest (`reversed`).
#[pyfunction]
#[pyo3(signature = (org, ft, fraction, mode = "sensitive"))]
fn select(py: Python<'_>, org: &PyModel, ft: &PyModel, fraction: f64, mode: &str) -> PyResult<PyMask> {
    let mode: SelectionMode = mode.parse().map_err(err)?;
    let report = py
        .detach(|| neft_core::neuron_similarity(&org.inner, &ft.inner))
        .map_err(err)?;
    Ok(PyMask {
        inner: neft_core::select_neurons(&report, fraction, mode).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (
    model, data, seed = 0, max_steps = 800, batch_size = 16, learning_rate = 1e-3,
    optimizer = "adam", mask = None, unfreeze_embed_head = false, shuffle = true,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    seed: u64,
    max_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: &str,
    mask: Option<&PyMask>,
    unfreeze_embed_head: bool,
    shuffle: bool,
) -> PyResult<PyModel> {
    let optimizer = match optimizer {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd,
        other => return Err(PyValueError::new_err(format!("unknown optimizer {other:?}"))),
    };
    let opts = TrainOptions {
        max_steps,
        batch_size,
        learning_rate,
        optimizer,
        seed,
        shuffle,
        max_epochs: None,
    };
    let tm = mask.map(|m| TrainingMask::new(m.inner.clone()).with_embed_head(unfreeze_embed_head));
    let run = py
        .detach(|| Trainer::new(opts).mask(tm.as_ref()).run(&model.inner, &data.inner))
        .map_err(err)?;
    Ok(PyModel { inner: run.params })
}

/// Ridge probe on pooled hidden states, then the `k` best-aligned up rows.
#[pyfunction]
#[pyo3(signature = (model, data, k, layer = None, lam = 1.0))]
fn probe_select(py: Python<'_>, model: &PyModel, data: &PyDataset, k: usize, layer: Option<usize>, lam: f64) -> PyResult<PyMask> {
    let layer = layer.unwrap_or(model.inner.config.n_layers);
    let mask = py
        .detach(|| {
            let xs = neft_core::selector::pooled_hidden_states(&model.inner, data.inner.examples(), layer, 64)?;
            let probe =
                neft_core::fit_probe(&xs, &data.inner.labels(), model.inner.config.n_classes, lam, true)?;
            neft_core::probe_select(&model.inner, &probe, k)
        })
        .map_err(err)?;
    Ok(PyMask { inner: mask })
}

/// Utilization profile as `(max_pearson, rank)` per neuron.
#[pyclass(name = "Profile", from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: UtilizationProfile,
}

#[pymethods]
impl PyProfile {
    #[getter]
    fn max_pearson(&self) -> Vec<f64> {
        self.inner.max_pearson.clone()
    }

    #[getter]
    fn rank(&self) -> Vec<usize> {
        self.inner.rank.clone()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_file(path, &self.inner.to_json().map_err(err)?).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (model, data, max_tokens = 10_000, seed = 0))]
fn profile(py: Python<'_>, model: &PyModel, data: &PyDataset, max_tokens: usize, seed: u64) -> PyResult<PyProfile> {
    let inner = py
        .detach(|| {
            let trace = record_trace(&model.inner, data.inner.examples(), data.inner.hash(), max_tokens, seed, 64)?;
            neft_core::utilization_profile(&trace)
        })
        .map_err(err)?;
    Ok(PyProfile { inner })
}

/// ΔRank per neuron and `(lo, hi, count, mean |ΔRank|)` per bucket.
#[pyfunction]
#[pyo3(signature = (a, b, edges = None))]
#[allow(clippy::type_complexity)]
fn rank_diff(a: &PyProfile, b: &PyProfile, edges: Option<Vec<f64>>) -> PyResult<(Vec<i64>, Vec<(f64, f64, usize, Option<f64>)>)> {
    let edges = edges.unwrap_or_else(|| neft_core::cli::DEFAULT_BUCKET_EDGES.to_vec());
    let r = core_rank_diff(&a.inner, &b.inner, &edges).map_err(err)?;
    let buckets = r.buckets.iter().map(|b| (b.lo, b.hi, b.count, b.avg_abs_delta)).collect();
    Ok((r.delta, buckets))
}

/// `(strongly_affected, suppressed, indirectly_affected)`.
#[pyfunction]
#[pyo3(signature = (a, b, mask, threshold = None))]
#[allow(clippy::type_complexity)]
fn categorize(
    a: &PyProfile,
    b: &PyProfile,
    mask: &PyMask,
    threshold: Option<usize>,
) -> PyResult<(Vec<(usize, String, usize)>, Vec<(usize, String, usize)>, Vec<(usize, String, usize)>)> {
    let r = core_rank_diff(&a.inner, &b.inner, &neft_core::cli::DEFAULT_BUCKET_EDGES).map_err(err)?;
    let t = threshold.map(Threshold::Count).unwrap_or_default();
    let c = core_categorize(&r, &mask.inner, t).map_err(err)?;
    let ids = |v: Vec<NeuronId>| v.into_iter().map(neuron_tuple).collect();
    Ok((ids(c.strongly_affected), ids(c.suppressed), ids(c.indirectly_affected)))
}

/// Planted task: `(reference model, planted mask, teacher model)`.
#[pyfunction]
#[pyo3(signature = (config, pairs = None))]
fn planted_task(config: &PyModelConfig, pairs: Option<usize>) -> PyResult<(PyModel, PyMask, PyModel)> {
    let task = match pairs {
        Some(p) => neft_core::PlantedTask::with_pairs(&config.inner, p),
        None => neft_core::PlantedTask::new(&config.inner),
    }
    .map_err(err)?;
    let mask = task.planted_mask(task.reference.content_hash());
    Ok((
        PyModel {
            inner: task.reference.clone(),
        },
        PyMask { inner: mask },
        PyModel { inner: task.teacher },
    ))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| neft_core::cli::run(std::iter::once("neft".to_string()).chain(args)))
}

#[pymodule]
pub fn neft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyProfile>()?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(probe_select, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(rank_diff, m)?)?;
    m.add_function(wrap_pyfunction!(categorize, m)?)?;
    m.add_function(wrap_pyfunction!(planted_task, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
