//! Python bindings. Structured results (statistics, configs, evaluation
//! reports, training logs) cross the boundary as JSON and arrive in Python
//! as plain dicts and lists.

use std::path::PathBuf;

use kgc_core::graph::DEFAULT_LIS_THRESHOLD;
use kgc_core::prior::load_embeddings_with_seed;
use kgc_core::{checkpoint, synthetic, BucketMode, TrainConfig};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

fn to_py_err(e: kgc_core::Error) -> PyErr {
    match e {
        kgc_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn value_to_py(py: Python<'_>, v: serde_json::Result<Value>) -> PyResult<Py<PyAny>> {
    let v = v.map_err(|e| PyValueError::new_err(e.to_string()))?;
    from_json(py, &v.to_string())
}

/// Defaults overlaid with the keys of `overrides`; unknown keys are rejected.
fn merge_config(py: Python<'_>, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<TrainConfig> {
    let Some(overrides) = overrides else {
        return Ok(TrainConfig::default());
    };
    let text: String = py
        .import("json")?
        .call_method1("dumps", (overrides,))?
        .extract()?;
    let Value::Object(user) =
        serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
    else {
        return Err(PyValueError::new_err("config must be a dict"));
    };
    let Value::Object(mut merged) =
        serde_json::to_value(TrainConfig::default()).expect("config serializes")
    else {
        unreachable!("TrainConfig serializes to an object")
    };
    for (k, v) in user {
        if !merged.contains_key(&k) {
            return Err(PyValueError::new_err(format!("unknown config key {k:?}")));
        }
        merged.insert(k, v);
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg)
}

/// A knowledge graph with train, valid and test splits.
#[pyclass(name = "Graph", frozen)]
struct Graph {
    inner: kgc_core::KnowledgeGraph,
}

#[pymethods]
impl Graph {
    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.num_entities()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.num_relations()
    }

    fn entities(&self) -> Vec<String> {
        self.inner.entities().names().to_vec()
    }

    fn relations(&self) -> Vec<String> {
        self.inner.relations().names().to_vec()
    }

    /// Triplets of `name` ("train", "valid" or "test") as (head, relation, tail) names.
    fn split(&self, name: &str) -> PyResult<Vec<(String, String, String)>> {
        let g = &self.inner;
        let triplets = match name {
            "train" => g.train(),
            "valid" => g.valid(),
            "test" => g.test(),
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let name_of = |v: &kgc_core::graph::Vocab, id| v.name(id).unwrap_or_default().to_string();
        Ok(triplets
            .iter()
            .map(|t| {
                (
                    name_of(g.entities(), t.head),
                    name_of(g.relations(), t.relation),
                    name_of(g.entities(), t.tail),
                )
            })
            .collect())
    }

    /// Train-degree statistics as a dict.
    #[pyo3(signature = (lis_threshold = DEFAULT_LIS_THRESHOLD))]
    fn stats(&self, py: Python<'_>, lis_threshold: usize) -> PyResult<Py<PyAny>> {
        value_to_py(
            py,
            serde_json::to_value(self.inner.degree_stats(lis_threshold)),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(entities={}, relations={}, train={}, valid={}, test={})",
            self.inner.num_entities(),
            self.inner.num_relations(),
            self.inner.train().len(),
            self.inner.valid().len(),
            self.inner.test().len()
        )
    }
}

/// Prior entity vectors aligned with a graph's entity ids.
#[pyclass(name = "Embeddings", frozen)]
struct Embeddings {
    inner: kgc_core::EmbeddingStore,
}

#[pymethods]
impl Embeddings {
    /// Deterministic pseudo-random unit vectors for every entity.
    #[staticmethod]
    #[pyo3(signature = (graph, dim, seed = 0))]
    fn fallback(graph: &Graph, dim: usize, seed: u64) -> Self {
        Embeddings {
            inner: kgc_core::EmbeddingStore::fallback(&graph.inner, dim, seed),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", frozen)]
struct Model {
    inner: kgc_core::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: checkpoint::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        value_to_py(py, serde_json::to_value(&self.inner.config))
    }

    /// The `k` most likely relations between two named entities, best first.
    #[pyo3(signature = (graph, embeddings, head, tail, k = 5))]
    fn predict(
        &self,
        graph: &Graph,
        embeddings: &Embeddings,
        head: &str,
        tail: &str,
        k: usize,
    ) -> PyResult<Vec<(String, f64)>> {
        self.inner
            .predict_names(&graph.inner, &embeddings.inner, head, tail, k)
            .map_err(to_py_err)
    }

    /// MRR, H@1 and H@3 on a split, optionally broken down by bucket.
    #[pyo3(signature = (graph, embeddings, split = "test", buckets = "none"))]
    fn evaluate(
        &self,
        py: Python<'_>,
        graph: &Graph,
        embeddings: &Embeddings,
        split: &str,
        buckets: &str,
    ) -> PyResult<Py<PyAny>> {
        let mode: BucketMode = buckets.parse().map_err(to_py_err)?;
        let g = &graph.inner;
        let triplets = match split {
            "test" => g.test(),
            "valid" => g.valid(),
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let report = py
            .detach(|| kgc_core::evaluate(triplets, g, &embeddings.inner, &self.inner, mode))
            .map_err(to_py_err)?;
        from_json(py, &report.to_json())
    }
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Graph> {
    Ok(Graph {
        inner: kgc_core::load_dataset(&path).map_err(to_py_err)?,
    })
}

/// Reads an embedding file; entities it does not list get fallback vectors.
#[pyfunction]
#[pyo3(signature = (path, graph, fallback_seed = None))]
fn load_embeddings(
    path: PathBuf,
    graph: &Graph,
    fallback_seed: Option<u64>,
) -> PyResult<Embeddings> {
    let seed = fallback_seed.unwrap_or(TrainConfig::default().fallback_seed);
    Ok(Embeddings {
        inner: load_embeddings_with_seed(&path, &graph.inner, seed).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    value_to_py(py, serde_json::to_value(TrainConfig::default()))
}

/// Hyperparameters used for the synthetic benchmark.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn benchmark_config(py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
    value_to_py(py, serde_json::to_value(synthetic::benchmark_config(seed)))
}

/// Trains a model. `config` overrides individual defaults; the prior
/// dimension always follows `embeddings`. Returns `(model, log)` where `log`
/// holds one dict per epoch.
#[pyfunction]
#[pyo3(signature = (graph, embeddings, config = None))]
fn train(
    py: Python<'_>,
    graph: &Graph,
    embeddings: &Embeddings,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Model, Py<PyAny>)> {
    let mut cfg = merge_config(py, config)?;
    cfg.prior_dim = embeddings.inner.dim();
    let outcome = py
        .detach(|| kgc_core::train(&graph.inner, &embeddings.inner, &cfg))
        .map_err(to_py_err)?;
    let lines: Vec<String> = outcome.log.iter().map(|r| r.to_json_line()).collect();
    let log = from_json(py, &format!("[{}]", lines.join(",")))?;
    Ok((
        Model {
            inner: outcome.model,
        },
        log,
    ))
}

/// Writes the seeded synthetic benchmark (splits plus `embeddings.bin`) to `out`.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, entities = 200))]
fn write_synthetic(out: PathBuf, seed: u64, entities: usize) -> PyResult<()> {
    let spec = synthetic::SyntheticSpec {
        seed,
        entities,
        ..synthetic::SyntheticSpec::default()
    };
    if entities <= spec.window {
        return Err(PyValueError::new_err(format!(
            "entities must exceed {}",
            spec.window
        )));
    }
    let data = synthetic::generate(&spec).map_err(to_py_err)?;
    synthetic::write(&data, &out).map_err(to_py_err)
}

#[pymodule]
fn kgc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Embeddings>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
