//! Python bindings: synthetic benchmarks, training, evaluation and the
//! binary formats.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use locoop::metrics::compute_metrics;
use locoop::scoring::score_records;
use locoop::store::{read_context, read_lcfm, write_context};
use locoop::training::{full_loss_gradcheck, gradcheck_toy};
use locoop::{
    encode_text, reference_context, Benchmark, Error, ExtractionStrategy, Matrix, MetricResult, Objective,
    ScoreKind, SweepParam, TrainConfig, WorldConfig,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn value_err(msg: impl Into<String>) -> PyErr {
    PyValueError::new_err(msg.into())
}

fn metric_dict<'py>(py: Python<'py>, m: &MetricResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("auroc", m.auroc)?;
    d.set_item("fpr95", m.fpr95)?;
    d.set_item("n_id", m.n_id)?;
    d.set_item("n_ood", m.n_ood)?;
    d.set_item("threshold", m.threshold)?;
    Ok(d)
}

/// Overlays keyword arguments on the JSON form of `base`, rejecting unknown
/// keys.
fn overlay(py: Python<'_>, base: &WorldConfig, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<WorldConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| value_err(e.to_string()))?;
    if let Some(kwargs) = kwargs {
        let text: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
        let patch: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| value_err(e.to_string()))?;
        let obj = value.as_object_mut().expect("struct serializes to an object");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(value_err(format!("unknown field {k:?}")));
            }
            obj.insert(k, v);
        }
    }
    serde_json::from_value(value).map_err(|e| value_err(e.to_string()))
}

/// Geometry and sizes of a synthetic world; keyword arguments override
/// the defaults.
#[pyclass(name = "WorldConfig", module = "locoop_py")]
struct PyWorldConfig {
    inner: WorldConfig,
}

#[pymethods]
impl PyWorldConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = overlay(py, &WorldConfig::default(), kwargs)?;
        inner.validate().map_err(py_err)?;
        Ok(PyWorldConfig { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: WorldConfig = serde_json::from_str(text).map_err(|e| value_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyWorldConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    #[getter]
    fn m_classes(&self) -> usize {
        self.inner.m_classes
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "WorldConfig(m_classes={}, dim={}, grid={}x{}, seed={})",
            self.inner.m_classes, self.inner.dim, self.inner.grid_h, self.inner.grid_w, self.inner.seed
        )
    }
}

/// Training hyperparameters. `k=None` picks `round(0.2·M)` at train time.
#[pyclass(name = "TrainConfig", module = "locoop_py")]
struct PyTrainConfig {
    base: TrainConfig,
    k: Option<usize>,
}

impl PyTrainConfig {
    fn resolve(&self, m_classes: usize) -> PyResult<TrainConfig> {
        let mut cfg = self.base.clone();
        if let ExtractionStrategy::Rank { .. } = cfg.strategy {
            cfg.strategy = ExtractionStrategy::Rank {
                k: self.k.unwrap_or_else(|| locoop::training::default_k(m_classes)),
            };
        }
        cfg.validate(m_classes).map_err(py_err)?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        lam = 0.25, k = None, strategy = "rank", objective = "locoop", epochs = 50, lr = 0.002,
        batch_size = 32, tau_train = 0.01, seed = 0, cosine = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lam: f64,
        k: Option<usize>,
        strategy: &str,
        objective: &str,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        tau_train: f64,
        seed: u64,
        cosine: bool,
    ) -> PyResult<Self> {
        let strategy = match strategy {
            "rank" => ExtractionStrategy::Rank { k: 0 },
            "entropy" => ExtractionStrategy::Entropy,
            "probability" => ExtractionStrategy::Probability,
            other => return Err(value_err(format!("unknown strategy {other:?}"))),
        };
        let objective = match objective {
            "locoop" => Objective::Locoop,
            "coop" => Objective::Coop,
            other => return Err(value_err(format!("unknown objective {other:?}"))),
        };
        Ok(PyTrainConfig {
            base: TrainConfig {
                lambda: lam,
                tau_train,
                lr,
                epochs,
                batch_size,
                seed,
                strategy,
                objective,
                cosine_schedule: cosine,
                record_history: false,
            },
            k,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(lam={}, k={:?}, strategy={:?}, objective={:?}, epochs={}, seed={})",
            self.base.lambda,
            self.k,
            self.base.strategy.name(),
            self.base.objective,
            self.base.epochs,
            self.base.seed
        )
    }
}

/// The learnable `N x D` context.
#[pyclass(name = "PromptContext", module = "locoop_py")]
struct PyPromptContext {
    inner: locoop::PromptContext,
}

#[pymethods]
impl PyPromptContext {
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = Matrix::from_rows(&rows).map_err(py_err)?;
        Ok(PyPromptContext {
            inner: locoop::PromptContext::new(m).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPromptContext {
            inner: read_context(path).map_err(py_err)?,
        })
    }

    /// Writes the LCPC file; values are stored as 32-bit floats.
    fn save(&self, path: &str) -> PyResult<()> {
        write_context(path, &self.inner).map_err(py_err)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.omega().iter_rows().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn n_ctx(&self) -> usize {
        self.inner.n_ctx()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __eq__(&self, other: &PyPromptContext) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("PromptContext(n_ctx={}, dim={})", self.inner.n_ctx(), self.inner.dim())
    }
}

#[pyclass(name = "TrainResult", module = "locoop_py", get_all)]
struct PyTrainResult {
    context: Py<PyPromptContext>,
    /// Mean loss per epoch.
    losses: Vec<f64>,
    /// Mean share of regions picked as ID-irrelevant per epoch.
    irrelevant_fraction: Vec<f64>,
}

fn parse_score(score: &str) -> PyResult<ScoreKind> {
    score.parse().map_err(py_err)
}

/// Synthetic world with its frozen encoder and class vocabulary.
#[pyclass(name = "Benchmark", module = "locoop_py")]
struct PyBenchmark {
    config: WorldConfig,
    bench: Benchmark,
}

#[pymethods]
impl PyBenchmark {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(py: Python<'_>, config: Option<PyRef<'_, PyWorldConfig>>) -> PyResult<Self> {
        let config = config.map(|c| c.inner.clone()).unwrap_or_default();
        let bench = py.detach(|| Benchmark::synthetic(&config)).map_err(py_err)?;
        Ok(PyBenchmark { config, bench })
    }

    #[getter]
    fn m_classes(&self) -> usize {
        self.bench.vocab.m_classes()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.bench.train.len()
    }

    #[getter]
    fn n_id_test(&self) -> usize {
        self.bench.id_test.len()
    }

    #[getter]
    fn n_ood_test(&self) -> usize {
        self.bench.ood_splits.iter().map(|s| s.records.len()).sum()
    }

    /// The context the world's class prototypes were anchored at.
    fn reference_context(&self) -> PyResult<PyPromptContext> {
        let c = &self.config;
        Ok(PyPromptContext {
            inner: reference_context(&self.bench.encoder, c.n_ctx, c.dim, c.seed).map_err(py_err)?,
        })
    }

    fn train(&self, py: Python<'_>, config: PyRef<'_, PyTrainConfig>) -> PyResult<PyTrainResult> {
        let cfg = config.resolve(self.m_classes())?;
        let out = py.detach(|| self.bench.train(&cfg)).map_err(py_err)?;
        Ok(PyTrainResult {
            context: Py::new(py, PyPromptContext { inner: out.context })?,
            losses: out.trace.iter().map(|e| e.loss).collect(),
            irrelevant_fraction: out.trace.iter().map(|e| e.irrelevant_fraction).collect(),
        })
    }

    /// `(id_scores, ood_scores)` for one score kind.
    #[pyo3(signature = (context, score = "glmcm"))]
    fn scores(&self, py: Python<'_>, context: PyRef<'_, PyPromptContext>, score: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let kind = parse_score(score)?;
        let ctx = context.inner.clone();
        py.detach(|| {
            let text = encode_text(&ctx, &self.bench.vocab, &self.bench.encoder)?;
            let pick = |rs: &[locoop::FeatureRecord]| -> locoop::Result<Vec<f64>> {
                Ok(score_records(rs, &text, true)?.iter().map(|r| r.get(kind)).collect())
            };
            let ood: Vec<locoop::FeatureRecord> =
                self.bench.ood_splits.iter().flat_map(|s| s.records.iter().cloned()).collect();
            Ok((pick(&self.bench.id_test)?, pick(&ood)?))
        })
        .map_err(py_err)
    }

    /// AUROC and FPR95 per OOD split plus their average.
    #[pyo3(signature = (context, score = "glmcm"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        context: PyRef<'_, PyPromptContext>,
        score: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let kind = parse_score(score)?;
        let ctx = context.inner.clone();
        let report = py.detach(|| self.bench.evaluate(&ctx, kind)).map_err(py_err)?;
        let out = metric_dict(py, &report.average)?;
        let splits = PyDict::new(py);
        for (name, m) in &report.splits {
            splits.set_item(name, metric_dict(py, m)?)?;
        }
        out.set_item("score", kind.as_str())?;
        out.set_item("splits", splits)?;
        Ok(out)
    }
}

#[pyfunction]
fn auroc(id: Vec<f64>, ood: Vec<f64>) -> PyResult<f64> {
    locoop::auroc(&id, &ood).map_err(py_err)
}

/// `(fpr, threshold)` at the given true-positive rate.
#[pyfunction]
#[pyo3(signature = (id, ood, tpr = 0.95))]
fn fpr_at_tpr(id: Vec<f64>, ood: Vec<f64>, tpr: f64) -> PyResult<(f64, f64)> {
    locoop::fpr_at_tpr(&id, &ood, tpr).map_err(py_err)
}

#[pyfunction]
fn metrics<'py>(py: Python<'py>, id: Vec<f64>, ood: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    metric_dict(py, &compute_metrics(&id, &ood).map_err(py_err)?)
}

/// Maximum relative error of the analytic context gradient on a small
/// fixed problem.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<f64> {
    let toy = gradcheck_toy(seed).map_err(py_err)?;
    full_loss_gradcheck(&toy).map_err(py_err)
}

/// Header fields and labels of an LCFM file.
#[pyfunction]
fn read_features<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let c = read_lcfm(path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("grid_h", c.grid_h)?;
    d.set_item("grid_w", c.grid_w)?;
    d.set_item("dim", c.dim)?;
    d.set_item("has_global", c.has_global)?;
    d.set_item("count", c.records.len())?;
    let labels: Vec<i32> = c.records.iter().map(|r| r.label).collect();
    d.set_item("labels", PyList::new(py, labels)?)?;
    Ok(d)
}

/// Trains at every value of `param` on one world per seed and returns one
/// row per value, averaged over seeds.
#[pyfunction]
#[pyo3(signature = (param, values, seeds = vec![0, 1, 2], world = None, train = None, score = "glmcm"))]
fn sweep<'py>(
    py: Python<'py>,
    param: &str,
    values: Vec<f64>,
    seeds: Vec<u64>,
    world: Option<PyRef<'_, PyWorldConfig>>,
    train: Option<PyRef<'_, PyTrainConfig>>,
    score: &str,
) -> PyResult<Bound<'py, PyList>> {
    let param: SweepParam = param.parse().map_err(py_err)?;
    let kind = parse_score(score)?;
    let world = world.map(|w| w.inner.clone()).unwrap_or_default();
    let base = match train {
        Some(t) => t.resolve(world.m_classes)?,
        None => TrainConfig::for_classes(world.m_classes),
    };
    let result = py
        .detach(|| {
            let benches = Benchmark::synthetic_seeds(&world, &seeds)?;
            locoop::run_sweep(&benches, &base, param, &values, kind)
        })
        .map_err(py_err)?;
    let rows = PyList::empty(py);
    for r in &result.rows {
        let d = PyDict::new(py);
        d.set_item("param", &r.param)?;
        d.set_item("value", r.value)?;
        d.set_item("score", &r.score)?;
        d.set_item("auroc", r.auroc)?;
        d.set_item("fpr95", r.fpr95)?;
        d.set_item("seeds", &r.seeds)?;
        rows.append(d)?;
    }
    Ok(rows)
}

#[pymodule]
pub fn locoop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorldConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyPromptContext>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyBenchmark>()?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
