use autoloss::archive::Archive;
use autoloss::grammar::{parse, serialize, ExprTree, DEFAULT_T_MAX};
use autoloss::graph_data::{gen_sbm, step_imbalance, SbmConfig, Split};
use autoloss::loss_check::{basic_check, legality, CheckVerdict};
use autoloss::loss_expr::{canonical, probe, LossConfig, DEFAULT_PROBE_SEED};
use autoloss::loss_zoo::{list_presets, resolve_loss, LossKind};
use autoloss::search::{proxy_evaluator, run_search, uct_score, SearchConfig, ToyOracle};
use autoloss::seed::derive_seed;
use autoloss::trainer::{evaluate, train as train_gcn, Metrics, TrainConfig, TrainMode};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn loss_config(raw_logits: bool) -> LossConfig {
    LossConfig {
        raw_logits,
        ..LossConfig::default()
    }
}

/// A parsed loss expression.
#[pyclass(name = "Expr", frozen)]
struct PyExpr {
    tree: ExprTree,
}

#[pymethods]
impl PyExpr {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { tree: parse(text).map_err(err)? })
    }

    fn canonical(&self) -> String {
        canonical(&self.tree)
    }

    /// Preorder rule tokens.
    fn rules(&self) -> Vec<String> {
        self.tree.preorder().iter().map(|r| r.to_string()).collect()
    }

    #[getter]
    fn size(&self) -> usize {
        self.tree.size()
    }

    fn is_legal(&self) -> bool {
        matches!(legality(&self.tree), CheckVerdict::Accept)
    }

    fn __str__(&self) -> String {
        serialize(&self.tree)
    }

    fn __repr__(&self) -> String {
        format!("Expr('{}')", serialize(&self.tree))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.tree == other.tree
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: autoloss::graph_data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (classes=3, nodes_per_class=100, p_in=0.1, p_out=0.01, feature_dim=16, shift=2.0, rho=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sbm(
        classes: usize,
        nodes_per_class: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        shift: f64,
        rho: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SbmConfig {
            nodes_per_class,
            num_classes: classes,
            p_in,
            p_out,
            feature_dim,
            feature_shift: shift,
            seed: derive_seed(seed, "dataset", &[]),
            ..SbmConfig::default()
        };
        let ds = gen_sbm(&cfg).map_err(err)?;
        let inner = step_imbalance(&ds, rho, derive_seed(seed, "imbalance", &[])).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: autoloss::graph_data::Dataset::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn train_class_counts(&self) -> Vec<usize> {
        self.inner.train_class_counts().to_vec()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("balanced_accuracy", m.balanced_accuracy)?;
    d.set_item("macro_f1", m.macro_f1)?;
    Ok(d)
}

/// Names accepted by `train` besides expression text.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    list_presets()
}

/// Legality, probe values, fingerprint and verdict for one expression.
#[pyfunction]
#[pyo3(signature = (expr, raw_logits=false, probe_seed=DEFAULT_PROBE_SEED))]
fn verify_loss<'py>(py: Python<'py>, expr: &str, raw_logits: bool, probe_seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let tree = parse(expr).map_err(err)?;
    let cfg = loss_config(raw_logits);
    let report = probe(&tree, probe_seed, &cfg);
    let verdict = match legality(&tree) {
        CheckVerdict::Accept => basic_check(&tree, &Archive::new(), probe_seed, &cfg).verdict,
        other => other,
    };
    let d = PyDict::new(py);
    d.set_item("canonical", canonical(&tree))?;
    d.set_item("probe_values", report.values)?;
    d.set_item("fingerprint", format!("{:016x}", report.fingerprint.hash))?;
    d.set_item("non_finite", report.fingerprint.non_finite)?;
    d.set_item("zero_gradient", report.fingerprint.all_zero)?;
    d.set_item(
        "verdict",
        match verdict {
            CheckVerdict::Accept => "accept".to_string(),
            CheckVerdict::Reject(r) => format!("reject({r})"),
            CheckVerdict::Cached { .. } => "cached".to_string(),
        },
    )?;
    Ok(d)
}

/// Trains a GCN with a preset or expression loss; returns test metrics.
#[pyfunction]
#[pyo3(signature = (dataset, loss, epochs=200, hidden=64, seed=0, raw_logits=false))]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    loss: &str,
    epochs: usize,
    hidden: usize,
    seed: u64,
    raw_logits: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = resolve_loss(loss).map_err(err)?;
    if let LossKind::Tree(tree) = &kind {
        if let CheckVerdict::Reject(r) = legality(tree) {
            return Err(PyValueError::new_err(format!("illegal loss: {r}")));
        }
    }
    let cfg = TrainConfig {
        mode: TrainMode::Full,
        epochs,
        hidden,
        seed: derive_seed(seed, "init", &[]),
        loss: loss_config(raw_logits),
        ..TrainConfig::full()
    };
    let out = train_gcn(&dataset.inner, &kind, &cfg, None).map_err(err)?;
    let test = evaluate(&out.model, &dataset.inner, Split::Test).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("completed", out.completed())?;
    d.set_item("best_epoch", out.best_epoch)?;
    d.set_item("val_reward", out.reward)?;
    d.set_item("test", metrics_dict(py, &test)?)?;
    Ok(d)
}

/// Runs the search and returns the top finished `(expr, reward)` pairs.
/// Without a dataset the gradient-matching toy oracle is used.
#[pyfunction]
#[pyo3(signature = (dataset=None, episodes=200, sims=10, seed=0, proxy_epochs=100, top_k=10, target=ToyOracle::DEFAULT_TARGET))]
fn search(
    dataset: Option<&PyDataset>,
    episodes: usize,
    sims: usize,
    seed: u64,
    proxy_epochs: usize,
    top_k: usize,
    target: &str,
) -> PyResult<Vec<(String, f64)>> {
    let cfg = SearchConfig {
        episodes,
        simulations: sims,
        t_max: DEFAULT_T_MAX,
        seed,
        ..SearchConfig::default()
    };
    let mut archive = Archive::new();
    match dataset {
        Some(ds) => {
            let proxy = TrainConfig {
                epochs: proxy_epochs,
                seed: derive_seed(seed, "init", &[]),
                ..TrainConfig::proxy()
            };
            let mut evaluator = proxy_evaluator(&ds.inner, &cfg, proxy).map_err(err)?;
            run_search(&cfg, &mut evaluator, &mut archive).map_err(err)?;
        }
        None => {
            let target = parse(target).map_err(err)?;
            let mut oracle = ToyOracle::new(&target, cfg.probe_seed, cfg.loss).map_err(err)?;
            run_search(&cfg, &mut oracle, &mut archive).map_err(err)?;
        }
    }
    Ok(archive
        .top_finished(top_k)
        .into_iter()
        .map(|i| {
            let r = &archive.records()[i];
            (r.expr.clone(), r.reward)
        })
        .collect())
}

#[pyfunction(name = "uct_score")]
fn py_uct_score(q: f64, parent_visits: u64, action_visits: u64, c: f64) -> f64 {
    uct_score(q, parent_visits, action_visits, c)
}

#[pymodule]
fn pyautoloss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(verify_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(py_uct_score, m)?)?;
    Ok(())
}
