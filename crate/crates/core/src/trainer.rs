//! Two-layer GCN trained full-batch with a pluggable loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Var};
use crate::error::{Error, Result};
use crate::graph_data::{norm_adj, Dataset, Split};
use crate::loss_check::{RejectReason, TrainMonitor};
use crate::loss_expr::{counts_matrix, emit_tree, one_hot, LossConfig};
use crate::loss_zoo::{emit_native, LossKind};
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cheap run used as a search reward.
    Proxy,
    /// Final run; keeps the model from the best validation epoch.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Halve the learning rate after this many epochs without a new best
    /// validation loss.
    pub lr_patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn proxy() -> Self {
        Self {
            mode: TrainMode::Proxy,
            epochs: 100,
            hidden: 64,
            lr: 0.1,
            weight_decay: 5e-4,
            lr_patience: 100,
            seed: 0,
            loss: LossConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            mode: TrainMode::Full,
            epochs: 2000,
            hidden: 256,
            ..Self::proxy()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::proxy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    /// Added to logits before argmax.
    pub logit_adjust: Option<Vec<f64>>,
}

impl GcnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Tensor::from_fn(r, c, |_, _| rng.random_range(-a..a))
        };
        let w0 = glorot(in_dim, hidden);
        let w1 = glorot(hidden, classes);
        Self {
            w0,
            b0: Tensor::zeros(1, hidden),
            w1,
            b1: Tensor::zeros(1, classes),
            logit_adjust: None,
        }
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.w0, &self.b0, &self.w1, &self.b1]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w0, &mut self.b0, &mut self.w1, &mut self.b1]
    }

    pub fn num_classes(&self) -> usize {
        self.w1.cols()
    }

    pub fn predict(&self, logits: &Tensor) -> Vec<usize> {
        match &self.logit_adjust {
            Some(adj) => logits.zip_map(&Tensor::from_fn(logits.rows(), logits.cols(), |_, c| adj[c]), |a, b| a + b).argmax_rows(),
            None => logits.argmax_rows(),
        }
    }
}

struct Layers {
    params: [Var; 4],
    logits: Var,
}

fn emit_gcn(g: &mut Graph, adj: &Arc<CsrMatrix>, ax: Var) -> Layers {
    let params = [g.input("w0"), g.input("b0"), g.input("w1"), g.input("b1")];
    let h = g.matmul(ax, params[0]);
    let h = g.add_row(h, params[1]);
    let h = g.relu(h);
    let hw = g.matmul(h, params[2]);
    let z = g.spmm(adj.clone(), hw);
    let logits = g.add_row(z, params[3]);
    Layers { params, logits }
}

fn bind_model(g: &mut Graph, model: &GcnModel) -> Result<()> {
    for (name, t) in ["w0", "b0", "w1", "b1"].into_iter().zip(model.params()) {
        g.bind(name, t.clone())?;
    }
    Ok(())
}

/// `A_hat . ReLU(A_hat . X . W0 + b0) . W1 + b1` for every node.
pub fn gcn_forward(model: &GcnModel, adj: &CsrMatrix, features: &Tensor) -> Result<Tensor> {
    let adj = Arc::new(adj.clone());
    let mut g = Graph::new();
    let ax = g.constant(adj.matmul(features)?);
    let layers = emit_gcn(&mut g, &adj, ax);
    bind_model(&mut g, model)?;
    Ok(g.forward(layers.logits)?.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

impl Metrics {
    /// Balanced accuracy averages recall over classes present in `truth`;
    /// macro-F1 averages over classes seen in either vector.
    pub fn compute(pred: &[usize], truth: &[usize], classes: usize) -> Self {
        assert_eq!(pred.len(), truth.len(), "prediction and label counts differ");
        let mut tp = vec![0usize; classes];
        let mut support = vec![0usize; classes];
        let mut predicted = vec![0usize; classes];
        for (&p, &t) in pred.iter().zip(truth) {
            support[t] += 1;
            predicted[p] += 1;
            if p == t {
                tp[t] += 1;
            }
        }
        let correct: usize = tp.iter().sum();
        let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
        let present: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
        let balanced_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| tp[c] as f64 / support[c] as f64).sum::<f64>() / present.len() as f64
        };
        let seen: Vec<usize> = (0..classes).filter(|&c| support[c] > 0 || predicted[c] > 0).collect();
        let macro_f1 = if seen.is_empty() {
            0.0
        } else {
            seen.iter()
                .map(|&c| {
                    let denom = support[c] + predicted[c];
                    if denom == 0 {
                        0.0
                    } else {
                        2.0 * tp[c] as f64 / denom as f64
                    }
                })
                .sum::<f64>()
                / seen.len() as f64
        };
        Self {
            accuracy,
            balanced_accuracy,
            macro_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_bacc: f64,
    pub val_bacc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainStatus {
    Completed,
    Rejected { reason: RejectReason, epoch: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the best selection score.
    pub model: GcnModel,
    pub status: TrainStatus,
    /// Best validation balanced accuracy seen.
    pub reward: f64,
    pub best_epoch: usize,
    /// Parameters after the last applied update.
    pub final_model: GcnModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn completed(&self) -> bool {
        self.status == TrainStatus::Completed
    }

    /// What the search sees: zero for rejected runs.
    pub fn search_reward(&self) -> f64 {
        if self.completed() {
            self.reward
        } else {
            0.0
        }
    }
}

/// Per-dataset tensors shared by every training run on it.
#[derive(Clone, Debug)]
pub struct Prepared {
    adj: Arc<CsrMatrix>,
    ax: Tensor,
    train: Arc<[usize]>,
    val: Arc<[usize]>,
    train_labels: Vec<usize>,
    val_labels: Vec<usize>,
    counts: Vec<usize>,
    in_dim: usize,
    classes: usize,
}

impl Prepared {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let adj = norm_adj(dataset).to_csr();
        let ax = adj.matmul(dataset.features())?;
        let splits = dataset.splits();
        if splits.val.is_empty() {
            return Err(Error::InvalidDataset("validation split is empty".into()));
        }
        Ok(Self {
            adj: Arc::new(adj),
            ax,
            train: splits.train.clone().into(),
            val: splits.val.clone().into(),
            train_labels: dataset.labels_for(Split::Train),
            val_labels: dataset.labels_for(Split::Val),
            counts: dataset.train_class_counts().to_vec(),
            in_dim: dataset.num_features(),
            classes: dataset.num_classes(),
        })
    }

    pub fn adj(&self) -> &CsrMatrix {
        &self.adj
    }
}

fn emit_loss(g: &mut Graph, loss: &LossKind, logits: Var, labels: &[usize], counts: &[usize], cfg: &LossConfig) -> Var {
    match loss {
        LossKind::Native(n) => emit_native(g, *n, logits, labels, counts),
        LossKind::Tree(tree) => {
            let yhat = if cfg.raw_logits { logits } else { g.softmax_rows(logits) };
            let y = g.constant(one_hot(labels, counts.len()));
            let n = g.constant(counts_matrix(labels.len(), counts));
            let body = emit_tree(g, tree, yhat, y, n, cfg);
            g.mean(body)
        }
    }
}

/// Trains a fresh GCN with `loss`. Runs stopped by the monitor or by a
/// non-finite loss or gradient come back with a `Rejected` status.
pub fn train(
    dataset: &Dataset,
    loss: &LossKind,
    cfg: &TrainConfig,
    monitor: Option<&mut TrainMonitor>,
) -> Result<TrainOutcome> {
    train_prepared(&Prepared::new(dataset)?, loss, cfg, monitor)
}

pub fn train_prepared(
    data: &Prepared,
    loss: &LossKind,
    cfg: &TrainConfig,
    mut monitor: Option<&mut TrainMonitor>,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be positive".into()));
    }
    let mut model = GcnModel::init(data.in_dim, cfg.hidden, data.classes, cfg.seed);
    if let LossKind::Native(n) = loss {
        model.logit_adjust = n.logit_adjustment(&data.counts);
    }

    let mut g = Graph::new();
    let ax = g.constant(data.ax.clone());
    let layers = emit_gcn(&mut g, &data.adj, ax);
    let val_logits = g.select_rows(layers.logits, data.val.clone());
    let val_loss = emit_loss(&mut g, loss, val_logits, &data.val_labels, &data.counts, &cfg.loss);
    let train_logits = g.select_rows(layers.logits, data.train.clone());
    let root = emit_loss(&mut g, loss, train_logits, &data.train_labels, &data.counts, &cfg.loss);

    let shapes: Vec<(usize, usize)> = model.params().iter().map(|t| t.shape()).collect();
    let mut adam = Adam::new(cfg.lr, &shapes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let (mut best_score, mut best_epoch, mut reward) = (f64::NEG_INFINITY, 0, 0.0);
    let (mut best_val_loss, mut since_improved) = (f64::INFINITY, 0);
    let mut status = TrainStatus::Completed;

    for epoch in 0..cfg.epochs {
        bind_model(&mut g, &model)?;
        let train_loss = g.forward(root)?.item();
        let vl = g.value(val_loss).map(Tensor::item).unwrap_or(f64::NAN);
        let logits = g.value(layers.logits).expect("forward computed logits");
        let preds = model.predict(logits);
        let pick = |rows: &[usize]| rows.iter().map(|&r| preds[r]).collect::<Vec<_>>();
        let train_m = Metrics::compute(&pick(&data.train), &data.train_labels, data.classes);
        let val_m = Metrics::compute(&pick(&data.val), &data.val_labels, data.classes);

        if !train_loss.is_finite() {
            status = TrainStatus::Rejected {
                reason: RejectReason::NonFinite,
                epoch,
            };
            break;
        }
        reward = f64::max(reward, val_m.balanced_accuracy);
        let score = match cfg.mode {
            TrainMode::Proxy => val_m.balanced_accuracy,
            TrainMode::Full => (val_m.balanced_accuracy + val_m.macro_f1) / 2.0,
        };
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: vl,
            train_bacc: train_m.balanced_accuracy,
            val_bacc: val_m.balanced_accuracy,
            val_f1: val_m.macro_f1,
            lr: adam.lr,
        });
        if let Some(m) = monitor.as_deref_mut() {
            if let Some(reason) = m.observe(epoch, train_loss, train_m.balanced_accuracy, reward) {
                status = TrainStatus::Rejected { reason, epoch };
                break;
            }
        }

        let mut grads = g.backward(root, &layers.params)?;
        for (grad, p) in grads.iter_mut().zip(model.params()).take(2) {
            grad.add_assign(&p.map(|v| v * cfg.weight_decay));
        }
        let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        if !adam.step(&mut params, &grads)? {
            status = TrainStatus::Rejected {
                reason: RejectReason::NonFinite,
                epoch,
            };
            break;
        }
        for (dst, src) in model.params_mut().into_iter().zip(params) {
            *dst = src;
        }

        if vl < best_val_loss {
            best_val_loss = vl;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= cfg.lr_patience {
                adam.lr *= 0.5;
                since_improved = 0;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        status,
        reward,
        best_epoch,
        final_model: model,
        history,
    })
}

/// Metrics of `model` on one split. Reading the test split is counted by
/// the dataset.
pub fn evaluate(model: &GcnModel, dataset: &Dataset, split: Split) -> Result<Metrics> {
    let adj = norm_adj(dataset).to_csr();
    let logits = gcn_forward(model, &adj, dataset.features())?;
    let preds = model.predict(&logits);
    let rows = dataset.splits().get(split);
    let pred: Vec<usize> = rows.iter().map(|&r| preds[r]).collect();
    Ok(Metrics::compute(&pred, &dataset.labels_for(split), dataset.num_classes()))
}
