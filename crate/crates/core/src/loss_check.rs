//! Cheap filters that run before and during proxy training.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::grammar::{ExprTree, Rule};
use crate::loss_expr::{canonical, probe, Fingerprint, LossConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    MissingTerminal,
    NonFinite,
    ZeroGradient,
    NonMonotone,
    PoorPerformance,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::MissingTerminal => "missing-terminal",
            RejectReason::NonFinite => "non-finite",
            RejectReason::ZeroGradient => "zero-gradient",
            RejectReason::NonMonotone => "non-monotone",
            RejectReason::PoorPerformance => "poor-performance",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        [
            RejectReason::MissingTerminal,
            RejectReason::NonFinite,
            RejectReason::ZeroGradient,
            RejectReason::NonMonotone,
            RejectReason::PoorPerformance,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckVerdict {
    Accept,
    Reject(RejectReason),
    /// Equivalent to archive record `source`; its reward is reused.
    Cached { source: usize, reward: f64 },
}

/// Rejects trees that ignore the prediction, the label or the class size.
pub fn legality(tree: &ExprTree) -> CheckVerdict {
    if [Rule::Yhat, Rule::Y, Rule::N].iter().all(|&r| tree.contains(r)) {
        CheckVerdict::Accept
    } else {
        CheckVerdict::Reject(RejectReason::MissingTerminal)
    }
}

#[derive(Clone, Debug)]
pub struct BasicCheck {
    pub verdict: CheckVerdict,
    pub canonical: String,
    /// Absent when the verdict came from an exact canonical match.
    pub fingerprint: Option<Fingerprint>,
}

/// Duplicate lookup by canonical text, then probe-based rejection and
/// equivalence lookup by gradient fingerprint.
pub fn basic_check(tree: &ExprTree, archive: &Archive, probe_seed: u64, cfg: &LossConfig) -> BasicCheck {
    let canonical = canonical(tree);
    if let Some(source) = archive.lookup_canonical(&canonical) {
        return BasicCheck {
            verdict: CheckVerdict::Cached {
                source,
                reward: archive.records()[source].search_reward(),
            },
            canonical,
            fingerprint: None,
        };
    }
    let fp = probe(tree, probe_seed, cfg).fingerprint;
    let verdict = if fp.non_finite {
        CheckVerdict::Reject(RejectReason::NonFinite)
    } else if fp.all_zero {
        CheckVerdict::Reject(RejectReason::ZeroGradient)
    } else if let Some(source) = archive.lookup_fingerprint(fp.hash) {
        CheckVerdict::Cached {
            source,
            reward: archive.records()[source].search_reward(),
        }
    } else {
        CheckVerdict::Accept
    };
    BasicCheck {
        verdict,
        canonical,
        fingerprint: Some(fp),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub monotonicity: bool,
    pub poor_performance: bool,
    /// Minimum correlation between falling loss and rising accuracy.
    pub mono_threshold: f64,
    /// Fraction of the k-th best archived reward a run must reach.
    pub beta: f64,
    pub top_k: usize,
    pub min_samples: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            monotonicity: true,
            poor_performance: true,
            mono_threshold: 0.0,
            beta: 0.6,
            top_k: 10,
            min_samples: 5,
        }
    }
}

impl MonitorConfig {
    pub fn disabled() -> Self {
        Self {
            monotonicity: false,
            poor_performance: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Reject,
}

/// Watches a training run and decides whether to stop it early.
#[derive(Clone, Debug)]
pub struct TrainMonitor {
    cfg: MonitorConfig,
    epochs: usize,
    interval: usize,
    threshold: Option<f64>,
    neg_loss: Vec<f64>,
    accuracy: Vec<f64>,
}

impl TrainMonitor {
    /// `kth_best` is the k-th best finished reward in the archive, if it
    /// holds at least k finished records.
    pub fn new(cfg: MonitorConfig, epochs: usize, kth_best: Option<f64>) -> Self {
        Self {
            cfg,
            epochs,
            interval: (epochs / 20).max(1),
            threshold: kth_best.map(|r| cfg.beta * r),
            neg_loss: Vec::new(),
            accuracy: Vec::new(),
        }
    }

    pub fn samples(&self) -> usize {
        self.neg_loss.len()
    }

    /// Called after every epoch (0-based) with the pre-update train loss,
    /// train balanced accuracy and best validation balanced accuracy so far.
    pub fn observe(&mut self, epoch: usize, train_loss: f64, train_bacc: f64, best_val: f64) -> Option<RejectReason> {
        if self.cfg.monotonicity && epoch.is_multiple_of(self.interval) {
            self.neg_loss.push(-train_loss);
            self.accuracy.push(train_bacc);
            if self.neg_loss.len() >= self.cfg.min_samples
                && monotonicity(&self.neg_loss, &self.accuracy, self.cfg.mono_threshold) == Decision::Reject
            {
                return Some(RejectReason::NonMonotone);
            }
        }
        let done = epoch + 1;
        let checkpoint = (1..4).any(|q| done == self.epochs * q / 4);
        if self.cfg.poor_performance && checkpoint && poor_performance(best_val, self.threshold) == Decision::Reject {
            return Some(RejectReason::PoorPerformance);
        }
        None
    }
}

/// Rejects when accuracy does not rise as the loss falls.
pub fn monotonicity(neg_loss: &[f64], accuracy: &[f64], threshold: f64) -> Decision {
    match pearson(neg_loss, accuracy) {
        Some(r) if r < threshold => Decision::Reject,
        _ => Decision::Continue,
    }
}

pub fn poor_performance(best_val: f64, threshold: Option<f64>) -> Decision {
    match threshold {
        Some(t) if best_val < t => Decision::Reject,
        _ => Decision::Continue,
    }
}

/// Sample correlation; `None` when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
