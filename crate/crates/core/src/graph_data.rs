//! Node-classification datasets.
//!
//! On disk a dataset is a directory with `meta.json`, `features.csv`,
//! `edges.csv`, `labels.csv` and `splits.json`. The in-memory [`Dataset`]
//! keeps labels private and counts every read that exposes test labels, so
//! tests can prove that search never peeks at them.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    name: String,
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    num_classes: usize,
    features: Tensor,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
    splits: Splits,
    train_class_counts: Vec<usize>,
    test_label_reads: Arc<AtomicUsize>,
}

impl Dataset {
    /// Validates every invariant and derives the per-class train counts.
    ///
    /// Edges may be given in either orientation; they are stored as sorted
    /// `u < v` pairs. Split lists are sorted.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        features: Tensor,
        edges: Vec<(usize, usize)>,
        labels: Vec<usize>,
        mut splits: Splits,
    ) -> Result<Self> {
        let c = features.rows();
        if labels.len() != c {
            return Err(Error::InvalidDataset(format!(
                "{} labels for {c} nodes",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidDataset("no classes".into()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "node {i} has label {l} but there are {num_classes} classes"
            )));
        }
        let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u == v {
                return Err(Error::InvalidDataset(format!("self-loop on node {u}")));
            }
            if u >= c || v >= c {
                return Err(Error::InvalidDataset(format!("edge ({u},{v}) out of range")));
            }
            normalized.push((u.min(v), u.max(v)));
        }
        normalized.sort_unstable();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidDataset(format!("duplicate edge {:?}", w[0])));
        }
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let ids = match split {
                Split::Train => &mut splits.train,
                Split::Val => &mut splits.val,
                Split::Test => &mut splits.test,
            };
            ids.sort_unstable();
            for &i in ids.iter() {
                if i >= c {
                    return Err(Error::InvalidDataset(format!("{split:?} id {i} out of range")));
                }
                if !seen.insert(i) {
                    return Err(Error::InvalidDataset(format!("node {i} appears in two splits")));
                }
            }
        }
        let counts = class_counts(&splits.train, &labels, num_classes);
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidDataset(format!("class {k} has no training nodes")));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            features,
            edges: normalized,
            labels,
            splits,
            train_class_counts: counts,
            test_label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Training nodes per class (the `N` terminal).
    pub fn train_class_counts(&self) -> &[usize] {
        &self.train_class_counts
    }

    /// Labels of the nodes in `split`, in split order.
    pub fn labels_for(&self, split: Split) -> Vec<usize> {
        if split == Split::Test {
            self.test_label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.splits.get(split).iter().map(|&i| self.labels[i]).collect()
    }

    /// Every label, test nodes included. Counts as a test-label read.
    pub fn all_labels(&self) -> &[usize] {
        self.test_label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// How many times test labels have been exposed, shared across clones.
    pub fn test_label_reads(&self) -> usize {
        self.test_label_reads.load(Ordering::Relaxed)
    }

    /// Reads the directory format; all invariants are validated.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));

        let meta: Meta = serde_json::from_str(&read("meta.json")?).map_err(|e| Error::Data {
            file: "meta.json".into(),
            line: e.line(),
            message: e.to_string(),
        })?;

        let features_text = read("features.csv")?;
        let mut data = Vec::with_capacity(meta.num_nodes * meta.num_features);
        let mut rows = 0;
        for (i, line) in features_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Data {
                file: "features.csv".into(),
                line: i + 1,
                message,
            };
            let before = data.len();
            for field in line.split(',') {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| err(format!("bad float `{field}`: {e}")))?,
                );
            }
            if data.len() - before != meta.num_features {
                return Err(err(format!(
                    "expected {} features, found {}",
                    meta.num_features,
                    data.len() - before
                )));
            }
            rows += 1;
        }
        if rows != meta.num_nodes {
            return Err(Error::Data {
                file: "features.csv".into(),
                line: rows,
                message: format!("expected {} rows, found {rows}", meta.num_nodes),
            });
        }
        let features = Tensor::new(rows, meta.num_features, data)?;

        let mut labels = Vec::with_capacity(meta.num_nodes);
        for (i, line) in read("labels.csv")?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Data {
                file: "labels.csv".into(),
                line: i + 1,
                message,
            };
            let label: usize = line.trim().parse().map_err(|e| err(format!("bad label `{line}`: {e}")))?;
            if label >= meta.num_classes {
                return Err(err(format!(
                    "label {label} out of range for {} classes",
                    meta.num_classes
                )));
            }
            labels.push(label);
        }
        if labels.len() != meta.num_nodes {
            return Err(Error::Data {
                file: "labels.csv".into(),
                line: labels.len(),
                message: format!("expected {} labels, found {}", meta.num_nodes, labels.len()),
            });
        }

        let mut edges = Vec::new();
        for (i, line) in read("edges.csv")?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Data {
                file: "edges.csv".into(),
                line: i + 1,
                message,
            };
            let (u, v) = line
                .split_once(',')
                .ok_or_else(|| err(format!("expected `u,v`, found `{line}`")))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| err(format!("bad node id `{s}`: {e}")));
            let (u, v) = (parse(u)?, parse(v)?);
            if u >= v {
                return Err(err(format!("edge ({u},{v}) must satisfy u < v")));
            }
            if v >= meta.num_nodes {
                return Err(err(format!("node id {v} out of range")));
            }
            if let Some(&prev) = edges.last() {
                if (u, v) <= prev {
                    return Err(err(format!("edge ({u},{v}) is duplicate or out of order")));
                }
            }
            edges.push((u, v));
        }

        let splits: Splits = serde_json::from_str(&read("splits.json")?).map_err(|e| Error::Data {
            file: "splits.json".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let ids = splits.get(split);
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data {
                    file: "splits.json".into(),
                    line: 1,
                    message: format!("{split:?} ids must be strictly ascending"),
                });
            }
        }

        Self::new(meta.name, meta.num_classes, features, edges, labels, splits).map_err(|e| match e {
            Error::InvalidDataset(message) => Error::Data {
                file: "splits.json".into(),
                line: 1,
                message,
            },
            other => other,
        })
    }

    /// Writes the directory format. Exposes test labels.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, contents: String| fs::write(dir.join(name), contents).map_err(|e| Error::io(dir.join(name), e));

        let meta = Meta {
            name: self.name.clone(),
            num_nodes: self.num_nodes(),
            num_features: self.num_features(),
            num_classes: self.num_classes,
        };
        write("meta.json", serde_json::to_string_pretty(&meta)? + "\n")?;

        let mut features = String::new();
        for r in 0..self.features.rows() {
            let row: Vec<String> = self.features.row(r).iter().map(f64::to_string).collect();
            features.push_str(&row.join(","));
            features.push('\n');
        }
        write("features.csv", features)?;

        let edges: String = self.edges.iter().map(|(u, v)| format!("{u},{v}\n")).collect();
        write("edges.csv", edges)?;

        let labels: String = self.all_labels().iter().map(|l| format!("{l}\n")).collect();
        write("labels.csv", labels)?;

        write("splits.json", serde_json::to_string(&self.splits)? + "\n")?;
        Ok(())
    }
}

fn class_counts(ids: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &i in ids {
        counts[labels[i]] += 1;
    }
    counts
}

/// Parameters of the stochastic block model generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Scale of the class-mean offset; larger is easier.
    pub feature_shift: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            nodes_per_class: 100,
            num_classes: 3,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 16,
            feature_shift: 2.0,
            train_per_class: 20,
            val_per_class: 30,
            seed: 0,
        }
    }
}

/// Samples a planted-partition graph with Gaussian features around
/// per-class means.
pub fn gen_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&cfg.p_in) || !(0.0..=1.0).contains(&cfg.p_out) || cfg.p_out > cfg.p_in {
        return Err(Error::Config(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.num_classes == 0 || cfg.feature_dim == 0 {
        return Err(Error::Config("num_classes and feature_dim must be positive".into()));
    }
    if cfg.train_per_class == 0 || cfg.nodes_per_class < cfg.train_per_class + cfg.val_per_class {
        return Err(Error::Config(format!(
            "nodes_per_class={} too small for {} train + {} val nodes",
            cfg.nodes_per_class, cfg.train_per_class, cfg.val_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes_per_class * cfg.num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_class).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { cfg.p_in } else { cfg.p_out };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let features = Tensor::from_fn(n, cfg.feature_dim, |r, c| {
        let noise: f64 = rng.sample(StandardNormal);
        let mean = if c == labels[r] % cfg.feature_dim { cfg.feature_shift } else { 0.0 };
        mean + noise
    });

    let mut splits = Splits::default();
    for k in 0..cfg.num_classes {
        let mut members: Vec<usize> = (k * cfg.nodes_per_class..(k + 1) * cfg.nodes_per_class).collect();
        members.shuffle(&mut rng);
        let (train, rest) = members.split_at(cfg.train_per_class);
        let (val, test) = rest.split_at(cfg.val_per_class);
        splits.train.extend_from_slice(train);
        splits.val.extend_from_slice(val);
        splits.test.extend_from_slice(test);
    }

    Dataset::new(
        format!("sbm-k{}-n{}-s{}", cfg.num_classes, cfg.nodes_per_class, cfg.seed),
        cfg.num_classes,
        features,
        edges,
        labels,
        splits,
    )
}

/// Keeps every training node of the first `ceil(K/2)` classes and subsamples
/// each remaining class to `ceil(n_k / rho)`. Validation and test splits are
/// untouched.
pub fn step_imbalance(dataset: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    if rho.is_nan() || rho < 1.0 {
        return Err(Error::Config(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    let k = dataset.num_classes;
    let counts = dataset.train_class_counts();
    if let Some(c) = counts.iter().position(|&n| (n as f64) < rho) {
        return Err(Error::Config(format!(
            "class {c} has {} training nodes, fewer than rho={rho}",
            counts[c]
        )));
    }
    let n_major = k.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &dataset.splits.train {
        per_class[dataset.labels[i]].push(i);
    }
    let mut train = Vec::with_capacity(dataset.splits.train.len());
    for (class, members) in per_class.iter_mut().enumerate() {
        if class >= n_major {
            let keep = (members.len() as f64 / rho).ceil() as usize;
            members.shuffle(&mut rng);
            members.truncate(keep);
        }
        train.extend_from_slice(members);
    }
    let mut out = dataset.clone();
    train.sort_unstable();
    out.splits.train = train;
    out.train_class_counts = class_counts(&out.splits.train, &out.labels, k);
    Ok(out)
}

/// Symmetric-normalized adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`,
/// in coordinate form.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAdj {
    pub num_nodes: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl NormAdj {
    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.num_nodes, self.num_nodes, &self.entries)
    }
}

pub fn norm_adj(dataset: &Dataset) -> NormAdj {
    let n = dataset.num_nodes();
    let mut degree = vec![1.0f64; n];
    for &(u, v) in &dataset.edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut entries = Vec::with_capacity(n + 2 * dataset.edges.len());
    for (i, &s) in inv_sqrt.iter().enumerate() {
        entries.push((i, i, s * s));
    }
    for &(u, v) in &dataset.edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        entries.push((u, v, w));
        entries.push((v, u, w));
    }
    entries.sort_by_key(|e| (e.0, e.1));
    NormAdj { num_nodes: n, entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(edges: Vec<(usize, usize)>, n: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let splits = Splits {
            train: vec![0, 1],
            val: vec![],
            test: (2..n).collect(),
        };
        Dataset::new("toy", 2, Tensor::zeros(n, 1), edges, labels, splits).unwrap()
    }

    #[test]
    fn norm_adj_examples() {
        let a = norm_adj(&toy(vec![(0, 1)], 2)).to_csr().to_dense();
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let a = norm_adj(&toy(vec![(0, 1)], 3)).to_csr();
        assert_eq!(a.get(2, 2), 1.0);

        let a = norm_adj(&toy(vec![(0, 1), (0, 2), (1, 2)], 3)).to_csr().to_dense();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn norm_adj_is_symmetric() {
        let d = gen_sbm(&SbmConfig::default()).unwrap();
        let a = norm_adj(&d).to_csr();
        for (r, c, v) in a.triplets() {
            assert!(v > 0.0);
            assert_eq!(a.get(c, r), v);
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let labels = vec![0, 1, 0];
        let ok_splits = Splits {
            train: vec![0, 1],
            val: vec![2],
            test: vec![],
        };
        let f = || Tensor::zeros(3, 2);
        assert!(Dataset::new("d", 2, f(), vec![(1, 1)], labels.clone(), ok_splits.clone()).is_err());
        assert!(Dataset::new("d", 2, f(), vec![(0, 1), (1, 0)], labels.clone(), ok_splits.clone()).is_err());
        assert!(Dataset::new("d", 2, f(), vec![(0, 3)], labels.clone(), ok_splits.clone()).is_err());
        assert!(Dataset::new("d", 2, f(), vec![], vec![0, 2, 0], ok_splits.clone()).is_err());
        let overlap = Splits {
            train: vec![0, 1],
            val: vec![1],
            test: vec![],
        };
        assert!(Dataset::new("d", 2, f(), vec![], labels.clone(), overlap).is_err());
        let missing_class = Splits {
            train: vec![0],
            val: vec![1],
            test: vec![2],
        };
        assert!(Dataset::new("d", 2, f(), vec![], labels.clone(), missing_class).is_err());
        let d = Dataset::new("d", 2, f(), vec![(1, 0)], labels, ok_splits).unwrap();
        assert_eq!(d.edges(), &[(0, 1)]);
        assert_eq!(d.train_class_counts(), &[1, 1]);
    }

    #[test]
    fn sbm_degenerate_probabilities() {
        let cfg = SbmConfig {
            nodes_per_class: 60,
            num_classes: 2,
            p_in: 1.0,
            p_out: 0.0,
            ..SbmConfig::default()
        };
        let d = gen_sbm(&cfg).unwrap();
        assert_eq!(d.edges().len(), 2 * 60 * 59 / 2);
        let labels = d.all_labels();
        assert!(d.edges().iter().all(|&(u, v)| labels[u] == labels[v]));
    }

    #[test]
    fn sbm_is_deterministic() {
        let a = gen_sbm(&SbmConfig::default()).unwrap();
        let b = gen_sbm(&SbmConfig::default()).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.splits(), b.splits());
        let c = gen_sbm(&SbmConfig {
            seed: 1,
            ..SbmConfig::default()
        })
        .unwrap();
        assert_ne!(a.edges(), c.edges());
    }

    #[test]
    fn sbm_uniform_density_when_p_equal() {
        // within-block and cross-block densities agree within binomial noise
        let (mut within, mut within_pairs, mut across, mut across_pairs) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..10 {
            let cfg = SbmConfig {
                nodes_per_class: 60,
                num_classes: 3,
                p_in: 0.05,
                p_out: 0.05,
                seed,
                ..SbmConfig::default()
            };
            let d = gen_sbm(&cfg).unwrap();
            let labels = d.all_labels();
            for &(u, v) in d.edges() {
                if labels[u] == labels[v] {
                    within += 1.0;
                } else {
                    across += 1.0;
                }
            }
            within_pairs += 3.0 * 60.0 * 59.0 / 2.0;
            across_pairs += 3.0 * 60.0 * 60.0;
        }
        let (p1, p2) = (within / within_pairs, across / across_pairs);
        let se = (0.05f64 * 0.95 / within_pairs).sqrt() + (0.05f64 * 0.95 / across_pairs).sqrt();
        assert!((p1 - p2).abs() < 4.0 * se, "{p1} vs {p2}");
    }

    #[test]
    fn sbm_rejects_small_classes() {
        let cfg = SbmConfig {
            nodes_per_class: 40,
            ..SbmConfig::default()
        };
        assert!(gen_sbm(&cfg).is_err());
        let cfg = SbmConfig {
            p_in: 0.01,
            p_out: 0.1,
            ..SbmConfig::default()
        };
        assert!(gen_sbm(&cfg).is_err());
    }

    #[test]
    fn step_imbalance_examples() {
        let base = |k| {
            gen_sbm(&SbmConfig {
                num_classes: k,
                ..SbmConfig::default()
            })
            .unwrap()
        };
        let d4 = base(4);
        assert_eq!(step_imbalance(&d4, 10.0, 0).unwrap().train_class_counts(), &[20, 20, 2, 2]);

        let d3 = base(3);
        let same = step_imbalance(&d3, 1.0, 0).unwrap();
        assert_eq!(same.splits(), d3.splits());
        assert_eq!(step_imbalance(&d3, 5.0, 0).unwrap().train_class_counts(), &[20, 20, 4]);

        assert!(step_imbalance(&d3, 0.5, 0).is_err());
        assert!(step_imbalance(&d3, 21.0, 0).is_err());
    }

    #[test]
    fn step_imbalance_preserves_eval_splits() {
        let d = gen_sbm(&SbmConfig {
            num_classes: 5,
            ..SbmConfig::default()
        })
        .unwrap();
        for rho in [1.0, 2.5, 10.0, 20.0] {
            let im = step_imbalance(&d, rho, 3).unwrap();
            assert_eq!(im.splits().val, d.splits().val);
            assert_eq!(im.splits().test, d.splits().test);
            assert!(im.train_class_counts().iter().all(|&n| n >= 1));
            let recount = class_counts(&im.splits().train, im.all_labels(), 5);
            assert_eq!(recount, im.train_class_counts());
        }
    }

    #[test]
    fn test_label_reads_are_counted() {
        let d = gen_sbm(&SbmConfig::default()).unwrap();
        let clone = d.clone();
        d.labels_for(Split::Train);
        d.labels_for(Split::Val);
        assert_eq!(clone.test_label_reads(), 0);
        d.labels_for(Split::Test);
        assert_eq!(clone.test_label_reads(), 1);
    }
}
