//! Evaluation of loss expression trees.
//!
//! A tree is applied elementwise to `(yhat, y, N)` and then averaged over
//! every entry. Evaluation goes through the autodiff [`Graph`], so the same
//! emitted sub-graph is used on probes and inside GCN training.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, UnaryOp, Var};
use crate::error::{Error, Result};
use crate::grammar::{ExprTree, Rule};
use crate::tensor::Tensor;

/// Seed of the fixed probe set used for checks and fingerprints.
pub const DEFAULT_PROBE_SEED: u64 = 0x5eed_1055;

const PROBE_COUNT: usize = 4;
const PROBE_ROWS: usize = 8;
const PROBE_CLASSES: usize = 4;
const FINGERPRINT_SCALE: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Guard in `inv`, `log` and `sqrt`.
    pub eps: f64,
    /// Values of the `1` and `2` terminals.
    pub constants: [f64; 2],
    /// Feed raw logits to the tree instead of softmax probabilities.
    pub raw_logits: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            constants: [1.0, 2.0],
            raw_logits: false,
        }
    }
}

/// The three terminal inputs of a loss tree, all of shape C x K.
#[derive(Clone, Debug, PartialEq)]
pub struct LossInputs {
    pub yhat: Tensor,
    pub y: Tensor,
    pub n: Tensor,
}

impl LossInputs {
    /// Validates shapes, one-hot rows and row-constant counts.
    pub fn new(yhat: Tensor, y: Tensor, n: Tensor) -> Result<Self> {
        if yhat.shape() != y.shape() || yhat.shape() != n.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss_inputs",
                lhs: yhat.shape(),
                rhs: if yhat.shape() != y.shape() { y.shape() } else { n.shape() },
            });
        }
        for r in 0..y.rows() {
            let row = y.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!("y row {r} is not one-hot")));
            }
            if n.row(r) != n.row(0) {
                return Err(Error::Config(format!("N row {r} differs from row 0")));
            }
        }
        if n.data().iter().any(|&v| v < 1.0) {
            return Err(Error::Config("N entries must be >= 1".into()));
        }
        Ok(Self { yhat, y, n })
    }

    /// Builds `y` and `N` from labels and per-class counts.
    pub fn from_labels(yhat: Tensor, labels: &[usize], counts: &[usize]) -> Result<Self> {
        let k = counts.len();
        if yhat.rows() != labels.len() || yhat.cols() != k {
            return Err(Error::ShapeMismatch {
                op: "loss_inputs",
                lhs: yhat.shape(),
                rhs: (labels.len(), k),
            });
        }
        let y = one_hot(labels, k);
        let n = counts_matrix(labels.len(), counts);
        Self::new(yhat, y, n)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.yhat.shape()
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    Tensor::from_fn(labels.len(), k, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
}

/// `rows x K` matrix with the class counts repeated down every row.
pub fn counts_matrix(rows: usize, counts: &[usize]) -> Tensor {
    Tensor::from_fn(rows, counts.len(), |_, c| counts[c] as f64)
}

/// Appends the elementwise tree to `graph`, returning the (un-averaged) node.
pub fn emit_tree(graph: &mut Graph, tree: &ExprTree, yhat: Var, y: Var, n: Var, cfg: &LossConfig) -> Var {
    let kids: Vec<Var> = tree
        .children
        .iter()
        .map(|c| emit_tree(graph, c, yhat, y, n, cfg))
        .collect();
    match tree.rule {
        Rule::Add => graph.add(kids[0], kids[1]),
        Rule::Mul => graph.mul(kids[0], kids[1]),
        Rule::Neg => graph.unary(UnaryOp::Neg, kids[0]),
        Rule::Abs => graph.unary(UnaryOp::Abs, kids[0]),
        Rule::Inv => graph.unary(UnaryOp::Inv(cfg.eps), kids[0]),
        Rule::Log => graph.unary(UnaryOp::Log(cfg.eps), kids[0]),
        Rule::Exp => graph.unary(UnaryOp::Exp, kids[0]),
        Rule::Tanh => graph.unary(UnaryOp::Tanh, kids[0]),
        Rule::Square => graph.unary(UnaryOp::Square, kids[0]),
        Rule::Sqrt => graph.unary(UnaryOp::Sqrt(cfg.eps), kids[0]),
        Rule::Y => y,
        Rule::Yhat => yhat,
        Rule::N => n,
        Rule::One => graph.constant(Tensor::scalar(cfg.constants[0])),
        Rule::Two => graph.constant(Tensor::scalar(cfg.constants[1])),
    }
}

/// A tree compiled into a reusable graph with inputs `yhat`, `y`, `N`.
#[derive(Clone, Debug)]
pub struct CompiledLoss {
    graph: Graph,
    yhat: Var,
    root: Var,
}

impl CompiledLoss {
    pub fn new(tree: &ExprTree, cfg: &LossConfig) -> Self {
        let mut graph = Graph::new();
        let yhat = graph.input("yhat");
        let y = graph.input("y");
        let n = graph.input("N");
        let body = emit_tree(&mut graph, tree, yhat, y, n, cfg);
        let root = graph.mean(body);
        Self { graph, yhat, root }
    }

    fn bind(&mut self, inputs: &LossInputs) -> Result<()> {
        self.graph.bind("yhat", inputs.yhat.clone())?;
        self.graph.bind("y", inputs.y.clone())?;
        self.graph.bind("N", inputs.n.clone())?;
        Ok(())
    }

    pub fn value(&mut self, inputs: &LossInputs) -> Result<LossValue> {
        self.bind(inputs)?;
        let value = self.graph.forward(self.root)?.item();
        Ok(LossValue {
            value,
            finite: value.is_finite(),
        })
    }

    pub fn value_and_grad(&mut self, inputs: &LossInputs) -> Result<(LossValue, LossGradient)> {
        let value = self.value(inputs)?;
        let grad = self
            .graph
            .backward(self.root, &[self.yhat])?
            .pop()
            .expect("one gradient requested");
        Ok((value, LossGradient::new(grad)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub grad: Tensor,
    pub finite: bool,
    pub all_zero: bool,
}

impl LossGradient {
    fn new(grad: Tensor) -> Self {
        Self {
            finite: grad.is_finite(),
            all_zero: grad.data().iter().all(|&g| g == 0.0),
            grad,
        }
    }
}

/// Mean over all entries of the elementwise tree value.
pub fn eval_loss(tree: &ExprTree, inputs: &LossInputs, cfg: &LossConfig) -> Result<LossValue> {
    CompiledLoss::new(tree, cfg).value(inputs)
}

/// Gradient of [`eval_loss`] with respect to `yhat`.
pub fn grad_yhat(tree: &ExprTree, inputs: &LossInputs, cfg: &LossConfig) -> Result<LossGradient> {
    Ok(CompiledLoss::new(tree, cfg).value_and_grad(inputs)?.1)
}

/// Tree with the arguments of every commutative operator sorted by their
/// canonical text.
pub fn canonicalize(tree: &ExprTree) -> ExprTree {
    let mut children: Vec<ExprTree> = tree.children.iter().map(canonicalize).collect();
    if tree.rule.is_commutative() {
        children.sort_by_cached_key(|c| c.to_string());
    }
    ExprTree {
        rule: tree.rule,
        children,
    }
}

pub fn canonical(tree: &ExprTree) -> String {
    canonicalize(tree).to_string()
}

/// Fixed random inputs used to probe a candidate loss.
pub fn probe_set(seed: u64) -> Vec<LossInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PROBE_COUNT)
        .map(|_| {
            let mut yhat = Tensor::from_fn(PROBE_ROWS, PROBE_CLASSES, |_, _| rng.random_range(0.01..1.0));
            for row in yhat.data_mut().chunks_mut(PROBE_CLASSES) {
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            let labels: Vec<usize> = (0..PROBE_ROWS).map(|_| rng.random_range(0..PROBE_CLASSES)).collect();
            let counts: Vec<usize> = (0..PROBE_CLASSES).map(|_| rng.random_range(1..=20)).collect();
            LossInputs::from_labels(yhat, &labels, &counts).expect("probe inputs are valid")
        })
        .collect()
}

/// Hash of the quantized probe gradients, plus the flags the basic check needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    pub hash: u64,
    pub all_zero: bool,
    pub non_finite: bool,
}

/// Value and gradient of a tree on every probe.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub values: Vec<f64>,
    pub gradients: Vec<Tensor>,
    pub fingerprint: Fingerprint,
}

pub fn probe(tree: &ExprTree, probe_seed: u64, cfg: &LossConfig) -> ProbeReport {
    probe_with(tree, &probe_set(probe_seed), cfg)
}

pub fn probe_with(tree: &ExprTree, probes: &[LossInputs], cfg: &LossConfig) -> ProbeReport {
    let mut compiled = CompiledLoss::new(&canonicalize(tree), cfg);
    let mut hasher = DefaultHasher::new();
    let mut values = Vec::with_capacity(probes.len());
    let mut gradients = Vec::with_capacity(probes.len());
    let (mut all_zero, mut non_finite) = (true, false);
    for p in probes {
        let (v, g) = compiled.value_and_grad(p).expect("probe shapes are consistent");
        non_finite |= !v.finite || !g.finite;
        all_zero &= g.all_zero;
        for &x in g.grad.data() {
            quantize(x).hash(&mut hasher);
        }
        values.push(v.value);
        gradients.push(g.grad);
    }
    ProbeReport {
        values,
        gradients,
        fingerprint: Fingerprint {
            hash: hasher.finish(),
            all_zero,
            non_finite,
        },
    }
}

pub fn fingerprint(tree: &ExprTree, probe_seed: u64, cfg: &LossConfig) -> Fingerprint {
    probe(tree, probe_seed, cfg).fingerprint
}

fn quantize(x: f64) -> i64 {
    if x.is_finite() {
        let q = (x * FINGERPRINT_SCALE).round();
        // -0 and 0 must hash alike
        if q == 0.0 {
            0
        } else {
            q as i64
        }
    } else if x.is_nan() {
        i64::MIN
    } else if x > 0.0 {
        i64::MAX
    } else {
        i64::MIN + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;

    fn single(yhat: &[f64], label: usize, counts: &[usize]) -> LossInputs {
        LossInputs::from_labels(Tensor::from_rows(&[yhat.to_vec()]), &[label], counts).unwrap()
    }

    #[test]
    fn eval_exact_match_is_zero() {
        let tree = parse("add(yhat,neg(y))").unwrap();
        let v = eval_loss(&tree, &single(&[1.0, 0.0], 0, &[3, 3]), &LossConfig::default()).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.finite);
    }

    #[test]
    fn eval_loss_a_against_hand_oracle() {
        let tree = parse("exp(square(tanh(add(mul(inv(N),neg(y)),yhat))))").unwrap();
        let inputs = single(&[0.6, 0.4], 0, &[2, 2]);
        let v = eval_loss(&tree, &inputs, &LossConfig::default()).unwrap().value;

        // scalar oracle straight from the operator definitions, eps = 0
        let entry = |y: f64, n: f64, yh: f64| ((1.0 / n) * (-y) + yh).tanh().powi(2).exp();
        let oracle = (entry(1.0, 2.0, 0.6) + entry(0.0, 2.0, 0.4)) / 2.0;
        assert!((oracle - 1.0826).abs() < 1e-4, "{oracle}");
        assert!((v - oracle).abs() < 1e-5, "{v} vs {oracle}");

        // with eps the oracle is exact
        let eps = 1e-6;
        let entry_eps = |y: f64, n: f64, yh: f64| ((1.0 / (n + eps)) * (-y) + yh).tanh().powi(2).exp();
        let exact = (entry_eps(1.0, 2.0, 0.6) + entry_eps(0.0, 2.0, 0.4)) / 2.0;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn log_of_zero_is_zero() {
        let tree = parse("log(y)").unwrap();
        let inputs = single(&[0.5, 0.5], 0, &[1, 1]);
        let v = eval_loss(&tree, &inputs, &LossConfig::default()).unwrap().value;
        // entries: log(1 + eps) and 0
        assert!((v - (1.0f64 + 1e-6).ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_examples() {
        let cfg = LossConfig::default();
        let tree = parse("square(add(yhat,neg(y)))").unwrap();
        let inputs = single(&[0.6, 0.4], 0, &[1, 1]);
        let g = grad_yhat(&tree, &inputs, &cfg).unwrap();
        // (2 / (C*K)) * (yhat - y) with C*K = 2
        assert!((g.grad.get(0, 0) + 0.4).abs() < 1e-12);
        assert!((g.grad.get(0, 1) - 0.4).abs() < 1e-12);
        let h = 1e-6;
        for c in 0..2 {
            let mut up = inputs.clone();
            let mut down = inputs.clone();
            up.yhat.set(0, c, up.yhat.get(0, c) + h);
            down.yhat.set(0, c, down.yhat.get(0, c) - h);
            let fd = (eval_loss(&tree, &up, &cfg).unwrap().value - eval_loss(&tree, &down, &cfg).unwrap().value)
                / (2.0 * h);
            assert!((fd - g.grad.get(0, c)).abs() < 1e-8);
        }

        let g = grad_yhat(&parse("square(y)").unwrap(), &single(&[0.6, 0.4], 0, &[1, 1]), &cfg).unwrap();
        assert!(g.all_zero);
        assert_eq!(g.grad, Tensor::zeros(1, 2));

        for p in probe_set(DEFAULT_PROBE_SEED) {
            let a = grad_yhat(&parse("add(yhat,yhat)").unwrap(), &p, &cfg).unwrap();
            let b = grad_yhat(&parse("mul(2,yhat)").unwrap(), &p, &cfg).unwrap();
            assert_eq!(a.grad, b.grad);
        }
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(canonical(&parse("add(N,yhat)").unwrap()), "add(N,yhat)");
        assert_eq!(canonical(&parse("add(yhat,N)").unwrap()), "add(N,yhat)");
        assert_eq!(
            canonical(&parse("mul(add(y,N),yhat)").unwrap()),
            "mul(add(N,y),yhat)"
        );
        assert_eq!(canonical(&parse("neg(yhat)").unwrap()), "neg(yhat)");
    }

    #[test]
    fn fingerprint_examples() {
        let cfg = LossConfig::default();
        let fp = |s: &str| fingerprint(&parse(s).unwrap(), DEFAULT_PROBE_SEED, &cfg);
        assert_eq!(fp("add(yhat,yhat)"), fp("mul(2,yhat)"));
        assert!(fp("square(y)").all_zero);
        assert!(!fp("square(yhat)").all_zero);
        assert_eq!(fp("add(N,yhat)"), fp("add(yhat,N)"));
        assert_ne!(fp("square(yhat)").hash, fp("yhat").hash);
        assert!(fp("exp(exp(exp(inv(mul(y,yhat)))))").non_finite);
    }

    #[test]
    fn probes_are_valid_and_deterministic() {
        let a = probe_set(7);
        let b = probe_set(7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for p in &a {
            assert_eq!(p.shape(), (8, 4));
            for r in 0..8 {
                assert!((p.yhat.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(p.n.data().iter().all(|&n| (1.0..=20.0).contains(&n)));
        }
        assert_ne!(probe_set(8), a);
    }

    #[test]
    fn inputs_are_validated() {
        let bad_y = LossInputs::new(Tensor::zeros(1, 2), Tensor::full(1, 2, 1.0), Tensor::full(1, 2, 1.0));
        assert!(bad_y.is_err());
        let bad_n = LossInputs::new(
            Tensor::zeros(2, 2),
            one_hot(&[0, 1], 2),
            Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 2.0]]),
        );
        assert!(bad_n.is_err());
        let zero_n = LossInputs::new(Tensor::zeros(1, 2), one_hot(&[0], 2), Tensor::zeros(1, 2));
        assert!(zero_n.is_err());
        assert!(LossInputs::new(Tensor::zeros(1, 2), one_hot(&[0], 3), Tensor::zeros(1, 3)).is_err());
    }
}
