//! Named losses: softmax-family baselines evaluated on raw logits, and
//! previously discovered expression-tree losses.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grammar::{parse, ExprTree};
use crate::loss_expr::one_hot;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NativeLoss {
    CrossEntropy,
    ReWeight,
    BalancedSoftmax,
    /// Trained as cross-entropy; logits are prior-corrected before argmax.
    PcSoftmax,
}

impl NativeLoss {
    pub fn name(self) -> &'static str {
        match self {
            NativeLoss::CrossEntropy => "CE",
            NativeLoss::ReWeight => "re-weight",
            NativeLoss::BalancedSoftmax => "balanced-softmax",
            NativeLoss::PcSoftmax => "pc-softmax",
        }
    }

    /// Additive logit correction applied before argmax at evaluation time.
    pub fn logit_adjustment(self, counts: &[usize]) -> Option<Vec<f64>> {
        match self {
            NativeLoss::PcSoftmax => {
                let total: usize = counts.iter().sum();
                Some(counts.iter().map(|&n| -(n as f64 / total as f64).ln()).collect())
            }
            _ => None,
        }
    }
}

/// What a training run minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    Native(NativeLoss),
    Tree(ExprTree),
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Native(n) => f.write_str(n.name()),
            LossKind::Tree(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub kind: LossKind,
}

const NATIVE: [NativeLoss; 4] = [
    NativeLoss::CrossEntropy,
    NativeLoss::ReWeight,
    NativeLoss::BalancedSoftmax,
    NativeLoss::PcSoftmax,
];

/// Discovered losses, keyed by their table ID.
const TREES: [(&str, &str); 15] = [
    ("A", "exp(square(tanh(add(mul(inv(N),neg(y)),yhat))))"),
    ("B", "square(add(neg(mul(N,yhat)),y))"),
    ("C", "add(yhat,square(add(mul(inv(N),neg(y)),yhat)))"),
    ("D", "square(neg(tanh(add(mul(inv(N),neg(y)),yhat))))"),
    ("E", "square(add(tanh(neg(yhat)),mul(tanh(y),inv(N))))"),
    // (exp(-y/N * 2) + yhat)^2, written with exp(x)^2 = exp(2x) to fit 10 rules
    ("F", "square(add(square(exp(mul(inv(N),neg(y)))),yhat))"),
    ("G", "square(tanh(tanh(add(mul(inv(N),neg(y)),yhat))))"),
    ("H", "square(add(yhat,neg(inv(add(log(tanh(y)),N)))))"),
    ("I", "mul(neg(add(tanh(y),mul(yhat,neg(N)))),yhat)"),
    ("J", "square(add(add(yhat,N),log(log(inv(sqrt(y))))))"),
    ("K", "square(add(yhat,sqrt(sqrt(mul(N,square(log(y)))))))"),
    ("L", "log(add(square(add(y,neg(yhat))),log(N)))"),
    ("M", "abs(add(neg(y),add(yhat,square(tanh(N)))))"),
    ("N", "square(add(yhat,add(N,log(log(inv(sqrt(y)))))))"),
    ("O", "mul(yhat,add(yhat,add(N,log(neg(log(y))))))"),
];

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Preset> {
    if let Some(n) = NATIVE.into_iter().find(|n| n.name() == name) {
        return Ok(Preset {
            name: n.name(),
            kind: LossKind::Native(n),
        });
    }
    if let Some((id, text)) = TREES.iter().find(|(id, _)| *id == name) {
        return Ok(Preset {
            name: id,
            kind: LossKind::Tree(parse(text).expect("registered presets parse")),
        });
    }
    Err(Error::UnknownPreset {
        name: name.to_string(),
        registered: list_presets().join(", "),
    })
}

/// All preset names, sorted.
pub fn list_presets() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = NATIVE
        .iter()
        .map(|n| n.name())
        .chain(TREES.iter().map(|(id, _)| *id))
        .collect();
    names.sort_unstable();
    names
}

/// Resolves a `--loss` argument: a preset name, else expression text.
pub fn resolve_loss(spec: &str) -> Result<LossKind> {
    match preset(spec) {
        Ok(p) => Ok(p.kind),
        Err(preset_err) => match parse(spec) {
            Ok(tree) => Ok(LossKind::Tree(tree)),
            Err(parse_err) if looks_like_name(spec) => Err(Error::Config(format!("{preset_err}; {parse_err}"))),
            Err(parse_err) => Err(parse_err),
        },
    }
}

fn looks_like_name(s: &str) -> bool {
    !s.contains('(')
}

/// Appends a native loss over `logits` (rows already restricted to the
/// labelled nodes) and returns the scalar node.
pub fn emit_native(graph: &mut Graph, loss: NativeLoss, logits: Var, labels: &[usize], counts: &[usize]) -> Var {
    let k = counts.len();
    let rows = labels.len() as f64;
    let (z, weights) = match loss {
        NativeLoss::CrossEntropy | NativeLoss::PcSoftmax => (logits, one_hot(labels, k)),
        NativeLoss::ReWeight => {
            let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
            let norm = k as f64 / inv.iter().sum::<f64>();
            let w = Tensor::from_fn(labels.len(), k, |r, c| if labels[r] == c { inv[c] * norm } else { 0.0 });
            (logits, w)
        }
        NativeLoss::BalancedSoftmax => {
            let log_prior = graph.constant(Tensor::from_fn(1, k, |_, c| (counts[c] as f64).ln()));
            (graph.add_row(logits, log_prior), one_hot(labels, k))
        }
    };
    let log_p = graph.log_softmax_rows(z);
    let w = graph.constant(weights);
    let picked = graph.mul(log_p, w);
    let total = graph.sum(picked);
    graph.scale(total, -1.0 / rows)
}

/// Value and logit gradient of a native loss, for inspection and tests.
pub fn native_value_and_grad(loss: NativeLoss, logits: &Tensor, labels: &[usize], counts: &[usize]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let z = g.input("z");
    let rows: Arc<[usize]> = (0..logits.rows()).collect();
    let z_rows = g.select_rows(z, rows);
    let root = emit_native(&mut g, loss, z_rows, labels, counts);
    let value = g.forward_with(root, vec![("z", logits.clone())])?.item();
    let grad = g.backward(root, &[z])?.pop().expect("one gradient");
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Rule;

    #[test]
    fn native_examples() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let (ce, _) = native_value_and_grad(NativeLoss::CrossEntropy, &z, &[0], &[5, 5]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);

        // -log(N_y e^{z_y} / sum_k N_k e^{z_k}) = -log(1 / 10)
        let (bs, _) = native_value_and_grad(NativeLoss::BalancedSoftmax, &z, &[1], &[9, 1]).unwrap();
        assert!((bs - 10f64.ln()).abs() < 1e-12);
        assert!((bs - std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn reweight_weights_rare_classes() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let counts = [9, 1];
        let (rw, _) = native_value_and_grad(NativeLoss::ReWeight, &z, &[0, 1], &counts).unwrap();
        // weights (1/9, 1) * 2 / (10/9) = (0.2, 1.8)
        let expected = (0.2 + 1.8) * 2f64.ln() / 2.0;
        assert!((rw - expected).abs() < 1e-12);
    }

    #[test]
    fn pc_softmax_adjustment() {
        let adj = NativeLoss::PcSoftmax.logit_adjustment(&[3, 1]).unwrap();
        assert!((adj[0] + (0.75f64).ln()).abs() < 1e-15);
        assert!((adj[1] + (0.25f64).ln()).abs() < 1e-15);
        assert!(NativeLoss::CrossEntropy.logit_adjustment(&[3, 1]).is_none());
    }

    #[test]
    fn preset_lookup() {
        let a = preset("A").unwrap();
        assert_eq!(a.kind.to_string(), "exp(square(tanh(add(mul(inv(N),neg(y)),yhat))))");
        assert!(matches!(preset("CE").unwrap().kind, LossKind::Native(NativeLoss::CrossEntropy)));
        match preset("nope") {
            Err(Error::UnknownPreset { registered, .. }) => assert!(registered.contains("balanced-softmax")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preset_listing() {
        let names = list_presets();
        assert!(names.contains(&"CE") && names.contains(&"balanced-softmax"));
        for id in "ABCDEFGHIJKLMNO".chars() {
            assert!(names.contains(&id.to_string().as_str()));
        }
        assert_eq!(names, list_presets());
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 19);
    }

    #[test]
    fn tree_presets_fit_the_rule_budget() {
        for (id, _) in TREES {
            let LossKind::Tree(t) = preset(id).unwrap().kind else { panic!() };
            assert!(t.size() <= 10, "{id} uses {} rules", t.size());
            for r in [Rule::Y, Rule::Yhat, Rule::N] {
                assert!(t.contains(r), "{id} lacks {r}");
            }
        }
    }

    #[test]
    fn preset_f_matches_its_literal_form() {
        use crate::loss_expr::{eval_loss, grad_yhat, probe_set, LossConfig, DEFAULT_PROBE_SEED};
        let literal = parse("square(add(exp(mul(mul(inv(N),neg(y)),2)),yhat))").unwrap();
        assert_eq!(literal.size(), 11);
        let LossKind::Tree(f) = preset("F").unwrap().kind else { panic!() };
        let cfg = LossConfig::default();
        for p in probe_set(DEFAULT_PROBE_SEED) {
            let (a, b) = (eval_loss(&f, &p, &cfg).unwrap().value, eval_loss(&literal, &p, &cfg).unwrap().value);
            assert!((a - b).abs() < 1e-12);
            let (ga, gb) = (grad_yhat(&f, &p, &cfg).unwrap().grad, grad_yhat(&literal, &p, &cfg).unwrap().grad);
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resolve_loss_accepts_names_and_expressions() {
        assert!(matches!(resolve_loss("CE").unwrap(), LossKind::Native(_)));
        assert!(matches!(resolve_loss("B").unwrap(), LossKind::Tree(_)));
        assert!(matches!(resolve_loss("add(yhat,N)").unwrap(), LossKind::Tree(_)));
        assert!(matches!(resolve_loss("add(yhat").unwrap_err(), Error::Parse { .. }));
        assert!(resolve_loss("bogus-name").is_err());
    }
}
