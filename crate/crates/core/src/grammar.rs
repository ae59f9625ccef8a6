//! Context-free grammar over loss expressions.
//!
//! There is a single non-terminal kind; every rule rewrites one pending slot
//! into an operator (opening one or two new slots) or a terminal. A
//! [`SearchState`] is the sequence of rules applied so far plus the LIFO stack
//! of slots still waiting to be filled. Children are pushed right-to-left so
//! the leftmost child is filled next, which makes the action sequence the
//! pre-order listing of the tree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of rule applications per expression.
pub const DEFAULT_T_MAX: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    Add,
    Mul,
    Neg,
    Abs,
    Inv,
    Log,
    Exp,
    Tanh,
    Square,
    Sqrt,
    Y,
    Yhat,
    N,
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    Operator,
    Terminal,
}

impl Rule {
    pub const ALL: [Rule; 15] = [
        Rule::Add,
        Rule::Mul,
        Rule::Neg,
        Rule::Abs,
        Rule::Inv,
        Rule::Log,
        Rule::Exp,
        Rule::Tanh,
        Rule::Square,
        Rule::Sqrt,
        Rule::Y,
        Rule::Yhat,
        Rule::N,
        Rule::One,
        Rule::Two,
    ];

    pub const TERMINALS: [Rule; 5] = [Rule::Y, Rule::Yhat, Rule::N, Rule::One, Rule::Two];

    pub fn arity(self) -> usize {
        match self {
            Rule::Add | Rule::Mul => 2,
            Rule::Neg
            | Rule::Abs
            | Rule::Inv
            | Rule::Log
            | Rule::Exp
            | Rule::Tanh
            | Rule::Square
            | Rule::Sqrt => 1,
            Rule::Y | Rule::Yhat | Rule::N | Rule::One | Rule::Two => 0,
        }
    }

    pub fn kind(self) -> RuleKind {
        if self.arity() == 0 {
            RuleKind::Terminal
        } else {
            RuleKind::Operator
        }
    }

    pub fn is_terminal(self) -> bool {
        self.arity() == 0
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Rule::Add | Rule::Mul)
    }

    /// Token used in the text format.
    pub fn token(self) -> &'static str {
        match self {
            Rule::Add => "add",
            Rule::Mul => "mul",
            Rule::Neg => "neg",
            Rule::Abs => "abs",
            Rule::Inv => "inv",
            Rule::Log => "log",
            Rule::Exp => "exp",
            Rule::Tanh => "tanh",
            Rule::Square => "square",
            Rule::Sqrt => "sqrt",
            Rule::Y => "y",
            Rule::Yhat => "yhat",
            Rule::N => "N",
            Rule::One => "1",
            Rule::Two => "2",
        }
    }

    pub fn from_token(token: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.token() == token)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// A pending non-terminal: which action created it and which child it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub parent: Option<usize>,
    pub child: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SearchState {
    actions: Vec<Rule>,
    nt_stack: Vec<Slot>,
    t_max: usize,
}

impl SearchState {
    /// The start state: no actions and one open slot for the output.
    pub fn new(t_max: usize) -> Self {
        Self {
            actions: Vec::new(),
            nt_stack: vec![Slot {
                parent: None,
                child: 0,
            }],
            t_max,
        }
    }

    /// Replays `actions` from the start state through the budget-aware filter.
    pub fn replay(actions: &[Rule], t_max: usize) -> Result<Self> {
        let mut state = Self::new(t_max);
        for &a in actions {
            state = state.apply_action(a)?;
        }
        Ok(state)
    }

    pub fn actions(&self) -> &[Rule] {
        &self.actions
    }

    pub fn nt_stack(&self) -> &[Slot] {
        &self.nt_stack
    }

    pub fn t(&self) -> usize {
        self.actions.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn open_slots(&self) -> usize {
        self.nt_stack.len()
    }

    pub fn remaining(&self) -> usize {
        self.t_max.saturating_sub(self.t())
    }

    /// True when the expression is complete.
    pub fn is_terminal(&self) -> bool {
        self.nt_stack.is_empty()
    }

    /// Incomplete and out of budget.
    pub fn is_dead_end(&self) -> bool {
        !self.is_terminal() && self.t() >= self.t_max
    }

    /// Rules that keep the expression completable within `t_max`.
    pub fn available_actions(&self) -> Result<Vec<Rule>> {
        if self.is_terminal() {
            return Err(Error::Grammar("no actions from a complete expression".into()));
        }
        Ok(Rule::ALL
            .into_iter()
            .filter(|r| self.fits_budget(*r))
            .collect())
    }

    fn fits_budget(&self, rule: Rule) -> bool {
        if self.is_terminal() || self.t() >= self.t_max {
            return false;
        }
        let open_after = self.open_slots() - 1 + rule.arity();
        let remaining_after = self.remaining() - 1;
        open_after <= remaining_after
    }

    /// Applies `rule` if the budget-aware filter allows it.
    pub fn apply_action(&self, rule: Rule) -> Result<Self> {
        if !self.fits_budget(rule) {
            return Err(Error::Grammar(format!(
                "rule `{rule}` not applicable at t={} with {} open slots (t_max={})",
                self.t(),
                self.open_slots(),
                self.t_max
            )));
        }
        Ok(self.push_rule(rule))
    }

    /// Applies `rule` to the top slot with only the hard `t < t_max` limit,
    /// so the result may dead-end.
    pub fn apply_unfiltered(&self, rule: Rule) -> Result<Self> {
        if self.is_terminal() || self.t() >= self.t_max {
            return Err(Error::Grammar("state has no budget or no open slot".into()));
        }
        Ok(self.push_rule(rule))
    }

    fn push_rule(&self, rule: Rule) -> Self {
        let mut next = self.clone();
        next.nt_stack.pop();
        let me = next.actions.len();
        next.actions.push(rule);
        for child in (0..rule.arity()).rev() {
            next.nt_stack.push(Slot {
                parent: Some(me),
                child,
            });
        }
        next
    }

    /// Decodes a complete state into its tree.
    pub fn tree(&self) -> Result<ExprTree> {
        build_tree(&self.actions)
    }
}

/// Parse tree of a loss expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExprTree {
    pub rule: Rule,
    pub children: Vec<ExprTree>,
}

impl ExprTree {
    pub fn leaf(rule: Rule) -> Self {
        debug_assert!(rule.is_terminal());
        Self {
            rule,
            children: Vec::new(),
        }
    }

    pub fn unary(rule: Rule, child: ExprTree) -> Self {
        debug_assert_eq!(rule.arity(), 1);
        Self {
            rule,
            children: vec![child],
        }
    }

    pub fn binary(rule: Rule, lhs: ExprTree, rhs: ExprTree) -> Self {
        debug_assert_eq!(rule.arity(), 2);
        Self {
            rule,
            children: vec![lhs, rhs],
        }
    }

    /// Pre-order rule listing, i.e. the action sequence that generates the tree.
    pub fn preorder(&self) -> Vec<Rule> {
        let mut out = Vec::with_capacity(self.size());
        self.walk(&mut |t| out.push(t.rule));
        out
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(ExprTree::size).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(ExprTree::depth).max().unwrap_or(0)
    }

    pub fn contains(&self, rule: Rule) -> bool {
        self.rule == rule || self.children.iter().any(|c| c.contains(rule))
    }

    fn walk(&self, f: &mut impl FnMut(&ExprTree)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.rule.token())?;
        if !self.children.is_empty() {
            f.write_str("(")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{c}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl FromStr for ExprTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

/// Decodes a complete pre-order action sequence.
pub fn build_tree(actions: &[Rule]) -> Result<ExprTree> {
    fn decode(actions: &[Rule], pos: &mut usize) -> Result<ExprTree> {
        let Some(&rule) = actions.get(*pos) else {
            return Err(Error::Grammar(format!(
                "incomplete action sequence: slot left open after {} actions",
                actions.len()
            )));
        };
        *pos += 1;
        let children = (0..rule.arity())
            .map(|_| decode(actions, pos))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExprTree { rule, children })
    }
    let mut pos = 0;
    let tree = decode(actions, &mut pos)?;
    if pos != actions.len() {
        return Err(Error::Grammar(format!(
            "action sequence completes after {pos} actions but has {}",
            actions.len()
        )));
    }
    Ok(tree)
}

pub fn serialize(tree: &ExprTree) -> String {
    tree.to_string()
}

/// Parses the prefix text format, e.g. `square(add(yhat,neg(y)))`.
///
/// Error offsets are 1-based byte positions; a missing token at the end of
/// input is reported at `len + 1`.
pub fn parse(text: &str) -> Result<ExprTree> {
    let mut p = Parser { text, pos: 0 };
    let tree = p.expr()?;
    p.skip_ws();
    if p.pos < text.len() {
        return Err(p.error(p.pos, "unexpected trailing input"));
    }
    Ok(tree)
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: at + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn expect(&mut self, ch: char) -> Result<()> {
        match self.peek() {
            Some(c) if c == ch => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.error(self.pos, format!("expected `{ch}`, found `{c}`"))),
            None => Err(self.error(self.pos, format!("expected `{ch}`, found end of input"))),
        }
    }

    fn expr(&mut self) -> Result<ExprTree> {
        let start = match self.peek() {
            Some(_) => self.pos,
            None => return Err(self.error(self.pos, "expected expression, found end of input")),
        };
        let len = self.text[start..]
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(self.text.len() - start);
        if len == 0 {
            let c = self.text[start..].chars().next().unwrap();
            return Err(self.error(start, format!("unexpected `{c}`")));
        }
        let token = &self.text[start..start + len];
        let rule = Rule::from_token(token)
            .ok_or_else(|| self.error(start, format!("unknown token `{token}`")))?;
        self.pos = start + len;
        if rule.is_terminal() {
            return Ok(ExprTree::leaf(rule));
        }
        self.expect('(')?;
        let mut children = Vec::with_capacity(rule.arity());
        for i in 0..rule.arity() {
            if i > 0 {
                self.expect(',')?;
            }
            children.push(self.expr()?);
        }
        self.expect(')')?;
        Ok(ExprTree { rule, children })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Rule::*;

    #[test]
    fn available_actions_examples() {
        let s = SearchState::new(10);
        assert_eq!(s.available_actions().unwrap().len(), 15);

        // one open slot, one action left
        let s = SearchState::replay(&[Neg; 9], 10).unwrap();
        assert_eq!((s.open_slots(), s.remaining()), (1, 1));
        assert_eq!(s.available_actions().unwrap(), Rule::TERMINALS.to_vec());

        // two open slots, two actions left
        let s = SearchState::replay(&[Neg, Neg, Neg, Neg, Neg, Neg, Neg, Add], 10).unwrap();
        assert_eq!((s.open_slots(), s.remaining()), (2, 2));
        assert_eq!(s.available_actions().unwrap(), Rule::TERMINALS.to_vec());

        let done = SearchState::replay(&[Yhat], 10).unwrap();
        assert!(done.available_actions().is_err());
    }

    #[test]
    fn apply_action_examples() {
        let s = SearchState::new(10).apply_action(Add).unwrap();
        assert_eq!(s.nt_stack().len(), 2);

        let s = SearchState::new(10).apply_action(Yhat).unwrap();
        assert!(s.is_terminal());

        let s = SearchState::replay(&[Add, Yhat, N], 10).unwrap();
        assert!(s.is_terminal());
        assert_eq!(s.tree().unwrap().to_string(), "add(yhat,N)");

        let tight = SearchState::replay(&[Neg; 9], 10).unwrap();
        assert!(tight.apply_action(Exp).is_err());
        assert!(tight.apply_action(Y).is_ok());
    }

    #[test]
    fn unfiltered_application_can_dead_end() {
        let mut s = SearchState::new(3);
        for _ in 0..3 {
            s = s.apply_unfiltered(Add).unwrap();
        }
        assert!(s.is_dead_end());
        assert!(s.apply_unfiltered(Y).is_err());
    }

    #[test]
    fn build_tree_examples() {
        let t = build_tree(&[Square, Add, Yhat, Neg, Y]).unwrap();
        assert_eq!(t.to_string(), "square(add(yhat,neg(y)))");

        let a = build_tree(&[Exp, Square, Tanh, Add, Mul, Inv, N, Neg, Y, Yhat]).unwrap();
        assert_eq!(a.to_string(), "exp(square(tanh(add(mul(inv(N),neg(y)),yhat))))");

        assert!(build_tree(&[Add, Yhat]).is_err());
        assert!(build_tree(&[Yhat, Y]).is_err());
        assert!(build_tree(&[]).is_err());
    }

    #[test]
    fn parse_examples() {
        let t = ExprTree::binary(Add, ExprTree::leaf(Yhat), ExprTree::leaf(N));
        assert_eq!(serialize(&t), "add(yhat,N)");

        let b = parse("square(add(neg(mul(N,yhat)),y))").unwrap();
        assert_eq!(b.preorder(), vec![Square, Add, Neg, Mul, N, Yhat, Y]);

        match parse("add(yhat") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_diagnostics() {
        let offset = |s: &str| match parse(s) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error for {s:?}, got {other:?}"),
        };
        assert_eq!(offset("foo(y)"), 1);
        assert_eq!(offset("neg(y,N)"), 6);
        assert_eq!(offset("add(y)"), 6);
        assert_eq!(offset("y)"), 2);
        assert_eq!(offset("Y"), 1);
        assert_eq!(offset(""), 1);
        assert_eq!(offset("add(y,$)"), 7);
    }

    #[test]
    fn parse_ignores_whitespace() {
        let t = parse("  mul ( 2 ,\n yhat )  ").unwrap();
        assert_eq!(t.to_string(), "mul(2,yhat)");
    }

    #[test]
    fn replay_reproduces_stack() {
        let s = SearchState::new(10)
            .apply_action(Mul)
            .unwrap()
            .apply_action(Neg)
            .unwrap();
        let r = SearchState::replay(s.actions(), 10).unwrap();
        assert_eq!(r.nt_stack(), s.nt_stack());
    }
}
