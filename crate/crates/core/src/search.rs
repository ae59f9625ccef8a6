//! Monte-Carlo tree search over grammar action sequences.
//!
//! Each episode walks the tree with UCT, expands one child, then completes
//! `simulations` random rollouts from it. Completed expressions go through
//! legality, the optional basic check, and the evaluator; the best rollout
//! reward is backed up along the path as a running maximum.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveRecord, RecordStatus};
use crate::error::{Error, Result};
use crate::grammar::{ExprTree, Rule, SearchState, DEFAULT_T_MAX};
use crate::graph_data::{Dataset, Split};
use crate::loss_check::{basic_check, legality, CheckVerdict, MonitorConfig, RejectReason, TrainMonitor};
use crate::loss_expr::{canonical, probe_set, CompiledLoss, LossConfig, LossInputs, DEFAULT_PROBE_SEED};
use crate::loss_zoo::LossKind;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{evaluate, train, train_prepared, Metrics, Prepared, TrainConfig, TrainStatus};

/// `Q + c * sqrt(ln W(s) / W(s,a))`; unvisited actions score infinity.
pub fn uct_score(q: f64, parent_visits: u64, action_visits: u64, c: f64) -> f64 {
    if action_visits == 0 {
        return f64::INFINITY;
    }
    q + c * ((parent_visits as f64).ln() / action_visits as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct MctsNode {
    pub state: SearchState,
    pub actions: Vec<Rule>,
    pub children: Vec<Option<usize>>,
    /// Best reward seen through each action.
    pub q: Vec<f64>,
    pub visits: Vec<u64>,
    pub total_visits: u64,
}

impl MctsNode {
    fn new(state: SearchState) -> Self {
        let actions = if state.is_terminal() {
            Vec::new()
        } else {
            state.available_actions().unwrap_or_default()
        };
        let n = actions.len();
        Self {
            state,
            actions,
            children: vec![None; n],
            q: vec![0.0; n],
            visits: vec![0; n],
            total_visits: 1,
        }
    }

    fn fully_expanded(&self) -> bool {
        self.children.iter().all(Option::is_some)
    }
}

/// Node arena; index 0 is the root.
#[derive(Clone, Debug)]
pub struct Mcts {
    pub nodes: Vec<MctsNode>,
    pub exploration: f64,
}

impl Mcts {
    pub fn new(t_max: usize, exploration: f64) -> Self {
        Self {
            nodes: vec![MctsNode::new(SearchState::new(t_max))],
            exploration,
        }
    }

    /// Action index with the highest UCT score; ties broken at random.
    pub fn select_action(&self, node: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let n = &self.nodes[node];
        let scores: Vec<f64> = (0..n.actions.len())
            .map(|a| uct_score(n.q[a], n.total_visits, n.visits[a], self.exploration))
            .collect();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..scores.len()).filter(|&a| scores[a] == best).collect();
        ties.choose(rng).copied()
    }

    fn backup(&mut self, path: &[(usize, usize)], leaf: usize, reward: f64) {
        for &(node, a) in path {
            let n = &mut self.nodes[node];
            n.visits[a] += 1;
            n.q[a] = n.q[a].max(reward);
            n.total_visits += 1;
        }
        if path.last().map(|&(n, _)| n) != Some(leaf) {
            self.nodes[leaf].total_visits += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Best validation metric reached; partial for rejected runs.
    pub reward: f64,
    pub rejected: Option<RejectReason>,
}

/// Scores a candidate that passed the checks.
pub trait Evaluator {
    /// `kth_best` is the archive's k-th best finished reward when known,
    /// for early rejection.
    fn evaluate(&mut self, tree: &ExprTree, kth_best: Option<f64>) -> Result<Evaluation>;
}

/// Proxy training of a GCN with the candidate loss.
pub struct ProxyEvaluator {
    data: Prepared,
    pub train: TrainConfig,
    pub monitor: MonitorConfig,
}

impl ProxyEvaluator {
    pub fn new(dataset: &Dataset, train: TrainConfig, monitor: MonitorConfig) -> Result<Self> {
        Ok(Self {
            data: Prepared::new(dataset)?,
            train,
            monitor,
        })
    }
}

impl Evaluator for ProxyEvaluator {
    fn evaluate(&mut self, tree: &ExprTree, kth_best: Option<f64>) -> Result<Evaluation> {
        let mut monitor = TrainMonitor::new(self.monitor, self.train.epochs, kth_best);
        let out = train_prepared(&self.data, &LossKind::Tree(tree.clone()), &self.train, Some(&mut monitor))?;
        Ok(Evaluation {
            reward: out.reward,
            rejected: match out.status {
                TrainStatus::Completed => None,
                TrainStatus::Rejected { reason, .. } => Some(reason),
            },
        })
    }
}

/// Rewards closeness of the loss gradient to a fixed target loss on the
/// probe set: `1 / (1 + mean |g - g_target|)`.
pub struct ToyOracle {
    probes: Vec<LossInputs>,
    target: Vec<Tensor>,
    cfg: LossConfig,
}

impl ToyOracle {
    pub const DEFAULT_TARGET: &'static str = "square(add(yhat,neg(mul(inv(N),y))))";

    pub fn new(target: &ExprTree, probe_seed: u64, cfg: LossConfig) -> Result<Self> {
        let probes = probe_set(probe_seed);
        let target = Self::gradients(target, &probes, &cfg)?;
        Ok(Self { probes, target, cfg })
    }

    fn gradients(tree: &ExprTree, probes: &[LossInputs], cfg: &LossConfig) -> Result<Vec<Tensor>> {
        let mut compiled = CompiledLoss::new(tree, cfg);
        probes
            .iter()
            .map(|p| Ok(compiled.value_and_grad(p)?.1.grad))
            .collect()
    }

    pub fn reward(&self, tree: &ExprTree) -> Result<f64> {
        let grads = Self::gradients(tree, &self.probes, &self.cfg)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (g, t) in grads.iter().zip(&self.target) {
            for (a, b) in g.data().iter().zip(t.data()) {
                total += (a - b).abs();
                count += 1;
            }
        }
        let dist = total / count as f64;
        Ok(if dist.is_finite() { 1.0 / (1.0 + dist) } else { 0.0 })
    }
}

impl Evaluator for ToyOracle {
    fn evaluate(&mut self, tree: &ExprTree, _kth_best: Option<f64>) -> Result<Evaluation> {
        Ok(Evaluation {
            reward: self.reward(tree)?,
            rejected: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub trials: usize,
    pub episodes: usize,
    /// Rollouts per expanded node.
    pub simulations: usize,
    pub exploration: f64,
    pub t_max: usize,
    /// Rollouts only pick rules that keep the expression completable.
    pub budget_aware_rollouts: bool,
    pub basic_check: bool,
    pub early_rejection: bool,
    pub monitor: MonitorConfig,
    pub probe_seed: u64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Stop starting new episodes after this many seconds.
    pub max_wall_secs: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trials: 1,
            episodes: 2000,
            simulations: 10,
            exploration: std::f64::consts::SQRT_2,
            t_max: DEFAULT_T_MAX,
            budget_aware_rollouts: true,
            basic_check: true,
            early_rejection: true,
            monitor: MonitorConfig::default(),
            probe_seed: DEFAULT_PROBE_SEED,
            loss: LossConfig::default(),
            seed: 0,
            max_wall_secs: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub episodes: usize,
    pub candidates: usize,
    pub dead_ends: usize,
    pub legality_rejections: usize,
    pub basic_rejections: usize,
    pub cache_hits: usize,
    /// Evaluator calls, duplicates included.
    pub evaluations: usize,
    pub early_rejections: usize,
    /// Distinct canonical forms that got an evaluator verdict.
    pub unique_evaluated: usize,
    pub max_reward: f64,
    pub elapsed_ms: u64,
}

/// Runs the search, adding every evaluated candidate to `archive`.
pub fn run_search<E: Evaluator>(cfg: &SearchConfig, evaluator: &mut E, archive: &mut Archive) -> Result<SearchStats> {
    if cfg.simulations == 0 || cfg.t_max == 0 || cfg.trials == 0 {
        return Err(Error::Config("trials, simulations and t_max must be positive".into()));
    }
    let mut pipeline = Pipeline::new(cfg, evaluator, archive);
    let deadline = cfg.max_wall_secs.map(Duration::from_secs_f64);
    'trials: for trial in 0..cfg.trials {
        let mut mcts = Mcts::new(cfg.t_max, cfg.exploration);
        for episode in 0..cfg.episodes {
            if deadline.is_some_and(|d| pipeline.start.elapsed() >= d) {
                break 'trials;
            }
            pipeline.set_position(trial, episode);
            pipeline.run_episode(&mut mcts)?;
            pipeline.stats.episodes += 1;
        }
    }
    Ok(pipeline.stats())
}

/// Checks, evaluates and archives complete candidates.
pub struct Pipeline<'a, E: Evaluator> {
    cfg: &'a SearchConfig,
    evaluator: &'a mut E,
    archive: &'a mut Archive,
    stats: SearchStats,
    evaluated: HashSet<String>,
    start: Instant,
    trial: usize,
    episode: usize,
}

impl<'a, E: Evaluator> Pipeline<'a, E> {
    pub fn new(cfg: &'a SearchConfig, evaluator: &'a mut E, archive: &'a mut Archive) -> Self {
        Self {
            cfg,
            evaluator,
            archive,
            stats: SearchStats::default(),
            evaluated: HashSet::new(),
            start: Instant::now(),
            trial: 0,
            episode: 0,
        }
    }

    /// Trial and episode stamped on new archive records.
    pub fn set_position(&mut self, trial: usize, episode: usize) {
        self.trial = trial;
        self.episode = episode;
    }

    pub fn stats(&self) -> SearchStats {
        SearchStats {
            max_reward: self.archive.max_reward(),
            elapsed_ms: self.start.elapsed().as_millis() as u64,
            ..self.stats.clone()
        }
    }

    pub fn archive(&self) -> &Archive {
        self.archive
    }

    /// Search reward of one complete expression.
    pub fn submit(&mut self, tree: &ExprTree) -> Result<f64> {
        self.score(tree)
    }
}

impl<E: Evaluator> Pipeline<'_, E> {
    fn rng(&self, stream: &str, index: u64) -> ChaCha8Rng {
        let key = [self.trial as u64, self.episode as u64, index];
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, stream, &key))
    }

    fn run_episode(&mut self, mcts: &mut Mcts) -> Result<f64> {
        let mut rng = self.rng("tree", 0);
        let mut node = 0;
        let mut path = Vec::new();
        // selection
        while !mcts.nodes[node].actions.is_empty() && mcts.nodes[node].fully_expanded() {
            let a = mcts.select_action(node, &mut rng).expect("node has actions");
            path.push((node, a));
            node = mcts.nodes[node].children[a].expect("fully expanded");
        }
        // expansion
        if !mcts.nodes[node].actions.is_empty() {
            let untried: Vec<usize> = (0..mcts.nodes[node].actions.len())
                .filter(|&a| mcts.nodes[node].children[a].is_none())
                .collect();
            let a = *untried.choose(&mut rng).expect("node is not fully expanded");
            let state = mcts.nodes[node].state.apply_action(mcts.nodes[node].actions[a])?;
            let child = mcts.nodes.len();
            mcts.nodes.push(MctsNode::new(state));
            mcts.nodes[node].children[a] = Some(child);
            path.push((node, a));
            node = child;
        }
        let state = mcts.nodes[node].state.clone();
        let reward = if state.is_terminal() {
            self.score(&state.tree()?)?
        } else {
            let mut best = 0.0f64;
            for b in 0..self.cfg.simulations {
                best = best.max(self.rollout(&state, b as u64)?);
            }
            best
        };
        mcts.backup(&path, node, reward);
        Ok(reward)
    }

    fn rollout(&mut self, from: &SearchState, index: u64) -> Result<f64> {
        let mut rng = self.rng("rollout", index);
        let mut state = from.clone();
        while !state.is_terminal() && state.t() < state.t_max() {
            state = if self.cfg.budget_aware_rollouts {
                let actions = state.available_actions()?;
                state.apply_action(*actions.choose(&mut rng).expect("budget filter leaves an action"))?
            } else {
                state.apply_unfiltered(*Rule::ALL.choose(&mut rng).expect("rules exist"))?
            };
        }
        if !state.is_terminal() {
            self.stats.dead_ends += 1;
            return Ok(0.0);
        }
        self.score(&state.tree()?)
    }

    fn record(&mut self, tree: &ExprTree, reward: f64, status: RecordStatus, fp: Option<crate::loss_expr::Fingerprint>) -> Result<()> {
        let rec = ArchiveRecord::new(
            tree,
            reward,
            status,
            self.episode,
            self.trial,
            self.start.elapsed().as_millis() as u64,
        );
        if self.cfg.basic_check || self.archive.lookup_canonical(&rec.canonical).is_none() {
            self.archive.insert(rec, fp)?;
        }
        Ok(())
    }

    fn score(&mut self, tree: &ExprTree) -> Result<f64> {
        self.stats.candidates += 1;
        if legality(tree) != CheckVerdict::Accept {
            self.stats.legality_rejections += 1;
            return Ok(0.0);
        }
        let mut fingerprint = None;
        if self.cfg.basic_check {
            let check = basic_check(tree, self.archive, self.cfg.probe_seed, &self.cfg.loss);
            fingerprint = check.fingerprint;
            match check.verdict {
                CheckVerdict::Accept => {}
                CheckVerdict::Reject(reason) => {
                    self.stats.basic_rejections += 1;
                    self.record(tree, 0.0, RecordStatus::Rejected(reason), fingerprint)?;
                    return Ok(0.0);
                }
                CheckVerdict::Cached { source, reward } => {
                    self.stats.cache_hits += 1;
                    if check.fingerprint.is_some() {
                        let from = self.archive.records()[source].canonical.clone();
                        self.record(tree, reward, RecordStatus::CachedFrom(from), None)?;
                    }
                    return Ok(reward);
                }
            }
        }
        let kth = if self.cfg.early_rejection && self.cfg.monitor.poor_performance {
            self.archive.kth_best(self.cfg.monitor.top_k)
        } else {
            None
        };
        self.stats.evaluations += 1;
        let eval = self.evaluator.evaluate(tree, kth)?;
        if self.evaluated.insert(canonical(tree)) {
            self.stats.unique_evaluated += 1;
        }
        match eval.rejected {
            None => {
                self.record(tree, eval.reward, RecordStatus::Finished, fingerprint)?;
                Ok(eval.reward)
            }
            Some(reason) => {
                if matches!(reason, RejectReason::NonMonotone | RejectReason::PoorPerformance) {
                    self.stats.early_rejections += 1;
                }
                self.record(tree, eval.reward, RecordStatus::Rejected(reason), fingerprint)?;
                Ok(0.0)
            }
        }
    }
}

/// Proxy evaluator config with the monitor switched by `early_rejection`.
pub fn proxy_evaluator(dataset: &Dataset, cfg: &SearchConfig, proxy: TrainConfig) -> Result<ProxyEvaluator> {
    let monitor = if cfg.early_rejection {
        cfg.monitor
    } else {
        MonitorConfig::disabled()
    };
    ProxyEvaluator::new(dataset, TrainConfig { loss: cfg.loss, ..proxy }, monitor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEntry {
    pub expr: String,
    pub canonical: String,
    pub proxy_reward: f64,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    /// Set when full training diverged.
    pub rejected: Option<RejectReason>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub top10: Vec<FinalEntry>,
    /// The finalist chosen on validation.
    pub best: FinalEntry,
    pub best_rank: usize,
}

/// Retrains the `top_k` best finished archive entries with `full`, picks
/// the one with the highest validation balanced accuracy, and only then
/// reports test metrics.
pub fn finalize(archive: &Archive, dataset: &Dataset, full: &TrainConfig, top_k: usize) -> Result<FinalReport> {
    let top = archive.top_finished(top_k);
    if top.is_empty() {
        return Err(Error::EmptyArchive);
    }
    let mut entries = Vec::with_capacity(top.len());
    let mut models = Vec::with_capacity(top.len());
    for &i in &top {
        let rec = &archive.records()[i];
        let out = train(dataset, &LossKind::Tree(rec.tree()?), full, None)?;
        let (val, rejected, model) = match out.status {
            TrainStatus::Completed => (Some(evaluate(&out.model, dataset, Split::Val)?), None, Some(out.model)),
            TrainStatus::Rejected { reason, .. } => (None, Some(reason), None),
        };
        entries.push(FinalEntry {
            expr: rec.expr.clone(),
            canonical: rec.canonical.clone(),
            proxy_reward: rec.reward,
            val,
            test: None,
            rejected,
        });
        models.push(model);
    }
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if let Some(v) = &e.val {
            if best.is_none_or(|b| v.balanced_accuracy > entries[b].val.as_ref().expect("set").balanced_accuracy) {
                best = Some(i);
            }
        }
    }
    let best = best.ok_or_else(|| Error::Config("every finalist diverged in full training".into()))?;
    for (e, m) in entries.iter_mut().zip(&models) {
        if let Some(m) = m {
            e.test = Some(evaluate(m, dataset, Split::Test)?);
        }
    }
    Ok(FinalReport {
        best: entries[best].clone(),
        best_rank: best,
        top10: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;

    #[test]
    fn uct_examples() {
        assert!((uct_score(0.7, 8, 2, 1.0) - 1.7197).abs() < 1e-4);
        assert_eq!(uct_score(0.0, 8, 0, 1.0), f64::INFINITY);
    }

    #[test]
    fn unvisited_actions_are_selected_first() {
        let mut mcts = Mcts::new(DEFAULT_T_MAX, 1.0);
        let n = mcts.nodes[0].actions.len();
        for a in 0..n {
            mcts.nodes[0].visits[a] = 5;
            mcts.nodes[0].q[a] = 1.0;
        }
        mcts.nodes[0].visits[3] = 0;
        mcts.nodes[0].q[3] = 0.0;
        mcts.nodes[0].total_visits = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mcts.select_action(0, &mut rng), Some(3));
    }

    #[test]
    fn toy_oracle_scores_the_target_as_one() {
        let target = parse(ToyOracle::DEFAULT_TARGET).unwrap();
        let oracle = ToyOracle::new(&target, DEFAULT_PROBE_SEED, LossConfig::default()).unwrap();
        assert_eq!(oracle.reward(&target).unwrap(), 1.0);
        let commuted = parse("square(add(neg(mul(y,inv(N))),yhat))").unwrap();
        assert_eq!(oracle.reward(&commuted).unwrap(), 1.0);
        assert!(oracle.reward(&parse("mul(yhat,mul(N,N))").unwrap()).unwrap() < 0.5);
    }

    fn toy_search(cfg: &SearchConfig) -> (Archive, SearchStats) {
        let target = parse(ToyOracle::DEFAULT_TARGET).unwrap();
        let mut oracle = ToyOracle::new(&target, cfg.probe_seed, cfg.loss).unwrap();
        let mut archive = Archive::new();
        let stats = run_search(cfg, &mut oracle, &mut archive).unwrap();
        (archive, stats)
    }

    #[test]
    fn search_is_deterministic() {
        let cfg = SearchConfig {
            episodes: 30,
            simulations: 4,
            seed: 3,
            ..SearchConfig::default()
        };
        let (a, sa) = toy_search(&cfg);
        let (b, sb) = toy_search(&cfg);
        let strip = |ar: &Archive| {
            ar.records()
                .iter()
                .map(|r| (r.expr.clone(), r.reward, r.status.clone(), r.episode))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(sa.candidates, sb.candidates);
        assert!(!a.is_empty());
    }

    #[test]
    fn duplicates_never_reach_the_evaluator_twice() {
        let cfg = SearchConfig {
            episodes: 60,
            simulations: 5,
            ..SearchConfig::default()
        };
        let (archive, stats) = toy_search(&cfg);
        assert_eq!(stats.evaluations, stats.unique_evaluated);
        let mut seen = HashSet::new();
        for r in archive.records() {
            assert!(seen.insert(r.canonical.clone()), "duplicate record {}", r.canonical);
        }
    }

    #[test]
    fn unfiltered_rollouts_can_dead_end() {
        let cfg = SearchConfig {
            episodes: 20,
            simulations: 5,
            t_max: 4,
            budget_aware_rollouts: false,
            ..SearchConfig::default()
        };
        let (_, stats) = toy_search(&cfg);
        assert!(stats.dead_ends > 0);
        let aware = SearchConfig {
            budget_aware_rollouts: true,
            ..cfg
        };
        assert_eq!(toy_search(&aware).1.dead_ends, 0);
    }

    #[test]
    fn tiny_budget_explores_the_root() {
        // with t_max 1 only terminals are complete expressions
        let cfg = SearchConfig {
            episodes: 5,
            simulations: 2,
            t_max: 1,
            ..SearchConfig::default()
        };
        let (archive, stats) = toy_search(&cfg);
        assert_eq!(stats.legality_rejections, stats.candidates);
        assert!(archive.is_empty());
    }
}
