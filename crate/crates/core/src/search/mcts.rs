use crate::env::{is_correct, StochasticPolicy, FEATURE_DIM};
use crate::error::Result;
use crate::prm::{aggregate, AggregationRule, Model, PrefixScorer};
use crate::scalar::Scalar;
use crate::trace::{BudgetLedger, Problem};

use super::{
    problem_policy, Candidate, FinalRule, Generator, Partial, SearchConfig, SearchRun, Strategy,
    ValueSource,
};

/// `q + c * sqrt(ln(n_parent) / n_edge)`, or `+inf` for an unvisited edge.
pub fn uct(q: f64, n_parent: u64, n_edge: u64, c: f64) -> f64 {
    if n_edge == 0 {
        return f64::INFINITY;
    }
    if c == 0.0 {
        return q;
    }
    q + c * ((n_parent.max(1) as f64).ln() / n_edge as f64).sqrt()
}

/// A completion produced by simulation: the chain of states below the start
/// state (each with its step score), ending at a terminal state.
#[derive(Debug, Clone)]
pub struct Rollout<St> {
    pub chain: Vec<(St, f64)>,
    /// Values of further completions that are evaluated but not kept.
    pub extra_values: Vec<f64>,
}

/// The environment MCTS searches. `None` from `expand` or `simulate` means
/// the budget cannot cover the work and ends the search.
pub trait TreeModel {
    type State: Clone;

    fn is_terminal(&self, state: &Self::State) -> bool;
    /// Identity used to merge duplicate proposals under one parent.
    fn key(&self, state: &Self::State) -> u64;
    fn expand(&mut self, state: &Self::State) -> Result<Option<Vec<(Self::State, f64)>>>;
    fn simulate(&mut self, state: &Self::State) -> Result<Option<Rollout<Self::State>>>;
    /// Value of reaching `terminal` through steps scored `step_scores`.
    fn value(&mut self, terminal: &Self::State, step_scores: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct TreeNode<St> {
    pub state: St,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub visits: u64,
    pub value_sum: f64,
    /// Step score of the edge into this node.
    pub prior: f64,
    pub expanded: bool,
    pub terminal: bool,
}

impl<St> TreeNode<St> {
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

/// Arena of nodes; index 0 is the root.
///
/// Every iteration adds one visit to each node on a root-to-terminal path,
/// so an internal node's visit count equals the sum over its children and
/// the root's count equals the number of completed iterations. Terminal
/// nodes count how often they were reached.
#[derive(Debug, Clone)]
pub struct MctsTree<St> {
    pub nodes: Vec<TreeNode<St>>,
}

impl<St> MctsTree<St> {
    fn push(&mut self, state: St, parent: Option<usize>, prior: f64, terminal: bool) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            state,
            parent,
            children: Vec::new(),
            visits: 0,
            value_sum: 0.0,
            prior,
            expanded: false,
            terminal,
        });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    /// Step scores along the path from the root to `node`.
    pub fn path_scores(&self, mut node: usize) -> Vec<f64> {
        let mut out = Vec::new();
        while let Some(parent) = self.nodes[node].parent {
            out.push(self.nodes[node].prior);
            node = parent;
        }
        out.reverse();
        out
    }

    /// Checks the visit bookkeeping described on the type.
    pub fn visits_conserved(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.children.is_empty()
                || n.visits
                    == n.children
                        .iter()
                        .map(|&c| self.nodes[c].visits)
                        .sum::<u64>()
        })
    }

    fn pick(&self, node: usize, c: f64) -> usize {
        let n = &self.nodes[node];
        let unvisited = n
            .children
            .iter()
            .copied()
            .filter(|&ch| self.nodes[ch].visits == 0)
            .reduce(|a, b| {
                if self.nodes[b].prior > self.nodes[a].prior {
                    b
                } else {
                    a
                }
            });
        if let Some(ch) = unvisited {
            return ch;
        }
        let mut best = n.children[0];
        let mut best_u = f64::NEG_INFINITY;
        for &ch in &n.children {
            let child = &self.nodes[ch];
            let u = uct(child.q(), n.visits, child.visits, c);
            if u > best_u {
                best = ch;
                best_u = u;
            }
        }
        best
    }

    /// Walks from the root to a terminal following `rule`.
    fn extract(&self, rule: FinalRule) -> Option<usize> {
        if self.nodes[0].visits == 0 {
            return None;
        }
        let mut node = 0;
        while !self.nodes[node].terminal {
            let n = &self.nodes[node];
            let mut best: Option<usize> = None;
            for &ch in &n.children {
                let child = &self.nodes[ch];
                if child.visits == 0 {
                    continue;
                }
                let better = match best.map(|b| &self.nodes[b]) {
                    None => true,
                    Some(b) => match rule {
                        FinalRule::MostVisited => {
                            child.visits > b.visits
                                || (child.visits == b.visits && child.q() > b.q())
                        }
                        FinalRule::HighestQ => child.q() > b.q(),
                    },
                };
                if better {
                    best = Some(ch);
                }
            }
            node = best?;
        }
        Some(node)
    }
}

#[derive(Debug, Clone)]
pub struct MctsOutcome<St> {
    pub tree: MctsTree<St>,
    pub iterations: usize,
    pub truncated: bool,
    /// Terminal node holding the answer.
    pub selected: Option<usize>,
}

/// Select, expand, simulate, backpropagate, for up to `iterations` rounds.
///
/// Unvisited children are tried before any visited sibling, the one with the
/// highest step score first. A simulated completion is attached to the tree
/// as a chain of unexpanded nodes, so every leaf is a terminal state and
/// later iterations can branch off anywhere along an earlier completion.
pub fn mcts_core<M: TreeModel>(
    model: &mut M,
    root: M::State,
    exploration: f64,
    iterations: usize,
    final_rule: FinalRule,
) -> Result<MctsOutcome<M::State>> {
    let root_terminal = model.is_terminal(&root);
    let mut tree = MctsTree { nodes: Vec::new() };
    tree.push(root, None, 0.0, root_terminal);
    let mut done = 0;
    let mut truncated = false;

    'search: while done < iterations {
        let mut path = vec![0];
        let mut node = 0;
        let value = loop {
            if tree.nodes[node].terminal {
                let scores = tree.path_scores(node);
                break model.value(&tree.nodes[node].state, &scores);
            }
            if !tree.nodes[node].expanded {
                let Some(children) = model.expand(&tree.nodes[node].state)? else {
                    truncated = true;
                    break 'search;
                };
                for (state, prior) in children {
                    let key = model.key(&state);
                    let dup = tree.nodes[node]
                        .children
                        .iter()
                        .any(|&c| model.key(&tree.nodes[c].state) == key);
                    if !dup {
                        let terminal = model.is_terminal(&state);
                        tree.push(state, Some(node), prior, terminal);
                    }
                }
                tree.nodes[node].expanded = true;
                if tree.nodes[node].children.is_empty() {
                    truncated = true;
                    break 'search;
                }
            }
            let child = tree.pick(node, exploration);
            path.push(child);
            if tree.nodes[child].visits == 0 && !tree.nodes[child].terminal {
                let Some(rollout) = model.simulate(&tree.nodes[child].state)? else {
                    truncated = true;
                    break 'search;
                };
                let mut last = child;
                for (state, prior) in rollout.chain {
                    let terminal = model.is_terminal(&state);
                    last = tree.push(state, Some(last), prior, terminal);
                    path.push(last);
                }
                let scores = tree.path_scores(last);
                let head = model.value(&tree.nodes[last].state, &scores);
                let total: f64 = head + rollout.extra_values.iter().sum::<f64>();
                break total / (1 + rollout.extra_values.len()) as f64;
            }
            node = child;
        };
        for &n in &path {
            tree.nodes[n].visits += 1;
            tree.nodes[n].value_sum += value;
        }
        done += 1;
    }

    let selected = tree.extract(final_rule);
    Ok(MctsOutcome {
        tree,
        iterations: done,
        truncated,
        selected,
    })
}

struct ProblemTree<'p, 'l, 'm, S> {
    problem: &'p Problem,
    generator: Generator<'l>,
    scorer: PrefixScorer<'m, S>,
    ledger: &'l BudgetLedger,
    config: &'l SearchConfig,
}

impl<'p, S: Scalar> ProblemTree<'p, '_, '_, S> {
    fn complete(&mut self, start: &Partial<'p>, stream: u64) -> Result<Vec<Partial<'p>>> {
        let mut chain = Vec::new();
        let mut node = start.clone();
        while !node.is_complete() {
            let step = self.generator.step(stream, node.cursor())?;
            node = node.extend(step, Some(&mut self.scorer), self.ledger)?;
            chain.push(node.clone());
        }
        Ok(chain)
    }

    fn completion_value(&self, terminal: &Partial<'p>, rule: AggregationRule) -> f64 {
        match self.config.mcts.value {
            ValueSource::Prm => aggregate(&terminal.scores, rule).unwrap_or(0.0),
            ValueSource::Correctness => {
                f64::from(u8::from(is_correct(self.problem, &terminal.trace)))
            }
        }
    }
}

impl<'p, S: Scalar> TreeModel for ProblemTree<'p, '_, '_, S> {
    type State = Partial<'p>;

    fn is_terminal(&self, state: &Partial<'p>) -> bool {
        state.is_complete()
    }

    fn key(&self, state: &Partial<'p>) -> u64 {
        state.cursor().prefix_hash()
    }

    /// Proposes children from streams `0..max_children`. When the budget
    /// cannot cover all of them plus the simulation that follows, only the
    /// leading streams that fit are proposed. Memoized steps are free.
    fn expand(&mut self, state: &Partial<'p>) -> Result<Option<Vec<(Partial<'p>, f64)>>> {
        let c = self.config.max_children;
        let r = self.config.mcts.rollouts_per_expansion;
        let latency = self.config.latency;
        let sim = state.remaining().saturating_sub(1);
        let sim_ns = if sim > 0 {
            latency.generation_ns(r, sim) + latency.scoring_ns(r)
        } else {
            0
        };
        let expand_ns = |k: usize| latency.generation_ns(k, 1) + latency.scoring_ns(k);
        let mut take = 0;
        let mut fresh = 0;
        for stream in 0..c as u64 {
            let cost = usize::from(!self.generator.cached(stream, state.cursor()));
            if !self.ledger.fits(
                (fresh + cost + sim * r) as u64,
                expand_ns(take + 1) + sim_ns,
            ) {
                break;
            }
            fresh += cost;
            take += 1;
        }
        if take == 0 {
            return Ok(None);
        }
        self.ledger.charge_latency(expand_ns(take))?;
        let mut children = Vec::with_capacity(take);
        for stream in 0..take as u64 {
            let step = self.generator.step(stream, state.cursor())?;
            let child = state.extend(step, Some(&mut self.scorer), self.ledger)?;
            let prior = *child.scores.last().expect("scored child");
            children.push((child, prior));
        }
        Ok(Some(children))
    }

    fn simulate(&mut self, state: &Partial<'p>) -> Result<Option<Rollout<Partial<'p>>>> {
        let r = self.config.mcts.rollouts_per_expansion;
        let len = state.remaining();
        let latency = self.config.latency;
        let ns = latency.generation_ns(r, len) + latency.scoring_ns(r);
        if !self.ledger.fits((len * r) as u64, ns) {
            return Ok(None);
        }
        self.ledger.charge_latency(ns)?;
        let chain = self.complete(state, 0)?;
        let rule = self.config.aggregation;
        let mut extra_values = Vec::with_capacity(r - 1);
        for k in 1..r {
            let stream = (self.config.max_children + k) as u64;
            let extra = self.complete(state, stream)?;
            let end = extra.last().unwrap_or(state);
            extra_values.push(self.completion_value(end, rule));
        }
        Ok(Some(Rollout {
            chain: chain
                .into_iter()
                .map(|p| {
                    let prior = *p.scores.last().expect("scored step");
                    (p, prior)
                })
                .collect(),
            extra_values,
        }))
    }

    fn value(&mut self, terminal: &Partial<'p>, _step_scores: &[f64]) -> f64 {
        self.completion_value(terminal, self.config.aggregation)
    }
}

/// Monte Carlo tree search over step sequences, guided by PRM values.
pub fn mcts<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    model: &Model<S>,
    config: &SearchConfig,
) -> Result<SearchRun> {
    config.validate()?;
    model.check_schema(FEATURE_DIM)?;
    let ledger = BudgetLedger::new(config.caps);
    let base = problem_policy(policy, config, problem);
    let root = Partial::root(problem, &model.features, base.stream(0).seed)?;
    let mut env = ProblemTree {
        problem,
        generator: Generator::new(base, &ledger),
        scorer: PrefixScorer::new(model)?,
        ledger: &ledger,
        config,
    };
    let outcome = mcts_core(
        &mut env,
        root,
        config.mcts.exploration,
        config.mcts.iterations,
        config.mcts.final_rule,
    )?;

    let mut candidates = Vec::new();
    let mut selected = None;
    for (id, node) in outcome.tree.nodes.iter().enumerate() {
        if node.terminal && node.visits > 0 {
            if outcome.selected == Some(id) {
                selected = Some(candidates.len());
            }
            candidates.push(Candidate {
                correct: is_correct(problem, &node.state.trace),
                score: node.state.aggregate(config.aggregation),
                trace: node.state.trace.clone(),
            });
        }
    }
    Ok(SearchRun::finish(
        problem,
        Strategy::Mcts,
        candidates,
        selected,
        &ledger,
        outcome.truncated,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_problems, HorizonRange};
    use crate::trace::{BudgetCaps, Domain};

    /// Root with two actions; every completion under A is worth 0.9 and under
    /// B 0.1. States are (action, depth).
    struct Bandit {
        depth: usize,
    }

    impl TreeModel for Bandit {
        type State = (usize, usize);

        fn is_terminal(&self, s: &(usize, usize)) -> bool {
            s.1 >= self.depth
        }

        fn key(&self, s: &(usize, usize)) -> u64 {
            (s.0 * 100 + s.1) as u64
        }

        fn expand(&mut self, s: &(usize, usize)) -> Result<Option<Vec<((usize, usize), f64)>>> {
            Ok(Some(if s.1 == 0 {
                vec![((0, 1), 0.5), ((1, 1), 0.5)]
            } else {
                vec![((s.0, s.1 + 1), 0.5)]
            }))
        }

        fn simulate(&mut self, s: &(usize, usize)) -> Result<Option<Rollout<(usize, usize)>>> {
            let chain = (s.1 + 1..=self.depth).map(|d| ((s.0, d), 0.5)).collect();
            Ok(Some(Rollout {
                chain,
                extra_values: Vec::new(),
            }))
        }

        fn value(&mut self, s: &(usize, usize), _: &[f64]) -> f64 {
            if s.0 == 0 {
                0.9
            } else {
                0.1
            }
        }
    }

    #[test]
    fn uct_values() {
        assert_eq!(uct(0.37, 10, 3, 0.0), 0.37);
        let v = uct(0.5, 10, 2, 1.41);
        assert!((v - 2.012_906_048_5).abs() < 1e-9, "{v}");
        assert_eq!(uct(-5.0, 10, 0, 1.0), f64::INFINITY);
    }

    #[test]
    fn bandit_prefers_the_better_arm() {
        let out = mcts_core(
            &mut Bandit { depth: 3 },
            (9, 0),
            std::f64::consts::SQRT_2,
            100,
            FinalRule::MostVisited,
        )
        .unwrap();
        let root = &out.tree.nodes[0];
        let a = &out.tree.nodes[root.children[0]];
        let b = &out.tree.nodes[root.children[1]];
        assert!(a.visits > b.visits, "{} vs {}", a.visits, b.visits);
        assert_eq!(root.visits, 100);
        assert!(out.tree.visits_conserved());
        assert_eq!(out.tree.nodes[out.selected.unwrap()].state.0, 0);
    }

    #[test]
    fn greedy_search_locks_onto_the_best_arm() {
        let out = mcts_core(
            &mut Bandit { depth: 2 },
            (9, 0),
            0.0,
            50,
            FinalRule::MostVisited,
        )
        .unwrap();
        let root = &out.tree.nodes[0];
        let b = &out.tree.nodes[root.children[1]];
        assert_eq!(b.visits, 1);
    }

    #[test]
    fn root_visits_count_iterations() {
        for k in 1..20 {
            let out = mcts_core(
                &mut Bandit { depth: 4 },
                (9, 0),
                1.0,
                k,
                FinalRule::MostVisited,
            )
            .unwrap();
            assert_eq!(out.tree.nodes[0].visits, k as u64);
            assert_eq!(out.iterations, k);
            assert!(out.tree.visits_conserved());
        }
    }

    #[test]
    fn one_iteration_is_one_rollout() {
        let problems = generate_problems(Domain::MathChain, 3, 5, HorizonRange::default()).unwrap();
        let policy = StochasticPolicy::new(0.2, 0.1, 3).unwrap();
        let model: Model<f64> = Model::init(FEATURE_DIM, 16, 2);
        let mut config = SearchConfig::default();
        config.mcts.iterations = 1;
        for p in &problems {
            let run = mcts(p, &policy, &model, &config).unwrap();
            assert_eq!(run.candidates.len(), 1);
            assert_eq!(run.selected_index, Some(0));
            // One expansion at the root plus one completion below a child.
            assert_eq!(
                run.ledger.generation_units,
                (config.max_children + p.horizon() - 1) as u64
            );
        }
    }

    #[test]
    fn budget_stops_the_search() {
        // Long enough that 40 units cannot exhaust the tree.
        let problems = generate_problems(Domain::MathChain, 3, 5, HorizonRange::fixed(12)).unwrap();
        let policy = StochasticPolicy::new(0.2, 0.1, 3).unwrap();
        let model: Model<f64> = Model::init(FEATURE_DIM, 16, 2);
        let mut config = SearchConfig {
            caps: BudgetCaps::generation(40),
            ..SearchConfig::default()
        };
        config.mcts.iterations = 10_000;
        for p in &problems {
            let a = mcts(p, &policy, &model, &config).unwrap();
            let b = mcts(p, &policy, &model, &config).unwrap();
            assert!(a.truncated);
            assert!(a.ledger.generation_units <= 40);
            assert!(a.selected.is_some());
            assert_eq!(a.candidates, b.candidates);
        }
    }
}
