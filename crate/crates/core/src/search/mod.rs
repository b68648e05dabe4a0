//! Reward-guided test-time search: Best-of-N, beam search, MCTS with UCT and
//! majority voting, all drawing from one [`BudgetLedger`] per problem.
//!
//! Every generated step costs one generation unit and every PRM forward pass
//! one PRM unit. Latency is modeled by [`LatencyModel`]: generation proceeds
//! in rounds of up to `batch_width` sequences in parallel, and each batched
//! PRM call costs a fixed amount. The model is what makes sequential
//! strategies (beam depth by depth, MCTS iteration by iteration) slower than
//! Best-of-N at the same generation budget.

mod beam;
mod bon;
mod matrix;
mod mcts;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{is_correct, Cursor, FeatureConfig, FeatureExtractor, StochasticPolicy};
use crate::error::{Error, Result};
use crate::prm::{aggregate, AggregationRule, Model, PrefixScorer};
use crate::scalar::Scalar;
use crate::seed;
use crate::trace::{BudgetCaps, BudgetLedger, LedgerSnapshot, Problem, ReasoningTrace, Step};

pub use beam::{beam_core, beam_search, BeamOutcome, BeamPath};
pub use bon::{argmax, best_of_n, majority_vote, vote};
pub use matrix::{read_matrix_csv, run_matrix, write_matrix_csv, MatrixConfig, MatrixRow};
pub use mcts::{mcts, mcts_core, uct, MctsOutcome, MctsTree, Rollout, TreeModel, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BestOfN,
    Beam,
    Mcts,
    MajorityVote,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Mcts,
        Strategy::Beam,
        Strategy::BestOfN,
        Strategy::MajorityVote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BestOfN => "best_of_n",
            Strategy::Beam => "beam",
            Strategy::Mcts => "mcts",
            Strategy::MajorityVote => "majority_vote",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "best_of_n" | "bestofn" | "bon" => Ok(Strategy::BestOfN),
            "beam" | "beam_search" => Ok(Strategy::Beam),
            "mcts" => Ok(Strategy::Mcts),
            "majority_vote" | "majority" | "majorityvote" | "maj" => Ok(Strategy::MajorityVote),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// How MCTS picks its answer once the search stops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalRule {
    /// Follow the most-visited child from the root.
    #[default]
    MostVisited,
    /// Follow the child with the highest mean value.
    HighestQ,
}

/// What MCTS backpropagates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Aggregate PRM score of the simulated completion.
    #[default]
    Prm,
    /// Whether the completion reaches the gold answer. Uses ground truth, so
    /// it is only for diagnostics.
    Correctness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub exploration: f64,
    pub iterations: usize,
    pub rollouts_per_expansion: usize,
    pub final_rule: FinalRule,
    pub value: ValueSource,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            exploration: std::f64::consts::SQRT_2,
            iterations: 64,
            rollouts_per_expansion: 1,
            final_rule: FinalRule::MostVisited,
            value: ValueSource::Prm,
        }
    }
}

/// Deterministic cost model for wall-clock accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    /// Time to generate one step for a batch of up to `batch_width` sequences.
    pub step_ns: u64,
    /// Time for one batched PRM call over up to `batch_width` prefixes.
    pub prm_call_ns: u64,
    pub batch_width: usize,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            step_ns: 20_000_000,
            prm_call_ns: 10_000_000,
            batch_width: 8,
        }
    }
}

impl LatencyModel {
    pub fn rounds(&self, sequences: usize) -> u64 {
        sequences.div_ceil(self.batch_width.max(1)) as u64
    }

    /// `steps` steps for each of `sequences` sequences.
    pub fn generation_ns(&self, sequences: usize, steps: usize) -> u64 {
        self.rounds(sequences) * steps as u64 * self.step_ns
    }

    /// Scoring the newest step of each of `sequences` prefixes.
    pub fn scoring_ns(&self, sequences: usize) -> u64 {
        self.rounds(sequences) * self.prm_call_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// Candidates for Best-of-N and majority voting.
    pub n: usize,
    pub beam_width: usize,
    /// Proposals per expanded node, for beam search and MCTS.
    pub max_children: usize,
    pub mcts: MctsConfig,
    pub aggregation: AggregationRule,
    pub seed: u64,
    pub caps: BudgetCaps,
    pub latency: LatencyModel,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: Strategy::BestOfN,
            n: 8,
            beam_width: 4,
            max_children: 3,
            mcts: MctsConfig::default(),
            aggregation: AggregationRule::default(),
            seed: 0,
            caps: BudgetCaps::unlimited(),
            latency: LatencyModel::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.beam_width == 0 || self.max_children == 0 {
            return Err(Error::Config(
                "n, beam_width and max_children must be >= 1".into(),
            ));
        }
        if !(self.mcts.exploration >= 0.0 && self.mcts.exploration.is_finite()) {
            return Err(Error::Config(format!(
                "exploration constant {} must be finite and >= 0",
                self.mcts.exploration
            )));
        }
        if self.mcts.iterations == 0 || self.mcts.rollouts_per_expansion == 0 {
            return Err(Error::Config(
                "mcts iterations and rollouts must be >= 1".into(),
            ));
        }
        if self.latency.batch_width == 0 {
            return Err(Error::Config("latency batch_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trace: ReasoningTrace,
    /// Aggregate PRM score; absent when no model was consulted.
    pub score: Option<f64>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub problem_id: String,
    pub strategy: Strategy,
    pub selected: Option<ReasoningTrace>,
    /// Position of `selected` in `candidates`.
    pub selected_index: Option<usize>,
    pub candidates: Vec<Candidate>,
    pub ledger: LedgerSnapshot,
    pub correct: bool,
    /// The budget ran out before the strategy finished.
    pub truncated: bool,
}

impl SearchRun {
    fn finish(
        problem: &Problem,
        strategy: Strategy,
        candidates: Vec<Candidate>,
        selected_index: Option<usize>,
        ledger: &BudgetLedger,
        truncated: bool,
    ) -> Self {
        let selected = selected_index.map(|i| candidates[i].trace.clone());
        SearchRun {
            problem_id: problem.id.clone(),
            strategy,
            correct: selected.as_ref().is_some_and(|t| is_correct(problem, t)),
            selected,
            selected_index,
            candidates,
            ledger: ledger.snapshot(),
            truncated,
        }
    }
}

/// Runs `config.strategy` on one problem.
pub fn run_search<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    model: &Model<S>,
    config: &SearchConfig,
) -> Result<SearchRun> {
    match config.strategy {
        Strategy::BestOfN => best_of_n(problem, policy, model, config),
        Strategy::Beam => beam_search(problem, policy, model, config),
        Strategy::Mcts => mcts(problem, policy, model, config),
        Strategy::MajorityVote => majority_vote(problem, policy, Some(model), config),
    }
}

/// The policy whose streams a search samples from for this problem. Keyed
/// by problem id so that results do not depend on scheduling.
pub fn problem_policy(
    policy: &StochasticPolicy,
    config: &SearchConfig,
    problem: &Problem,
) -> StochasticPolicy {
    policy.with_seed(seed::split(
        seed::split(policy.seed, config.seed),
        seed::hash_str(&problem.id),
    ))
}

/// Step source shared by all strategies. A step already generated from the
/// same stream at the same prefix is reused and not charged again.
struct Generator<'l> {
    policy: StochasticPolicy,
    memo: HashMap<(u64, u64), Step>,
    ledger: &'l BudgetLedger,
}

impl<'l> Generator<'l> {
    fn new(policy: StochasticPolicy, ledger: &'l BudgetLedger) -> Self {
        Generator {
            policy,
            memo: HashMap::new(),
            ledger,
        }
    }

    /// Whether `step` would be served from the memo, free of charge.
    fn cached(&self, stream: u64, cursor: &Cursor<'_>) -> bool {
        self.memo.contains_key(&(stream, cursor.prefix_hash()))
    }

    fn step(&mut self, stream: u64, cursor: &Cursor<'_>) -> Result<Step> {
        let key = (stream, cursor.prefix_hash());
        if let Some(step) = self.memo.get(&key) {
            return Ok(step.clone());
        }
        self.ledger.charge_generation(1)?;
        let step = self.policy.stream(stream).step_at(cursor);
        self.memo.insert(key, step.clone());
        Ok(step)
    }
}

/// A scored partial trace.
#[derive(Debug, Clone)]
struct Partial<'p> {
    trace: ReasoningTrace,
    features: FeatureExtractor<'p>,
    scores: Vec<f64>,
}

impl<'p> Partial<'p> {
    fn root(problem: &'p Problem, features: &FeatureConfig, generator_seed: u64) -> Result<Self> {
        Ok(Partial {
            trace: ReasoningTrace::empty(problem, generator_seed),
            features: FeatureExtractor::new(problem, features)?,
            scores: Vec::new(),
        })
    }

    fn cursor(&self) -> &Cursor<'p> {
        self.features.cursor()
    }

    fn is_complete(&self) -> bool {
        self.cursor().is_complete()
    }

    fn remaining(&self) -> usize {
        self.trace.horizon - self.trace.len()
    }

    /// Appends `step`, scoring it when a scorer is given.
    fn extend<S: Scalar>(
        &self,
        step: Step,
        scorer: Option<&mut PrefixScorer<'_, S>>,
        ledger: &BudgetLedger,
    ) -> Result<Self> {
        let mut next = self.clone();
        let features = next.features.push(&step);
        if let Some(scorer) = scorer {
            let p = scorer.score(next.cursor().prefix_hash(), &features, Some(ledger))?;
            next.scores.push(p);
        }
        next.trace.steps.push(step);
        if next.is_complete() {
            next.trace.final_answer = Some(next.cursor().state().answer());
        }
        Ok(next)
    }

    fn aggregate(&self, rule: AggregationRule) -> Option<f64> {
        aggregate(&self.scores, rule)
    }
}
