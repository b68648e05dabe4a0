//! Synthetic reasoning environments with exact verifiers, and the stochastic
//! step generators that play the role of a sampled language model.
//!
//! Two domains share one step/feature schema:
//!
//! * **MathChain**: fold a list of `(+|-|*, operand)` ops over a start value.
//!   Each step asserts the running value after one op.
//! * **CodeAssembly**: emit a target program token by token.
//!
//! A trace carries what its steps *asserted*, so one wrong step corrupts the
//! running state and later, locally consistent steps build on the wrong
//! value. Only a correction step (recompute from the true state) restores it.

mod code;
mod features;
mod math;

use std::ops::RangeInclusive;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, StableHasher};
use crate::trace::{
    hash_content, Answer, BudgetLedger, Domain, Problem, ProblemSpec, ReasoningTrace, Step,
    StepContent,
};

pub use code::{canonical as canonical_program, CodeAssemblySpec, Token, ALPHABET};
pub(crate) use features::FeatureExtractor;
pub use features::{
    extract_features, trace_features, FeatureConfig, StepFeatures, FEATURE_DIM, SCHEMA_VERSION,
};
pub use math::{canonical as canonical_value, MathChainSpec, MathOp, Operator, VALUE_BOUND};

pub const MIN_HORIZON: usize = 3;
pub const MAX_HORIZON: usize = 20;

/// Number of wrong tokens listed per program position.
pub const DISTRACTORS_PER_POSITION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonRange {
    pub min: usize,
    pub max: usize,
}

impl HorizonRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        let range = HorizonRange { min, max };
        range.validate()?;
        Ok(range)
    }

    pub fn fixed(t: usize) -> Self {
        HorizonRange { min: t, max: t }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min > self.max || self.min < MIN_HORIZON || self.max > MAX_HORIZON {
            return Err(Error::Config(format!(
                "horizon range [{}, {}] must lie within [{MIN_HORIZON}, {MAX_HORIZON}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn as_range(&self) -> RangeInclusive<usize> {
        self.min..=self.max
    }
}

impl Default for HorizonRange {
    fn default() -> Self {
        HorizonRange { min: 4, max: 8 }
    }
}

/// Generates `count` problems. Problem `i` depends only on `(seed, i)`.
pub fn generate_problems(
    domain: Domain,
    count: usize,
    seed: u64,
    horizon: HorizonRange,
) -> Result<Vec<Problem>> {
    if count == 0 {
        return Err(Error::Config("problem count must be at least 1".into()));
    }
    horizon.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(seed::split(seed, i as u64));
            let t = rng.random_range(horizon.as_range());
            let spec = match domain {
                Domain::MathChain => ProblemSpec::MathChain(random_chain(&mut rng, t)),
                Domain::CodeAssembly => ProblemSpec::CodeAssembly(random_program(&mut rng, t)),
            };
            let gold_answer = match &spec {
                ProblemSpec::MathChain(s) => s.solve(),
                ProblemSpec::CodeAssembly(s) => s.solve(),
            };
            let short = match domain {
                Domain::MathChain => "math",
                Domain::CodeAssembly => "code",
            };
            let problem = Problem {
                id: format!("{short}-{seed}-{i:05}"),
                domain,
                spec,
                gold_answer,
            };
            problem.validate()?;
            Ok(problem)
        })
        .collect()
}

fn random_chain(rng: &mut seed::Rng, t: usize) -> MathChainSpec {
    let start_value = rng.random_range(1..=50);
    let mut value: i64 = start_value;
    let mut ops = Vec::with_capacity(t);
    for _ in 0..t {
        let op = match rng.random_range(0..3) {
            0 => MathOp::new(Operator::Add, rng.random_range(1..=9)),
            1 => MathOp::new(Operator::Sub, rng.random_range(1..=9)),
            _ => {
                let m = rng.random_range(2..=3);
                if (value.saturating_mul(m)).abs() <= 1_000_000 {
                    MathOp::new(Operator::Mul, m)
                } else {
                    MathOp::new(Operator::Add, rng.random_range(1..=9))
                }
            }
        };
        value = op.apply(value);
        ops.push(op);
    }
    MathChainSpec { start_value, ops }
}

fn random_program(rng: &mut seed::Rng, t: usize) -> CodeAssemblySpec {
    let n = ALPHABET.len() as u8;
    let target_program: Vec<Token> = (0..t).map(|_| Token(rng.random_range(0..n))).collect();
    // Plausible wrong tokens are alphabet neighbours of the target, ordered by
    // distance.
    let distractor_set = target_program
        .iter()
        .map(|target| {
            let mut offsets: Vec<i16> = vec![1, -1, 2, -2, 3, -3];
            // Shuffle within distance tiers so the most plausible distractor
            // is not always the successor.
            for tier in offsets.chunks_mut(2) {
                if rng.random_bool(0.5) {
                    tier.swap(0, 1);
                }
            }
            offsets
                .into_iter()
                .take(DISTRACTORS_PER_POSITION)
                .map(|d| Token(((target.0 as i16 + d).rem_euclid(n as i16)) as u8))
                .collect()
        })
        .collect();
    CodeAssemblySpec {
        target_program,
        distractor_set,
    }
}

/// Replayed state after a prefix: what the trace believes (`running`) and
/// whether that still agrees with the gold path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrefixState {
    Math {
        position: usize,
        running: i64,
        truth: i64,
    },
    Code {
        position: usize,
        running: Vec<Token>,
        on_track: bool,
    },
}

impl PrefixState {
    pub fn initial(problem: &Problem) -> Self {
        match &problem.spec {
            ProblemSpec::MathChain(s) => PrefixState::Math {
                position: 0,
                running: s.start_value,
                truth: s.start_value,
            },
            ProblemSpec::CodeAssembly(_) => PrefixState::Code {
                position: 0,
                running: Vec::new(),
                on_track: true,
            },
        }
    }

    pub fn position(&self) -> usize {
        match self {
            PrefixState::Math { position, .. } | PrefixState::Code { position, .. } => *position,
        }
    }

    pub fn is_corrupted(&self) -> bool {
        match self {
            PrefixState::Math { running, truth, .. } => running != truth,
            PrefixState::Code { on_track, .. } => !on_track,
        }
    }

    pub fn answer(&self) -> Answer {
        match self {
            PrefixState::Math { running, .. } => canonical_value(*running),
            PrefixState::Code { running, .. } => canonical_program(running),
        }
    }
}

/// Exact correctness of `step` given the replayed state before it.
///
/// A normal step is correct when it continues the running state faithfully;
/// a correction step is correct when it recomputes from the true state.
pub fn verify_step(problem: &Problem, state: &PrefixState, step: &Step) -> bool {
    match (&problem.spec, state, &step.content) {
        (
            ProblemSpec::MathChain(spec),
            PrefixState::Math {
                position,
                running,
                truth,
            },
            StepContent::Math { value, correction },
        ) => match spec.ops.get(*position) {
            Some(op) => {
                let source = if *correction { *truth } else { *running };
                *value == op.apply(source)
            }
            None => false,
        },
        (
            ProblemSpec::CodeAssembly(spec),
            PrefixState::Code { position, .. },
            StepContent::Code { token, .. },
        ) => spec.target_program.get(*position) == Some(token),
        _ => false,
    }
}

/// State after appending `step`.
pub fn advance(problem: &Problem, state: &PrefixState, step: &Step) -> PrefixState {
    match (&problem.spec, state, &step.content) {
        (
            ProblemSpec::MathChain(spec),
            PrefixState::Math {
                position, truth, ..
            },
            StepContent::Math { value, .. },
        ) => PrefixState::Math {
            position: position + 1,
            running: *value,
            truth: spec
                .ops
                .get(*position)
                .map_or(*truth, |op| op.apply(*truth)),
        },
        (
            ProblemSpec::CodeAssembly(spec),
            PrefixState::Code {
                position,
                running,
                on_track,
            },
            StepContent::Code { token, correction },
        ) => {
            let mut program = running.clone();
            let on_track = if *correction && spec.target_program.get(*position) == Some(token) {
                // A correction re-emits the program up to here from the target.
                program.clear();
                program.extend_from_slice(&spec.target_program[..*position]);
                true
            } else {
                *on_track && spec.target_program.get(*position) == Some(token)
            };
            program.push(*token);
            PrefixState::Code {
                position: position + 1,
                running: program,
                on_track,
            }
        }
        _ => state.clone(),
    }
}

/// Incremental replay of a trace: state plus the content hash that keys every
/// random draw made at this prefix.
#[derive(Debug, Clone)]
pub struct Cursor<'p> {
    problem: &'p Problem,
    state: PrefixState,
    hasher: StableHasher,
}

impl<'p> Cursor<'p> {
    pub fn new(problem: &'p Problem) -> Self {
        let mut hasher = StableHasher::new();
        hasher.str(&problem.id);
        Cursor {
            problem,
            state: PrefixState::initial(problem),
            hasher,
        }
    }

    pub fn replay(problem: &'p Problem, trace: &ReasoningTrace) -> Result<Self> {
        if trace.problem_id != problem.id {
            return Err(Error::Contract(format!(
                "trace for {} replayed against problem {}",
                trace.problem_id, problem.id
            )));
        }
        let mut cursor = Cursor::new(problem);
        for step in &trace.steps {
            cursor.push(step);
        }
        Ok(cursor)
    }

    pub fn problem(&self) -> &'p Problem {
        self.problem
    }

    pub fn state(&self) -> &PrefixState {
        &self.state
    }

    pub fn position(&self) -> usize {
        self.state.position()
    }

    pub fn is_complete(&self) -> bool {
        self.position() >= self.problem.horizon()
    }

    /// Equals `ReasoningTrace::prefix_hash` of the replayed prefix.
    pub fn prefix_hash(&self) -> u64 {
        self.hasher.finish()
    }

    pub fn push(&mut self, step: &Step) {
        hash_content(&mut self.hasher, &step.content);
        self.state = advance(self.problem, &self.state, step);
    }
}

/// A sampled step generator with a per-step error rate and a recovery rate.
///
/// Every draw is keyed by `(seed, prefix content)`: the same policy asked for
/// a step at the same prefix always answers the same way, and distinct
/// samples come from distinct seeds (see [`StochasticPolicy::with_seed`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    /// Probability that a step is wrong.
    pub error_rate: f64,
    /// Probability that a step taken from a corrupted state is a correction.
    pub recovery_rate: f64,
    /// Temperature over distractors; larger spreads errors across more
    /// distinct wrong values.
    pub spread: f64,
    pub seed: u64,
}

impl StochasticPolicy {
    pub fn new(error_rate: f64, recovery_rate: f64, seed: u64) -> Result<Self> {
        let policy = StochasticPolicy {
            error_rate,
            recovery_rate,
            spread: 1.0,
            seed,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {p} is not a probability")))
            }
        };
        prob("error_rate", self.error_rate)?;
        prob("recovery_rate", self.recovery_rate)?;
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!(
                "spread {} must be positive",
                self.spread
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        StochasticPolicy { seed, ..*self }
    }

    /// The `i`-th independent sample stream derived from this policy's seed.
    pub fn stream(&self, i: u64) -> Self {
        self.with_seed(seed::split(self.seed, i))
    }

    pub fn step(&self, problem: &Problem, prefix: &ReasoningTrace) -> Result<Step> {
        let cursor = Cursor::replay(problem, prefix)?;
        if cursor.is_complete() {
            return Err(Error::Contract(format!(
                "trace {} is already complete",
                prefix.id()
            )));
        }
        Ok(self.step_at(&cursor))
    }

    pub(crate) fn step_at(&self, cursor: &Cursor<'_>) -> Step {
        let mut rng = seed::rng(seed::split(self.seed, cursor.prefix_hash()));
        let recover = rng.random::<f64>() < self.recovery_rate;
        let err = rng.random::<f64>() < self.error_rate;
        let pick = rng.random::<f64>();
        let sign = rng.random_bool(0.5);
        let problem = cursor.problem();
        let index = cursor.position();
        let corrupted = cursor.state().is_corrupted();
        let content = match (&problem.spec, cursor.state()) {
            (ProblemSpec::MathChain(spec), PrefixState::Math { running, truth, .. }) => {
                let op = spec.ops[index];
                if corrupted && recover {
                    StepContent::Math {
                        value: op.apply(*truth),
                        correction: true,
                    }
                } else if err {
                    let delta = tempered_index(pick, 5, self.spread) as i64 + 1;
                    let correct = op.apply(*running);
                    StepContent::Math {
                        value: if sign {
                            correct + delta
                        } else {
                            correct - delta
                        },
                        correction: false,
                    }
                } else {
                    StepContent::Math {
                        value: op.apply(*running),
                        correction: false,
                    }
                }
            }
            (ProblemSpec::CodeAssembly(spec), PrefixState::Code { .. }) => {
                let target = spec.target_program[index];
                if corrupted && recover {
                    StepContent::Code {
                        token: target,
                        correction: true,
                    }
                } else if err {
                    let options = &spec.distractor_set[index];
                    StepContent::Code {
                        token: options[tempered_index(pick, options.len(), self.spread)],
                        correction: false,
                    }
                } else {
                    StepContent::Code {
                        token: target,
                        correction: false,
                    }
                }
            }
            _ => unreachable!("cursor state always matches its problem's domain"),
        };
        Step {
            index,
            rendered: render(problem, cursor.state(), &content),
            content,
        }
    }

    /// Extends `prefix` to a complete trace, charging one generation unit per
    /// generated step when a ledger is given.
    pub fn complete(
        &self,
        problem: &Problem,
        prefix: &ReasoningTrace,
        ledger: Option<&BudgetLedger>,
    ) -> Result<ReasoningTrace> {
        let mut cursor = Cursor::replay(problem, prefix)?;
        let mut trace = prefix.clone();
        trace.generator_seed = self.seed;
        while !cursor.is_complete() {
            if let Some(ledger) = ledger {
                ledger.charge_generation(1)?;
            }
            let step = self.step_at(&cursor);
            cursor.push(&step);
            trace.steps.push(step);
        }
        trace.final_answer = Some(cursor.state().answer());
        Ok(trace)
    }

    pub fn rollout(&self, problem: &Problem) -> ReasoningTrace {
        self.complete(problem, &ReasoningTrace::empty(problem, self.seed), None)
            .expect("unbudgeted rollout from an empty prefix cannot fail")
    }
}

/// Free-function form of [`StochasticPolicy::step`].
pub fn policy_step(
    policy: &StochasticPolicy,
    problem: &Problem,
    prefix: &ReasoningTrace,
) -> Result<Step> {
    policy.step(problem, prefix)
}

/// Samples an index in `0..n` with weight `exp(-i / spread)`.
fn tempered_index(u: f64, n: usize, spread: f64) -> usize {
    let weights: Vec<f64> = (0..n).map(|i| (-(i as f64) / spread).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    n - 1
}

fn render(problem: &Problem, state: &PrefixState, content: &StepContent) -> String {
    match (&problem.spec, state, content) {
        (
            ProblemSpec::MathChain(spec),
            PrefixState::Math {
                position,
                running,
                truth,
            },
            StepContent::Math { value, correction },
        ) => {
            let op = spec.ops[*position];
            if *correction {
                format!(
                    "recheck: {truth} {} {} = {value}",
                    op.operator.symbol(),
                    op.operand
                )
            } else {
                format!(
                    "{running} {} {} = {value}",
                    op.operator.symbol(),
                    op.operand
                )
            }
        }
        (_, _, StepContent::Code { token, correction }) => {
            if *correction {
                format!("rewrite program, emit {token}")
            } else {
                format!("emit {token}")
            }
        }
        _ => String::new(),
    }
}

/// Whether a complete trace reaches the problem's gold answer.
pub fn is_correct(problem: &Problem, trace: &ReasoningTrace) -> bool {
    trace.final_answer.as_ref() == Some(&problem.gold_answer)
}

/// Index of the first verifier-incorrect step, if any.
pub fn first_error(problem: &Problem, trace: &ReasoningTrace) -> Option<usize> {
    let mut state = PrefixState::initial(problem);
    for (i, step) in trace.steps.iter().enumerate() {
        if !verify_step(problem, &state, step) {
            return Some(i);
        }
        state = advance(problem, &state, step);
    }
    None
}
