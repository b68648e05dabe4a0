//! Automatic step-level annotation.
//!
//! A step is labeled by rolling the prefix that ends at it out to completion
//! `k` times with an oracle policy and counting how often the gold answer is
//! reached. For a trace with a wrong final answer the first failing prefix is
//! found by bisection over prefix lengths, so a trace of length `T` costs at
//! most `ceil(log2 T) + 1` prefix estimates. Several annotators (different
//! oracle policies and seeds) label the same traces, and only traces on which
//! all of them agree about the error location are kept.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{is_correct, StochasticPolicy};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{BudgetLedger, Problem, ReasoningTrace, StepLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HardLabelRule {
    /// A prefix is good if any rollout from it succeeds.
    AnySuccess,
    /// A prefix is good if the success fraction reaches `tau`.
    ThresholdTau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOracleConfig {
    pub rollout_policy: StochasticPolicy,
    /// Rollouts per prefix estimate.
    pub k: usize,
    pub tau: f64,
    pub hard_label_rule: HardLabelRule,
}

impl RolloutOracleConfig {
    pub fn new(rollout_policy: StochasticPolicy) -> Self {
        RolloutOracleConfig {
            rollout_policy,
            k: 16,
            tau: 0.5,
            hard_label_rule: HardLabelRule::AnySuccess,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rollout_policy.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau {} must lie in (0, 1)",
                self.tau
            )));
        }
        Ok(())
    }

    /// Hard label for a prefix with success fraction `estimate`.
    pub fn is_good(&self, estimate: f64) -> bool {
        match self.hard_label_rule {
            HardLabelRule::AnySuccess => estimate > 0.0,
            HardLabelRule::ThresholdTau => estimate >= self.tau,
        }
    }
}

/// A trace with one label per step up to and including its first error.
/// Steps after the first error carry no label and are left out of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrace {
    pub trace: ReasoningTrace,
    pub labels: Vec<StepLabel>,
    pub first_error_index: Option<usize>,
    pub annotator_id: String,
}

impl AnnotatedTrace {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.first_error_index {
            Some(j) if j < self.trace.len() => j + 1,
            Some(j) => {
                return Err(Error::InvalidTrace(format!(
                    "first_error_index {j} beyond trace of length {}",
                    self.trace.len()
                )))
            }
            None => self.trace.len(),
        };
        if self.labels.len() != expected {
            return Err(Error::InvalidTrace(format!(
                "{} labels, expected {expected}",
                self.labels.len()
            )));
        }
        for (i, label) in self.labels.iter().enumerate() {
            label.validate()?;
            if label.step_index != i {
                return Err(Error::InvalidTrace(format!(
                    "label {i} refers to step {}",
                    label.step_index
                )));
            }
            let should_be_good = self.first_error_index != Some(i);
            if label.hard_label != should_be_good {
                return Err(Error::InvalidTrace(format!(
                    "label {i} disagrees with first_error_index {:?}",
                    self.first_error_index
                )));
            }
        }
        Ok(())
    }
}

/// Success fraction of `rollouts` completions of `prefix`.
fn estimate(
    problem: &Problem,
    prefix: &ReasoningTrace,
    oracle: &RolloutOracleConfig,
    rollouts: usize,
    ledger: &BudgetLedger,
) -> Result<f64> {
    if prefix.is_complete() {
        return Ok(if is_correct(problem, prefix) {
            1.0
        } else {
            0.0
        });
    }
    let base = seed::split(oracle.rollout_policy.seed, prefix.prefix_hash(prefix.len()));
    let mut successes = 0usize;
    for i in 0..rollouts {
        let policy = oracle.rollout_policy.with_seed(seed::split(base, i as u64));
        let done = policy
            .complete(problem, prefix, Some(ledger))
            .map_err(|e| match e {
                Error::Budget(_) => Error::PartialEstimate {
                    completed: i,
                    requested: rollouts,
                },
                other => other,
            })?;
        successes += is_correct(problem, &done) as usize;
    }
    Ok(successes as f64 / rollouts as f64)
}

/// Monte-Carlo label for the last step of `prefix`.
pub fn mc_estimate_step(
    problem: &Problem,
    prefix: &ReasoningTrace,
    oracle: &RolloutOracleConfig,
    ledger: &BudgetLedger,
) -> Result<StepLabel> {
    oracle.validate()?;
    if prefix.is_empty() {
        return Err(Error::Contract(
            "prefix must contain at least one step".into(),
        ));
    }
    let mc = estimate(problem, prefix, oracle, oracle.k, ledger)?;
    Ok(StepLabel {
        trace_id: prefix.id(),
        step_index: prefix.len() - 1,
        hard_label: oracle.is_good(mc),
        mc_estimate: mc,
        rollout_count: oracle.k,
    })
}

/// Result of bisecting a wrong-answer trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub first_error_index: usize,
    /// Prefix estimates performed, including the sanity check.
    pub estimates: usize,
    /// Estimates made along the way, keyed by step index.
    pub probes: Vec<(usize, f64, usize)>,
}

/// Bisection for the first step whose prefix success fraction falls below
/// `oracle.tau`.
///
/// The complete trace is known bad (its answer is wrong) and the empty prefix
/// is assumed good, so the search runs over prefix lengths `1..=T`. When it
/// lands on step 0 the empty-prefix assumption is checked once with `2k`
/// rollouts; an oracle that cannot solve the problem from scratch cannot
/// localize anything.
pub fn locate_first_error(
    problem: &Problem,
    trace: &ReasoningTrace,
    oracle: &RolloutOracleConfig,
    ledger: &BudgetLedger,
) -> Result<Localization> {
    oracle.validate()?;
    if !trace.is_complete() {
        return Err(Error::Contract(format!(
            "trace {} is not complete",
            trace.id()
        )));
    }
    if is_correct(problem, trace) {
        return Err(Error::Contract(format!(
            "trace {} reaches the gold answer; nothing to localize",
            trace.id()
        )));
    }
    let mut probes = Vec::new();
    // Invariant: prefix of length `good` is good, prefix of length `bad` is bad.
    let (mut good, mut bad) = (0usize, trace.len());
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        let mc = estimate(problem, &trace.prefix(mid), oracle, oracle.k, ledger)?;
        probes.push((mid - 1, mc, oracle.k));
        if mc >= oracle.tau {
            good = mid;
        } else {
            bad = mid;
        }
    }
    let first_error_index = bad - 1;
    if first_error_index == 0 {
        let rollouts = 2 * oracle.k;
        let empty = trace.prefix(0);
        let mc = estimate(problem, &empty, oracle, rollouts, ledger)?;
        if mc < oracle.tau {
            return Err(Error::InconsistentOracle {
                trace_id: trace.id(),
                reason: format!("empty prefix estimated at {mc} over {rollouts} rollouts"),
            });
        }
        return Ok(Localization {
            first_error_index,
            estimates: probes.len() + 1,
            probes,
        });
    }
    Ok(Localization {
        first_error_index,
        estimates: probes.len(),
        probes,
    })
}

/// Labels every step of a complete trace (up to the first error).
///
/// Correct traces get all-good labels: the trace itself witnesses that every
/// prefix can reach the gold answer. Wrong traces are split at the located
/// first error. Every label carries a Monte-Carlo estimate of its prefix.
/// Nothing is returned unless the whole trace was annotated.
pub fn annotate_trace(
    problem: &Problem,
    trace: &ReasoningTrace,
    oracle: &RolloutOracleConfig,
    annotator_id: &str,
    ledger: &BudgetLedger,
) -> Result<AnnotatedTrace> {
    oracle.validate()?;
    if !trace.is_complete() {
        return Err(Error::Contract(format!(
            "trace {} is not complete",
            trace.id()
        )));
    }
    let (first_error_index, mut known) = if is_correct(problem, trace) {
        (None, HashMap::new())
    } else {
        let loc = locate_first_error(problem, trace, oracle, ledger)?;
        let known: HashMap<usize, (f64, usize)> =
            loc.probes.iter().map(|&(i, mc, n)| (i, (mc, n))).collect();
        (Some(loc.first_error_index), known)
    };
    let labeled = first_error_index.map_or(trace.len(), |j| j + 1);
    let trace_id = trace.id();
    let mut labels = Vec::with_capacity(labeled);
    for i in 0..labeled {
        let (mc, rollouts) = match known.remove(&i) {
            Some(hit) => hit,
            None => (
                estimate(problem, &trace.prefix(i + 1), oracle, oracle.k, ledger)?,
                oracle.k,
            ),
        };
        labels.push(StepLabel {
            trace_id: trace_id.clone(),
            step_index: i,
            hard_label: first_error_index != Some(i),
            mc_estimate: mc,
            rollout_count: rollouts,
        });
    }
    Ok(AnnotatedTrace {
        trace: trace.clone(),
        labels,
        first_error_index,
        annotator_id: annotator_id.to_string(),
    })
}

/// An ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotator {
    pub id: String,
    pub oracle: RolloutOracleConfig,
}

/// `m` annotators whose rollout policies cycle through `error_rates` and whose
/// seeds are split from `seed`.
pub fn ensemble(
    m: usize,
    error_rates: &[f64],
    base: &RolloutOracleConfig,
    seed: u64,
) -> Result<Vec<Annotator>> {
    if m == 0 || error_rates.is_empty() {
        return Err(Error::Config(
            "ensemble needs at least one member and one error rate".into(),
        ));
    }
    (0..m)
        .map(|i| {
            let eps = error_rates[i % error_rates.len()];
            let mut oracle = *base;
            oracle.rollout_policy.error_rate = eps;
            oracle.rollout_policy.recovery_rate = 0.0;
            oracle.rollout_policy.seed = seed::split(seed, i as u64);
            oracle.validate()?;
            Ok(Annotator {
                id: format!("annotator-{i}-eps{eps}"),
                oracle,
            })
        })
        .collect()
}

/// Annotates every trace with every annotator, in parallel over traces.
/// Returns one group (in annotator order) per trace, or the first error.
pub fn annotate_all(
    problems: &HashMap<String, Problem>,
    traces: &[ReasoningTrace],
    annotators: &[Annotator],
    ledger: &BudgetLedger,
) -> Vec<Result<Vec<AnnotatedTrace>>> {
    traces
        .par_iter()
        .map(|trace| {
            let problem = problems.get(&trace.problem_id).ok_or_else(|| {
                Error::Contract(format!("no problem with id {}", trace.problem_id))
            })?;
            annotators
                .iter()
                .map(|a| annotate_trace(problem, trace, &a.oracle, &a.id, ledger))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionStats {
    pub groups: usize,
    pub retained: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Consensus annotation of every retained trace.
    pub retained: Vec<AnnotatedTrace>,
    /// The full groups behind `retained`, in the same order.
    pub retained_groups: Vec<Vec<AnnotatedTrace>>,
    pub stats: RetentionStats,
}

/// Keeps a trace only when all `m` annotators report the same first-error
/// index (all `None` counts as agreement). With `window > 0`, indices within
/// `window` of each other also agree; the consensus is then the earliest.
pub fn ensemble_filter(
    groups: &[Vec<AnnotatedTrace>],
    m: usize,
    window: usize,
) -> Result<FilterOutcome> {
    let mut outcome = FilterOutcome {
        retained: Vec::new(),
        retained_groups: Vec::new(),
        stats: RetentionStats {
            groups: groups.len(),
            ..RetentionStats::default()
        },
    };
    for group in groups {
        if group.len() != m {
            return Err(Error::SchemaViolation(format!(
                "trace group has {} annotations, expected {m}",
                group.len()
            )));
        }
        let ids: BTreeSet<&str> = group.iter().map(|a| a.annotator_id.as_str()).collect();
        if ids.len() != m {
            return Err(Error::SchemaViolation(
                "duplicate annotator in group".into(),
            ));
        }
        let trace_id = group[0].trace.id();
        if group.iter().any(|a| a.trace.id() != trace_id) {
            return Err(Error::SchemaViolation(format!(
                "group for {trace_id} mixes different traces"
            )));
        }
        let indices: Vec<Option<usize>> = group.iter().map(|a| a.first_error_index).collect();
        let agree = if indices.iter().all(Option::is_none) {
            true
        } else if indices.iter().any(Option::is_none) {
            false
        } else {
            let lo = indices.iter().flatten().min().copied().unwrap_or(0);
            let hi = indices.iter().flatten().max().copied().unwrap_or(0);
            hi - lo <= window
        };
        if agree {
            let consensus = group
                .iter()
                .min_by_key(|a| a.first_error_index)
                .expect("group has m >= 1 members")
                .clone();
            outcome.retained.push(consensus);
            outcome.retained_groups.push(group.clone());
        }
    }
    outcome.stats.retained = outcome.retained.len();
    outcome.stats.dropped = outcome.stats.groups - outcome.stats.retained;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{first_error, generate_problems, HorizonRange};
    use crate::trace::{BudgetCaps, Domain};

    fn noiseless() -> RolloutOracleConfig {
        RolloutOracleConfig::new(StochasticPolicy::new(0.0, 0.0, 1).unwrap())
    }

    fn wrong_trace(problem: &Problem, seed: u64) -> ReasoningTrace {
        let policy = StochasticPolicy::new(0.3, 0.0, seed).unwrap();
        (0..)
            .map(|i| policy.stream(i).rollout(problem))
            .find(|t| !is_correct(problem, t))
            .unwrap()
    }

    #[test]
    fn corrupted_prefix_with_exact_oracle_estimates_zero() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let t = wrong_trace(p, 5);
        let j = first_error(p, &t).unwrap();
        let ledger = BudgetLedger::unlimited();
        let bad = mc_estimate_step(p, &t.prefix(j + 1), &noiseless(), &ledger).unwrap();
        assert_eq!(bad.mc_estimate, 0.0);
        assert!(!bad.hard_label);
        if j > 0 {
            let good = mc_estimate_step(p, &t.prefix(j), &noiseless(), &ledger).unwrap();
            assert_eq!(good.mc_estimate, 1.0);
            assert!(good.hard_label);
        }
    }

    #[test]
    fn empty_prefix_is_a_contract_violation() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let err = mc_estimate_step(
            p,
            &ReasoningTrace::empty(p, 0),
            &noiseless(),
            &BudgetLedger::unlimited(),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn budget_cap_reports_completed_rollouts() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let t = StochasticPolicy::new(0.0, 0.0, 2).unwrap().rollout(p);
        // Prefix of 2 leaves 4 steps per rollout; 10 units cover two rollouts.
        let ledger = BudgetLedger::new(BudgetCaps::generation(10));
        let err = mc_estimate_step(p, &t.prefix(2), &noiseless(), &ledger).unwrap_err();
        assert!(matches!(
            err,
            Error::PartialEstimate {
                completed: 2,
                requested: 16
            }
        ));
    }

    #[test]
    fn correct_trace_cannot_be_localized() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let t = StochasticPolicy::new(0.0, 0.0, 2).unwrap().rollout(p);
        let err = locate_first_error(p, &t, &noiseless(), &BudgetLedger::unlimited());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn unsolvable_oracle_is_reported() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let always_wrong = StochasticPolicy::new(1.0, 0.0, 3).unwrap();
        let t = (0..)
            .map(|i| always_wrong.stream(i).rollout(p))
            .find(|t| !is_correct(p, t))
            .unwrap();
        assert_eq!(first_error(p, &t), Some(0));
        let hopeless = RolloutOracleConfig::new(StochasticPolicy::new(1.0, 0.0, 1).unwrap());
        let err = locate_first_error(p, &t, &hopeless, &BudgetLedger::unlimited());
        assert!(matches!(err, Err(Error::InconsistentOracle { .. })));
    }

    #[test]
    fn correct_trace_labels_all_good() {
        let p = &generate_problems(Domain::CodeAssembly, 1, 3, HorizonRange::fixed(5)).unwrap()[0];
        let t = StochasticPolicy::new(0.0, 0.0, 2).unwrap().rollout(p);
        let a = annotate_trace(p, &t, &noiseless(), "a", &BudgetLedger::unlimited()).unwrap();
        assert_eq!(a.first_error_index, None);
        assert_eq!(a.labels.len(), 5);
        assert!(a
            .labels
            .iter()
            .all(|l| l.hard_label && l.mc_estimate == 1.0));
        a.validate().unwrap();
    }

    #[test]
    fn exhausted_budget_emits_nothing() {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(6)).unwrap()[0];
        let t = wrong_trace(p, 8);
        let ledger = BudgetLedger::new(BudgetCaps::generation(0));
        assert!(annotate_trace(p, &t, &noiseless(), "a", &ledger).is_err());
    }

    #[test]
    fn invalid_oracle_config_is_rejected() {
        let mut oracle = noiseless();
        oracle.tau = 1.0;
        assert!(oracle.validate().is_err());
        oracle.tau = 0.5;
        oracle.k = 0;
        assert!(oracle.validate().is_err());
    }

    fn annotated(trace_seed: u64, annotator: &str, index: Option<usize>) -> AnnotatedTrace {
        let p = &generate_problems(Domain::MathChain, 1, 3, HorizonRange::fixed(5)).unwrap()[0];
        let trace = StochasticPolicy::new(0.0, 0.0, trace_seed)
            .unwrap()
            .rollout(p);
        let n = index.map_or(trace.len(), |j| j + 1);
        AnnotatedTrace {
            labels: (0..n)
                .map(|i| StepLabel {
                    trace_id: trace.id(),
                    step_index: i,
                    hard_label: index != Some(i),
                    mc_estimate: 0.5,
                    rollout_count: 1,
                })
                .collect(),
            trace,
            first_error_index: index,
            annotator_id: annotator.into(),
        }
    }

    #[test]
    fn unanimous_groups_are_kept() {
        let group: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| annotated(1, id, Some(2)))
            .collect();
        let out = ensemble_filter(&[group], 3, 0).unwrap();
        assert_eq!(out.retained.len(), 1);
        assert_eq!(out.retained[0].first_error_index, Some(2));
    }

    #[test]
    fn disagreement_drops_the_trace() {
        let group = vec![
            annotated(1, "a", Some(2)),
            annotated(1, "b", Some(2)),
            annotated(1, "c", Some(3)),
        ];
        let out = ensemble_filter(&[group.clone()], 3, 0).unwrap();
        assert!(out.retained.is_empty());
        assert_eq!(out.stats.dropped, 1);
        // Window agreement keeps it, with the earliest index as consensus.
        let out = ensemble_filter(&[group], 3, 1).unwrap();
        assert_eq!(out.retained[0].first_error_index, Some(2));
    }

    #[test]
    fn none_and_some_disagree() {
        let group = vec![annotated(1, "a", None), annotated(1, "b", Some(4))];
        assert!(ensemble_filter(&[group], 2, 5).unwrap().retained.is_empty());
    }

    #[test]
    fn wrong_group_size_is_a_schema_error() {
        let group = vec![annotated(1, "a", None), annotated(1, "b", None)];
        assert!(matches!(
            ensemble_filter(&[group], 3, 0),
            Err(Error::SchemaViolation(_))
        ));
        let dup = vec![annotated(1, "a", None), annotated(1, "a", None)];
        assert!(ensemble_filter(&[dup], 2, 0).is_err());
    }
}
