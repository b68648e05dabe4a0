use std::collections::HashMap;

use rayon::prelude::*;

use crate::annotate::{
    annotate_all, ensemble, ensemble_filter, AnnotatedTrace, FilterOutcome, RolloutOracleConfig,
};
use crate::env::{trace_features, FeatureConfig, StepFeatures, StochasticPolicy};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{BudgetLedger, LabeledTrace, Problem, ReasoningTrace};

use super::config::AnnotationConfig;

/// `per_problem` sampled traces for every problem, trace `i` of a problem
/// drawn from its own stream. Problem order, then sample order.
pub fn sample_traces(
    problems: &[Problem],
    policy: &StochasticPolicy,
    per_problem: usize,
) -> Vec<ReasoningTrace> {
    problems
        .par_iter()
        .flat_map_iter(|p| {
            let base = policy.with_seed(seed::split(policy.seed, seed::hash_str(&p.id)));
            (0..per_problem).map(move |i| base.stream(i as u64).rollout(p))
        })
        .collect()
}

pub fn problem_index(problems: &[Problem]) -> HashMap<String, Problem> {
    problems.iter().map(|p| (p.id.clone(), p.clone())).collect()
}

/// Every annotator's labels for the traces that all of them could annotate.
#[derive(Debug, Clone)]
pub struct Annotations {
    /// One group per trace, in annotator order.
    pub groups: Vec<Vec<AnnotatedTrace>>,
    /// Traces dropped because an annotator's rollouts contradicted the trace.
    pub inconsistent: usize,
    pub rollouts: u64,
}

/// Runs the annotator ensemble over `traces`.
pub fn annotate_corpus(
    problems: &HashMap<String, Problem>,
    traces: &[ReasoningTrace],
    rollout_policy: StochasticPolicy,
    config: &AnnotationConfig,
    seed: u64,
) -> Result<Annotations> {
    let base = RolloutOracleConfig {
        rollout_policy,
        k: config.k,
        tau: config.tau,
        hard_label_rule: config.hard_label_rule,
    };
    let annotators = ensemble(config.ensemble, &config.annotator_error_rates, &base, seed)?;
    let ledger = BudgetLedger::unlimited();
    let mut out = Annotations {
        groups: Vec::with_capacity(traces.len()),
        inconsistent: 0,
        rollouts: 0,
    };
    for result in annotate_all(problems, traces, &annotators, &ledger) {
        match result {
            Ok(group) => out.groups.push(group),
            Err(Error::InconsistentOracle { .. }) => out.inconsistent += 1,
            Err(e) => return Err(e),
        }
    }
    out.rollouts = ledger.generation_units();
    Ok(out)
}

impl Annotations {
    /// Unanimous traces, with the consensus labels.
    pub fn filtered(&self, config: &AnnotationConfig) -> Result<FilterOutcome> {
        ensemble_filter(&self.groups, config.ensemble, config.window)
    }

    /// Every trace as labeled by annotator `member` alone, without filtering.
    pub fn single(&self, member: usize) -> Vec<AnnotatedTrace> {
        self.groups
            .iter()
            .filter_map(|g| g.get(member).cloned())
            .collect()
    }
}

pub fn attach_problems(
    problems: &HashMap<String, Problem>,
    annotated: &[AnnotatedTrace],
) -> Result<Vec<LabeledTrace>> {
    annotated
        .iter()
        .map(|a| {
            let problem = problems.get(&a.trace.problem_id).ok_or_else(|| {
                Error::Contract(format!("no problem with id {}", a.trace.problem_id))
            })?;
            Ok(LabeledTrace {
                problem: problem.clone(),
                annotation: a.clone(),
            })
        })
        .collect()
}

/// Step examples from labeled traces, in trace order. With a `budget`, the
/// list is cut to exactly that many labels; asking for more than exist is an
/// error, so that comparisons at a matched budget really are matched.
pub fn step_dataset(
    labeled: &[LabeledTrace],
    features: &FeatureConfig,
    budget: Option<usize>,
) -> Result<Vec<(StepFeatures, bool)>> {
    let per_trace: Vec<Vec<(StepFeatures, bool)>> = labeled
        .par_iter()
        .map(|l| {
            let a = &l.annotation;
            a.validate()?;
            let f = trace_features(&l.problem, &a.trace, features)?;
            Ok(f.into_iter()
                .zip(&a.labels)
                .map(|(x, y)| (x, y.hard_label))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<(StepFeatures, bool)> = per_trace.into_iter().flatten().collect();
    if let Some(b) = budget {
        if out.len() < b {
            return Err(Error::DegenerateDataset(format!(
                "{} labels available, {b} requested",
                out.len()
            )));
        }
        out.truncate(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_problems, HorizonRange};
    use crate::trace::Domain;

    fn setup() -> (Vec<Problem>, StochasticPolicy) {
        let problems =
            generate_problems(Domain::MathChain, 12, 5, HorizonRange::default()).unwrap();
        (problems, StochasticPolicy::new(0.2, 0.1, 9).unwrap())
    }

    #[test]
    fn sampling_is_keyed_by_problem() {
        let (problems, policy) = setup();
        let all = sample_traces(&problems, &policy, 3);
        assert_eq!(all.len(), 36);
        let tail = sample_traces(&problems[4..], &policy, 3);
        assert_eq!(&all[12..], &tail[..]);
        assert!(all.iter().all(|t| t.is_complete()));
    }

    #[test]
    fn labels_and_budget() {
        let (problems, policy) = setup();
        let traces = sample_traces(&problems, &policy, 2);
        let index = problem_index(&problems);
        let config = AnnotationConfig::default();
        let ann = annotate_corpus(&index, &traces, policy, &config, 1).unwrap();
        assert_eq!(ann.groups.len() + ann.inconsistent, traces.len());
        let filtered = ann.filtered(&config).unwrap();
        assert!(filtered.stats.retained <= ann.groups.len());
        let labeled = attach_problems(&index, &ann.single(0)).unwrap();
        let full = step_dataset(&labeled, &FeatureConfig::default(), None).unwrap();
        let total: usize = labeled.iter().map(|l| l.annotation.labels.len()).sum();
        assert_eq!(full.len(), total);
        let cut = step_dataset(&labeled, &FeatureConfig::default(), Some(7)).unwrap();
        assert_eq!(&cut[..], &full[..7]);
        assert!(step_dataset(&labeled, &FeatureConfig::default(), Some(total + 1)).is_err());
    }
}
