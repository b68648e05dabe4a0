use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::StochasticPolicy;
use crate::error::{Error, Result};
use crate::prm::{score_trace, AggregationRule, Model};
use crate::scalar::Scalar;
use crate::search::{argmax, best_of_n, vote, SearchConfig, SearchRun, Strategy};
use crate::trace::{BudgetCaps, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PrmAtN,
    MajAtN,
    PassAtN,
    Pass1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::PrmAtN => "prm",
            Metric::MajAtN => "maj",
            Metric::PassAtN => "pass",
            Metric::Pass1 => "pass1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub n: usize,
    pub accuracy: f64,
    pub se: f64,
    pub n_problems: usize,
    pub strategy: Strategy,
    pub aggregation: AggregationRule,
}

/// Binomial standard error of an accuracy over `n` problems.
pub fn standard_error(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// prm@N, maj@N and pass@N for every requested N, plus pass@1.
///
/// Each run holds one problem's candidate list; the first N candidates are
/// the N-candidate set, so sets are nested across N. prm@N picks the
/// highest-scored candidate (lowest index on ties), maj@N the modal answer
/// (ties broken by mean score).
pub fn compute_metrics(
    runs: &[SearchRun],
    ns: &[usize],
    aggregation: AggregationRule,
) -> Result<Vec<MetricRow>> {
    let mut ns: Vec<usize> = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.first() == Some(&0) {
        return Err(Error::Config("N must be at least 1".into()));
    }
    let max_n = ns.last().copied().unwrap_or(1).max(1);
    for run in runs {
        if run.candidates.len() < max_n {
            return Err(Error::Metrics {
                problem_id: run.problem_id.clone(),
                message: format!("{} candidates, {max_n} needed", run.candidates.len()),
            });
        }
        if run.candidates[..max_n].iter().any(|c| c.score.is_none()) {
            return Err(Error::Metrics {
                problem_id: run.problem_id.clone(),
                message: "candidate without a score".into(),
            });
        }
    }
    let count = runs.len();
    let row = |metric, n, hits: usize| {
        let accuracy = if count == 0 {
            0.0
        } else {
            hits as f64 / count as f64
        };
        MetricRow {
            metric,
            n,
            accuracy,
            se: standard_error(accuracy, count),
            n_problems: count,
            strategy: Strategy::BestOfN,
            aggregation,
        }
    };
    let mut rows = Vec::new();
    let pass1 = runs.iter().filter(|r| r.candidates[0].correct).count();
    rows.push(row(Metric::Pass1, 1, pass1));
    for &n in &ns {
        let (mut prm, mut maj, mut pass) = (0, 0, 0);
        for run in runs {
            let c = &run.candidates[..n];
            let scores: Vec<f64> = c.iter().map(|x| x.score.unwrap_or(0.0)).collect();
            if argmax(&scores).is_some_and(|i| c[i].correct) {
                prm += 1;
            }
            let answers: Vec<(&str, Option<f64>)> = c
                .iter()
                .map(|x| {
                    (
                        x.trace.final_answer.as_ref().map_or("", |a| a.as_str()),
                        x.score,
                    )
                })
                .collect();
            if vote(&answers).is_some_and(|i| c[i].correct) {
                maj += 1;
            }
            if c.iter().any(|x| x.correct) {
                pass += 1;
            }
        }
        rows.push(row(Metric::PrmAtN, n, prm));
        let mut m = row(Metric::MajAtN, n, maj);
        m.strategy = Strategy::MajorityVote;
        rows.push(m);
        rows.push(row(Metric::PassAtN, n, pass));
    }
    Ok(rows)
}

/// Unbudgeted Best-of-N runs with `n` candidates for every problem, in
/// parallel and in problem order.
pub fn candidate_runs<S: Scalar>(
    problems: &[Problem],
    policy: &StochasticPolicy,
    model: &Model<S>,
    n: usize,
    aggregation: AggregationRule,
    seed: u64,
) -> Result<Vec<SearchRun>> {
    let config = SearchConfig {
        strategy: Strategy::BestOfN,
        n,
        aggregation,
        seed,
        caps: BudgetCaps::unlimited(),
        ..SearchConfig::default()
    };
    problems
        .par_iter()
        .map(|p| best_of_n(p, policy, model, &config))
        .collect()
}

/// Replaces every candidate score with `model`'s aggregate score. Lets
/// several models be compared on one fixed candidate pool.
pub fn rescore_runs<S: Scalar>(
    runs: &[SearchRun],
    problems: &HashMap<String, Problem>,
    model: &Model<S>,
    aggregation: AggregationRule,
) -> Result<Vec<SearchRun>> {
    runs.par_iter()
        .map(|run| {
            let problem = problems
                .get(&run.problem_id)
                .ok_or_else(|| Error::Contract(format!("no problem with id {}", run.problem_id)))?;
            let mut run = run.clone();
            for c in &mut run.candidates {
                c.score = Some(
                    score_trace(model, problem, &c.trace, aggregation)?
                        .score
                        .to_f64_lossy(),
                );
            }
            Ok(run)
        })
        .collect()
}

/// Checks the metric contracts: all three metrics agree at N = 1, pass@N is
/// nondecreasing in N, and neither prm@N nor maj@N exceeds pass@N.
pub fn metric_contract_violations(rows: &[MetricRow]) -> Vec<String> {
    let get = |metric: Metric, n: usize| {
        rows.iter()
            .find(|r| r.metric == metric && r.n == n)
            .map(|r| r.accuracy)
    };
    let mut out = Vec::new();
    let mut ns: Vec<usize> = rows
        .iter()
        .filter(|r| r.metric == Metric::PassAtN)
        .map(|r| r.n)
        .collect();
    ns.sort_unstable();
    if let (Some(p1), Some(prm1), Some(maj1)) = (
        get(Metric::Pass1, 1),
        get(Metric::PrmAtN, 1),
        get(Metric::MajAtN, 1),
    ) {
        if p1 != prm1 || p1 != maj1 {
            out.push(format!("at N=1: pass {p1}, prm {prm1}, maj {maj1}"));
        }
    }
    let mut last = f64::NEG_INFINITY;
    for &n in &ns {
        let pass = get(Metric::PassAtN, n).unwrap_or(0.0);
        if pass < last {
            out.push(format!("pass@{n} = {pass} decreased"));
        }
        last = pass;
        for metric in [Metric::PrmAtN, Metric::MajAtN] {
            if let Some(v) = get(metric, n) {
                if v > pass {
                    out.push(format!(
                        "{}@{n} = {v} exceeds pass@{n} = {pass}",
                        metric.name()
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Candidate;
    use crate::trace::{Answer, LedgerSnapshot, ReasoningTrace};

    fn run(cands: &[(&str, bool, f64)]) -> SearchRun {
        SearchRun {
            problem_id: "p".into(),
            strategy: Strategy::BestOfN,
            selected: None,
            selected_index: None,
            candidates: cands
                .iter()
                .map(|&(a, correct, score)| Candidate {
                    trace: ReasoningTrace {
                        problem_id: "p".into(),
                        horizon: 0,
                        steps: vec![],
                        final_answer: Some(Answer(a.into())),
                        generator_seed: 0,
                    },
                    score: Some(score),
                    correct,
                })
                .collect(),
            ledger: LedgerSnapshot::default(),
            correct: false,
            truncated: false,
        }
    }

    fn acc(rows: &[MetricRow], metric: Metric, n: usize) -> f64 {
        rows.iter()
            .find(|r| r.metric == metric && r.n == n)
            .unwrap()
            .accuracy
    }

    #[test]
    fn all_correct_gives_ones() {
        let runs = vec![run(&[("1", true, 0.3), ("1", true, 0.9)]); 3];
        let rows = compute_metrics(&runs, &[1, 2], AggregationRule::PrmMin).unwrap();
        assert!(rows.iter().all(|r| r.accuracy == 1.0));
    }

    #[test]
    fn tie_goes_to_the_higher_scored_answer() {
        let runs = vec![run(&[("7", false, 0.9), ("8", true, 0.8)])];
        let rows = compute_metrics(&runs, &[2], AggregationRule::PrmMin).unwrap();
        assert_eq!(acc(&rows, Metric::PrmAtN, 2), 0.0);
        assert_eq!(acc(&rows, Metric::MajAtN, 2), 0.0);
        assert_eq!(acc(&rows, Metric::PassAtN, 2), 1.0);
    }

    #[test]
    fn too_few_candidates_names_the_problem() {
        let runs = vec![run(&[("1", true, 0.3)])];
        match compute_metrics(&runs, &[2], AggregationRule::PrmMin) {
            Err(Error::Metrics { problem_id, .. }) => assert_eq!(problem_id, "p"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn contracts_hold_on_mixed_runs() {
        let runs = vec![
            run(&[
                ("1", false, 0.4),
                ("2", true, 0.2),
                ("1", false, 0.3),
                ("2", true, 0.9),
            ]),
            run(&[
                ("5", true, 0.4),
                ("6", false, 0.7),
                ("6", false, 0.3),
                ("5", true, 0.1),
            ]),
            run(&[
                ("3", false, 0.4),
                ("4", false, 0.2),
                ("3", false, 0.3),
                ("9", false, 0.9),
            ]),
        ];
        let rows = compute_metrics(&runs, &[1, 2, 3, 4], AggregationRule::PrmMin).unwrap();
        assert!(metric_contract_violations(&rows).is_empty());
        assert_eq!(acc(&rows, Metric::PassAtN, 4), 2.0 / 3.0);
    }
}
