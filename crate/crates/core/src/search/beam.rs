use crate::env::{is_correct, StochasticPolicy, FEATURE_DIM};
use crate::error::Result;
use crate::prm::{Model, PrefixScorer};
use crate::scalar::Scalar;
use crate::trace::{BudgetLedger, Problem};

use super::{
    argmax, problem_policy, Candidate, Generator, Partial, SearchConfig, SearchRun, Strategy,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BeamPath<N> {
    pub node: N,
    /// Sum of step scores along the path.
    pub cumulative: f64,
    pub step_scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BeamOutcome<N> {
    /// Paths that reached a leaf, in the order they finished.
    pub completed: Vec<BeamPath<N>>,
    /// Cumulative scores of the paths kept at each depth.
    pub retained: Vec<Vec<f64>>,
    pub truncated: bool,
}

/// Depth-synchronous beam search over an abstract tree.
///
/// `expand` receives the whole frontier and returns, per path, its children
/// with their step scores; an empty list marks a leaf. Returning `None`
/// means the round cannot be afforded and ends the search. After each round
/// the `width` children with the highest cumulative score survive, ties
/// going to the earlier-generated child.
pub fn beam_core<N, E>(root: N, width: usize, mut expand: E) -> Result<BeamOutcome<N>>
where
    N: Clone,
    E: FnMut(&[BeamPath<N>]) -> Result<Option<Vec<Vec<(N, f64)>>>>,
{
    let mut frontier = vec![BeamPath {
        node: root,
        cumulative: 0.0,
        step_scores: Vec::new(),
    }];
    let mut completed = Vec::new();
    let mut retained = Vec::new();
    let mut truncated = false;
    while !frontier.is_empty() {
        let Some(children) = expand(&frontier)? else {
            truncated = true;
            break;
        };
        debug_assert_eq!(children.len(), frontier.len());
        let mut next = Vec::new();
        for (path, kids) in frontier.into_iter().zip(children) {
            if kids.is_empty() {
                completed.push(path);
                continue;
            }
            for (node, score) in kids {
                let mut step_scores = path.step_scores.clone();
                step_scores.push(score);
                next.push(BeamPath {
                    node,
                    cumulative: path.cumulative + score,
                    step_scores,
                });
            }
        }
        next.sort_by(|a, b| b.cumulative.total_cmp(&a.cumulative));
        next.truncate(width);
        if !next.is_empty() {
            retained.push(next.iter().map(|p| p.cumulative).collect());
        }
        frontier = next;
    }
    Ok(BeamOutcome {
        completed,
        retained,
        truncated,
    })
}

/// Keeps the `config.beam_width` partial traces with the highest summed
/// step score; each surviving trace proposes `config.max_children` next
/// steps per round. Finished traces are ranked by the aggregation rule.
pub fn beam_search<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    model: &Model<S>,
    config: &SearchConfig,
) -> Result<SearchRun> {
    config.validate()?;
    model.check_schema(FEATURE_DIM)?;
    let ledger = BudgetLedger::new(config.caps);
    let base = problem_policy(policy, config, problem);
    let mut generator = Generator::new(base, &ledger);
    let mut scorer = PrefixScorer::new(model)?;
    let root = Partial::root(problem, &model.features, base.stream(0).seed)?;
    let children = config.max_children;
    let latency = config.latency;

    let outcome = beam_core(root, config.beam_width, |frontier| {
        let open = frontier.iter().filter(|p| !p.node.is_complete()).count();
        if open > 0 {
            let proposals = open * children;
            let ns = latency.generation_ns(proposals, 1) + latency.scoring_ns(proposals);
            if !ledger.fits(proposals as u64, ns) {
                return Ok(None);
            }
            ledger.charge_latency(ns)?;
        }
        let mut all = Vec::with_capacity(frontier.len());
        for path in frontier {
            let mut kids: Vec<(Partial<'_>, f64)> = Vec::new();
            if !path.node.is_complete() {
                for stream in 0..children as u64 {
                    let step = generator.step(stream, path.node.cursor())?;
                    if kids.iter().any(|(k, _)| {
                        k.trace.steps.last().map(|s| &s.content) == Some(&step.content)
                    }) {
                        continue;
                    }
                    let child = path.node.extend(step, Some(&mut scorer), &ledger)?;
                    let score = *child.scores.last().expect("scored child");
                    kids.push((child, score));
                }
            }
            all.push(kids);
        }
        Ok(Some(all))
    })?;

    let candidates: Vec<Candidate> = outcome
        .completed
        .into_iter()
        .map(|p| Candidate {
            correct: is_correct(problem, &p.node.trace),
            score: p.node.aggregate(config.aggregation),
            trace: p.node.trace,
        })
        .collect();
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| c.score.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let selected = argmax(&scores);
    Ok(SearchRun::finish(
        problem,
        Strategy::Beam,
        candidates,
        selected,
        &ledger,
        outcome.truncated,
    ))
}
