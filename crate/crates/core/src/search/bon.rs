use std::collections::HashMap;

use crate::env::{is_correct, StochasticPolicy, FEATURE_DIM};
use crate::error::Result;
use crate::prm::{Model, PrefixScorer};
use crate::scalar::Scalar;
use crate::trace::{BudgetLedger, Problem};

use super::{problem_policy, Candidate, Generator, Partial, SearchConfig, SearchRun, Strategy};

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the first candidate carrying the modal answer.
///
/// Answers tied for the highest count are separated by the mean of their
/// scores when every candidate has one, and by first occurrence otherwise.
pub fn vote<A: AsRef<str>>(answers: &[(A, Option<f64>)]) -> Option<usize> {
    // answer -> (first index, count, score sum)
    let mut tally: HashMap<&str, (usize, usize, f64)> = HashMap::new();
    for (i, (a, s)) in answers.iter().enumerate() {
        let e = tally.entry(a.as_ref()).or_insert((i, 0, 0.0));
        e.1 += 1;
        e.2 += s.unwrap_or(0.0);
    }
    let scored = answers.iter().all(|(_, s)| s.is_some());
    let mut groups: Vec<(usize, usize, f64)> = tally.into_values().collect();
    groups.sort_by_key(|g| g.0);
    let mut best: Option<(usize, usize, f64)> = None;
    for g in groups {
        let better = match best {
            None => true,
            Some(b) if g.1 != b.1 => g.1 > b.1,
            Some(b) => scored && g.2 / g.1 as f64 > b.2 / b.1 as f64,
        };
        if better {
            best = Some(g);
        }
    }
    best.map(|b| b.0)
}

/// Draws up to `config.n` complete candidates in parallel waves. Stops early
/// when the next wave no longer fits the budget.
fn sample<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    mut scorer: Option<&mut PrefixScorer<'_, S>>,
    config: &SearchConfig,
    ledger: &BudgetLedger,
) -> Result<(Vec<Candidate>, bool)> {
    let base = problem_policy(policy, config, problem);
    let mut generator = Generator::new(base, ledger);
    let features = scorer
        .as_ref()
        .map(|s| s.model().features)
        .unwrap_or_default();
    let horizon = problem.horizon();
    let latency = config.latency;
    let mut candidates = Vec::with_capacity(config.n.min(1024));
    let mut truncated = false;
    while candidates.len() < config.n {
        let mut count = (config.n - candidates.len()).min(latency.batch_width);
        if let Some(rest) = ledger.remaining_generation() {
            count = count.min((rest / horizon as u64) as usize);
        }
        let mut ns = latency.generation_ns(count, horizon);
        if scorer.is_some() {
            ns += latency.scoring_ns(count);
        }
        if count == 0 || !ledger.fits((count * horizon) as u64, ns) {
            truncated = true;
            break;
        }
        ledger.charge_latency(ns)?;
        for _ in 0..count {
            let stream = candidates.len() as u64;
            let mut node = Partial::root(problem, &features, base.stream(stream).seed)?;
            while !node.is_complete() {
                let step = generator.step(stream, node.cursor())?;
                node = node.extend(step, scorer.as_deref_mut(), ledger)?;
            }
            let score = scorer
                .as_ref()
                .and_then(|_| node.aggregate(config.aggregation));
            candidates.push(Candidate {
                correct: is_correct(problem, &node.trace),
                trace: node.trace,
                score,
            });
        }
    }
    Ok((candidates, truncated))
}

/// Samples `config.n` candidates and keeps the one the PRM scores highest.
pub fn best_of_n<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    model: &Model<S>,
    config: &SearchConfig,
) -> Result<SearchRun> {
    config.validate()?;
    model.check_schema(FEATURE_DIM)?;
    let ledger = BudgetLedger::new(config.caps);
    let mut scorer = PrefixScorer::new(model)?;
    let (candidates, truncated) = sample(problem, policy, Some(&mut scorer), config, &ledger)?;
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| c.score.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let selected = argmax(&scores);
    Ok(SearchRun::finish(
        problem,
        Strategy::BestOfN,
        candidates,
        selected,
        &ledger,
        truncated,
    ))
}

/// Samples `config.n` candidates and returns the most frequent answer. The
/// model, when given, only breaks ties.
pub fn majority_vote<S: Scalar>(
    problem: &Problem,
    policy: &StochasticPolicy,
    model: Option<&Model<S>>,
    config: &SearchConfig,
) -> Result<SearchRun> {
    config.validate()?;
    let ledger = BudgetLedger::new(config.caps);
    let mut scorer = model.map(PrefixScorer::new).transpose()?;
    let (candidates, truncated) = sample(problem, policy, scorer.as_mut(), config, &ledger)?;
    let answers: Vec<(&str, Option<f64>)> = candidates
        .iter()
        .map(|c| {
            let answer = c.trace.final_answer.as_ref().map_or("", |a| a.as_str());
            (answer, c.score)
        })
        .collect();
    let selected = vote(&answers);
    Ok(SearchRun::finish(
        problem,
        Strategy::MajorityVote,
        candidates,
        selected,
        &ledger,
        truncated,
    ))
}
