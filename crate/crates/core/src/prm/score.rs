use std::collections::HashMap;

use crate::env::{trace_features, StepFeatures, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::{BudgetLedger, Problem, ReasoningTrace};

use super::model::{score_step, Model};
use super::AggregationRule;

/// Collapses per-step scores into one trace score. `None` for no steps.
pub fn aggregate<S: Scalar>(scores: &[S], rule: AggregationRule) -> Option<S> {
    match rule {
        AggregationRule::PrmLast => scores.last().copied(),
        AggregationRule::PrmMin => scores.iter().copied().reduce(|a, b| a.min(b)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceScore<S> {
    pub score: S,
    pub per_step: Vec<S>,
}

/// Scores every prefix of a complete trace and aggregates them.
pub fn score_trace<S: Scalar>(
    model: &Model<S>,
    problem: &Problem,
    trace: &ReasoningTrace,
    rule: AggregationRule,
) -> Result<TraceScore<S>> {
    if trace.is_empty() {
        return Err(Error::Contract(format!(
            "trace {} has no steps to score",
            trace.id()
        )));
    }
    if !trace.is_complete() {
        return Err(Error::Contract(format!(
            "trace {} is incomplete ({} of {} steps)",
            trace.id(),
            trace.len(),
            trace.horizon
        )));
    }
    model.check_schema(FEATURE_DIM)?;
    let per_step = trace_features(problem, trace, &model.features)?
        .iter()
        .map(|f| score_step(model, f))
        .collect::<Result<Vec<S>>>()?;
    let score = aggregate(&per_step, rule).expect("nonempty");
    Ok(TraceScore { score, per_step })
}

/// Step scorer with a per-prefix memo. Each cache miss costs one PRM unit on
/// the ledger, if one is given.
#[derive(Debug)]
pub struct PrefixScorer<'m, S> {
    model: &'m Model<S>,
    memo: HashMap<u64, f64>,
}

impl<'m, S: Scalar> PrefixScorer<'m, S> {
    pub fn new(model: &'m Model<S>) -> Result<Self> {
        model.check_schema(FEATURE_DIM)?;
        Ok(PrefixScorer {
            model,
            memo: HashMap::new(),
        })
    }

    pub fn model(&self) -> &'m Model<S> {
        self.model
    }

    /// Score of the last step of the prefix identified by `prefix_hash`.
    pub fn score(
        &mut self,
        prefix_hash: u64,
        features: &StepFeatures,
        ledger: Option<&BudgetLedger>,
    ) -> Result<f64> {
        if let Some(&p) = self.memo.get(&prefix_hash) {
            return Ok(p);
        }
        if let Some(ledger) = ledger {
            ledger.charge_prm(1)?;
        }
        let p = score_step(self.model, features)?.to_f64_lossy();
        self.memo.insert(prefix_hash, p);
        Ok(p)
    }

    pub fn cached(&self) -> usize {
        self.memo.len()
    }
}
