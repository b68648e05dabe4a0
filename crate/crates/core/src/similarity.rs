//! Gradient-activation pattern similarity.
//!
//! For a reference model with parameters `θ` and an input trace `s`, the
//! activation of parameter `i` is `|θ_i · ∂F/∂θ_i|`, where `F` is the mean
//! step score over the trace. Two inputs are compared by the cosine of their
//! activation vectors, and two sets by the sum and mean of all cross-set
//! cosines.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{trace_features, StepFeatures, StochasticPolicy, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::harness::{candidate_runs, compute_metrics, MetricRow};
use crate::prm::Model;
use crate::scalar::Scalar;
use crate::search::SearchRun;
use crate::trace::{Problem, ReasoningTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct ActivationVector<S> {
    pub values: Vec<S>,
    pub source_input_id: String,
}

impl<S: Scalar> ActivationVector<S> {
    fn norm_sq(&self) -> S {
        self.values.iter().map(|&v| v * v).sum()
    }
}

/// Activation pattern of `model` on one trace, given its step features.
pub fn activation<S: Scalar>(
    model: &Model<S>,
    steps: &[StepFeatures],
    source_input_id: &str,
) -> Result<ActivationVector<S>> {
    if steps.is_empty() {
        return Err(Error::Contract(format!(
            "{source_input_id}: no steps to activate on"
        )));
    }
    let mut grad = vec![S::zero(); model.param_count()];
    for step in steps {
        let x = model.cast_features(step)?;
        let (_, g) = model.output_gradient(&x);
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let inv = S::one() / S::of(steps.len() as f64);
    let values = model
        .params()
        .iter()
        .zip(&grad)
        .map(|(&theta, &g)| (theta * g * inv).abs())
        .collect();
    Ok(ActivationVector {
        values,
        source_input_id: source_input_id.to_string(),
    })
}

/// Activation of `model` on a complete trace of `problem`.
pub fn trace_activation<S: Scalar>(
    model: &Model<S>,
    problem: &Problem,
    trace: &ReasoningTrace,
) -> Result<ActivationVector<S>> {
    let features = trace_features(problem, trace, &model.features)?;
    activation(model, &features, &trace.id())
}

/// Cosine of two activation vectors, clamped to `[0, 1]`. `None` when either
/// vector is all zeros.
pub fn cosine<S: Scalar>(a: &ActivationVector<S>, b: &ActivationVector<S>) -> Option<f64> {
    let na = a.norm_sq();
    let nb = b.norm_sq();
    if na == S::zero() || nb == S::zero() {
        return None;
    }
    let dot: S = a.values.iter().zip(&b.values).map(|(&x, &y)| x * y).sum();
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b it equals
    // dot exactly, so self-similarity is exactly 1.
    let c = (dot / (na * nb).sqrt()).to_f64_lossy();
    Some(c.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub set_a: String,
    pub set_b: String,
    /// `pairwise[i][j]` compares `a[i]` with `b[j]`; `None` when undefined.
    pub pairwise: Vec<Vec<Option<f64>>>,
    pub sum_s: f64,
    /// `sum_s` over the number of defined pairs.
    pub mean_s: f64,
    /// Pairs left out because an activation vector was all zeros.
    pub excluded: usize,
}

/// Cross-set similarity of two lists of activation vectors.
pub fn compare_sets<S: Scalar>(
    set_a: &str,
    a: &[ActivationVector<S>],
    set_b: &str,
    b: &[ActivationVector<S>],
) -> Result<SimilarityReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("similarity needs two nonempty sets".into()));
    }
    let pairwise: Vec<Vec<Option<f64>>> = a
        .par_iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).collect())
        .collect();
    let mut sum_s = 0.0;
    let mut defined = 0usize;
    for row in &pairwise {
        for c in row.iter().flatten() {
            sum_s += c;
            defined += 1;
        }
    }
    Ok(SimilarityReport {
        set_a: set_a.to_string(),
        set_b: set_b.to_string(),
        mean_s: if defined == 0 {
            0.0
        } else {
            sum_s / defined as f64
        },
        excluded: a.len() * b.len() - defined,
        pairwise,
        sum_s,
    })
}

/// Looks up each trace's problem and compares the two sets of traces.
pub fn set_similarity<S: Scalar>(
    model: &Model<S>,
    problems: &HashMap<String, Problem>,
    (name_a, a): (&str, &[ReasoningTrace]),
    (name_b, b): (&str, &[ReasoningTrace]),
) -> Result<SimilarityReport> {
    model.check_schema(FEATURE_DIM)?;
    let activate = |traces: &[ReasoningTrace]| -> Result<Vec<ActivationVector<S>>> {
        traces
            .par_iter()
            .map(|t| {
                let problem = problems.get(&t.problem_id).ok_or_else(|| {
                    Error::Contract(format!("no problem with id {}", t.problem_id))
                })?;
                trace_activation(model, problem, t)
            })
            .collect()
    };
    compare_sets(name_a, &activate(a)?, name_b, &activate(b)?)
}

/// Evaluates `model` on problems from another domain with Best-of-N
/// candidates: prm@N alongside maj@N, pass@N and pass@1.
pub fn cross_domain_eval<S: Scalar>(
    model: &Model<S>,
    problems: &[Problem],
    policy: &StochasticPolicy,
    ns: &[usize],
    seed: u64,
) -> Result<(Vec<MetricRow>, Vec<SearchRun>)> {
    model.check_schema(FEATURE_DIM)?;
    model.validate()?;
    let max_n = ns.iter().copied().max().unwrap_or(1);
    let runs = candidate_runs(problems, policy, model, max_n, model.aggregation, seed)?;
    let rows = compute_metrics(&runs, ns, model.aggregation)?;
    Ok((rows, runs))
}
