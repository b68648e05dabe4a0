//! Domain types shared across the pipeline: problems, steps, traces and step
//! labels, plus the JSONL files they travel in and the budget ledger every
//! search charges against.

mod budget;
mod jsonl;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{CodeAssemblySpec, MathChainSpec, Token};
use crate::error::{Error, Result};

pub use budget::{BudgetCaps, BudgetLedger, LedgerSnapshot};
pub use jsonl::{
    read_jsonl_with, read_labels, read_problems, read_traces, write_jsonl, write_labels,
    write_problems, write_traces, LabeledTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[serde(alias = "MathChain")]
    MathChain,
    #[serde(alias = "CodeAssembly")]
    CodeAssembly,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::MathChain => "math_chain",
            Domain::CodeAssembly => "code_assembly",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "math_chain" | "MathChain" | "math" => Ok(Domain::MathChain),
            "code_assembly" | "CodeAssembly" | "code" => Ok(Domain::CodeAssembly),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// A canonicalized final answer. Equality is exact string equality; the
/// environments produce the canonical form (decimal integer for math chains,
/// space-separated mnemonics for code assembly).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer(pub String);

impl Answer {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    MathChain(MathChainSpec),
    CodeAssembly(CodeAssemblySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub domain: Domain,
    pub spec: ProblemSpec,
    pub gold_answer: Answer,
}

impl Problem {
    /// Number of steps a complete trace has.
    pub fn horizon(&self) -> usize {
        match &self.spec {
            ProblemSpec::MathChain(s) => s.ops.len(),
            ProblemSpec::CodeAssembly(s) => s.target_program.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let solved = match (&self.domain, &self.spec) {
            (Domain::MathChain, ProblemSpec::MathChain(s)) => {
                s.validate()?;
                s.solve()
            }
            (Domain::CodeAssembly, ProblemSpec::CodeAssembly(s)) => {
                s.validate()?;
                s.solve()
            }
            _ => {
                return Err(Error::InvalidTrace(format!(
                    "problem {}: domain {} does not match its spec",
                    self.id, self.domain
                )))
            }
        };
        if solved != self.gold_answer {
            return Err(Error::InvalidTrace(format!(
                "problem {}: gold answer {} but solver gives {}",
                self.id, self.gold_answer, solved
            )));
        }
        Ok(())
    }
}

/// What a step asserts. Math steps assert the running value after applying
/// the step's operation; code steps emit one instruction token. A step with
/// `correction` set recomputes from the true state instead of continuing from
/// the running one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepContent {
    Math { value: i64, correction: bool },
    Code { token: Token, correction: bool },
}

impl StepContent {
    pub fn is_correction(&self) -> bool {
        match *self {
            StepContent::Math { correction, .. } | StepContent::Code { correction, .. } => {
                correction
            }
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            StepContent::Math { .. } => Domain::MathChain,
            StepContent::Code { .. } => Domain::CodeAssembly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub content: StepContent,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub problem_id: String,
    /// Step count of a complete trace for this problem.
    pub horizon: usize,
    pub steps: Vec<Step>,
    pub final_answer: Option<Answer>,
    pub generator_seed: u64,
}

impl ReasoningTrace {
    pub fn empty(problem: &Problem, generator_seed: u64) -> Self {
        ReasoningTrace {
            problem_id: problem.id.clone(),
            horizon: problem.horizon(),
            steps: Vec::new(),
            final_answer: None,
            generator_seed,
        }
    }

    pub fn id(&self) -> String {
        format!("{}#{:016x}", self.problem_id, self.generator_seed)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.horizon
    }

    /// The first `len` steps as a partial trace.
    pub fn prefix(&self, len: usize) -> ReasoningTrace {
        let len = len.min(self.steps.len());
        ReasoningTrace {
            problem_id: self.problem_id.clone(),
            horizon: self.horizon,
            steps: self.steps[..len].to_vec(),
            final_answer: if len == self.horizon {
                self.final_answer.clone()
            } else {
                None
            },
            generator_seed: self.generator_seed,
        }
    }

    /// Content hash of the first `len` steps; identical prefixes hash equal
    /// regardless of which trace they belong to.
    pub fn prefix_hash(&self, len: usize) -> u64 {
        let mut h = crate::seed::StableHasher::new();
        h.str(&self.problem_id);
        for step in &self.steps[..len.min(self.steps.len())] {
            hash_content(&mut h, &step.content);
        }
        h.finish()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() > self.horizon {
            return Err(Error::InvalidTrace(format!(
                "{} steps exceed horizon {}",
                self.steps.len(),
                self.horizon
            )));
        }
        for (pos, step) in self.steps.iter().enumerate() {
            if step.index != pos {
                return Err(Error::InvalidTrace(format!(
                    "step at position {pos} has index {}",
                    step.index
                )));
            }
        }
        match (self.is_complete(), &self.final_answer) {
            (true, None) => Err(Error::InvalidTrace(
                "complete trace without a final answer".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidTrace(
                "partial trace carries a final answer".into(),
            )),
            _ => Ok(()),
        }
    }
}

pub(crate) fn hash_content(h: &mut crate::seed::StableHasher, content: &StepContent) {
    match *content {
        StepContent::Math { value, correction } => {
            h.u64(1).i64(value).u64(correction as u64);
        }
        StepContent::Code { token, correction } => {
            h.u64(2).u64(token.0 as u64).u64(correction as u64);
        }
    }
}

/// Step-level supervision produced by annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLabel {
    pub trace_id: String,
    pub step_index: usize,
    pub hard_label: bool,
    pub mc_estimate: f64,
    pub rollout_count: usize,
}

impl StepLabel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mc_estimate) {
            return Err(Error::InvalidTrace(format!(
                "mc_estimate {} outside [0, 1]",
                self.mc_estimate
            )));
        }
        if self.rollout_count == 0 {
            return Err(Error::InvalidTrace("rollout_count must be >= 1".into()));
        }
        Ok(())
    }
}
