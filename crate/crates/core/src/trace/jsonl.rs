//! JSONL persistence: one JSON object per line, UTF-8.
//!
//! Readers parse each line into a loose wire record first and then validate
//! it, so a malformed line surfaces as a parse error and a well-formed line
//! that breaks an invariant (negative index, gap in step indices, answer on a
//! partial trace) as a schema error. Both carry the 1-based line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Answer, Problem, ReasoningTrace, Step, StepContent, StepLabel};
use crate::annotate::AnnotatedTrace;
use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads `path` line by line, parsing each line as `W` and converting it with
/// `convert`. Blank lines are skipped. Any failure aborts the whole read.
pub fn read_jsonl_with<W, T>(
    path: &Path,
    mut convert: impl FnMut(W) -> std::result::Result<T, String>,
) -> Result<Vec<T>>
where
    W: DeserializeOwned,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: W = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let item = convert(wire).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_traces(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    write_jsonl(path, traces)
}

pub fn read_traces(path: &Path) -> Result<Vec<ReasoningTrace>> {
    read_jsonl_with(path, TraceWire::into_trace)
}

pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<()> {
    write_jsonl(path, problems)
}

pub fn read_problems(path: &Path) -> Result<Vec<Problem>> {
    let mut seen = std::collections::HashSet::new();
    read_jsonl_with(path, |p: Problem| {
        p.validate().map_err(|e| e.to_string())?;
        if !seen.insert(p.id.clone()) {
            return Err(format!("duplicate problem id {}", p.id));
        }
        Ok(p)
    })
}

/// One line of `labels.jsonl`: an annotated trace together with its problem,
/// so that training can recompute step features without other inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledTrace {
    pub problem: Problem,
    #[serde(flatten)]
    pub annotation: AnnotatedTrace,
}

pub fn write_labels(path: &Path, labeled: &[LabeledTrace]) -> Result<()> {
    write_jsonl(path, labeled)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledTrace>> {
    read_jsonl_with(path, LabeledWire::into_labeled)
}

#[derive(Deserialize)]
struct StepWire {
    index: i64,
    content: StepContent,
    rendered: String,
}

#[derive(Deserialize)]
struct TraceWire {
    problem_id: String,
    horizon: i64,
    steps: Vec<StepWire>,
    final_answer: Option<Answer>,
    generator_seed: u64,
}

impl TraceWire {
    fn into_trace(self) -> std::result::Result<ReasoningTrace, String> {
        let horizon = usize::try_from(self.horizon)
            .map_err(|_| format!("negative horizon {}", self.horizon))?;
        let steps = self
            .steps
            .into_iter()
            .map(|s| {
                let index = usize::try_from(s.index)
                    .map_err(|_| format!("negative step index {}", s.index))?;
                Ok(Step {
                    index,
                    content: s.content,
                    rendered: s.rendered,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let trace = ReasoningTrace {
            problem_id: self.problem_id,
            horizon,
            steps,
            final_answer: self.final_answer,
            generator_seed: self.generator_seed,
        };
        trace.validate().map_err(|e| e.to_string())?;
        Ok(trace)
    }
}

#[derive(Deserialize)]
struct LabeledWire {
    problem: Problem,
    trace: TraceWire,
    labels: Vec<StepLabel>,
    first_error_index: Option<i64>,
    annotator_id: String,
}

impl LabeledWire {
    fn into_labeled(self) -> std::result::Result<LabeledTrace, String> {
        self.problem.validate().map_err(|e| e.to_string())?;
        let trace = self.trace.into_trace()?;
        if trace.problem_id != self.problem.id {
            return Err(format!(
                "trace belongs to {} but is paired with problem {}",
                trace.problem_id, self.problem.id
            ));
        }
        let first_error_index = self
            .first_error_index
            .map(|j| usize::try_from(j).map_err(|_| format!("negative first_error_index {j}")))
            .transpose()?;
        let annotation = AnnotatedTrace {
            trace,
            labels: self.labels,
            first_error_index,
            annotator_id: self.annotator_id,
        };
        annotation.validate().map_err(|e| e.to_string())?;
        Ok(LabeledTrace {
            problem: self.problem,
            annotation,
        })
    }
}
