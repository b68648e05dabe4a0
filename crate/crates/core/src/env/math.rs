use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Answer;

use super::{MAX_HORIZON, MIN_HORIZON};

/// Gold-path intermediate values stay within this bound.
pub const VALUE_BOUND: i64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Operator {
    pub fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathOp {
    pub operator: Operator,
    pub operand: i64,
}

impl MathOp {
    pub fn new(operator: Operator, operand: i64) -> Self {
        MathOp { operator, operand }
    }

    /// Saturating so that corrupted running values can never overflow.
    pub fn apply(&self, value: i64) -> i64 {
        match self.operator {
            Operator::Add => value.saturating_add(self.operand),
            Operator::Sub => value.saturating_sub(self.operand),
            Operator::Mul => value.saturating_mul(self.operand),
        }
    }
}

/// An arithmetic chain: start from `start_value` and apply `ops` in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathChainSpec {
    pub start_value: i64,
    pub ops: Vec<MathOp>,
}

impl MathChainSpec {
    /// Values after each op along the gold path.
    pub fn gold_states(&self) -> Vec<i64> {
        self.ops
            .iter()
            .scan(self.start_value, |v, op| {
                *v = op.apply(*v);
                Some(*v)
            })
            .collect()
    }

    /// Value before op `position` on the gold path.
    pub fn gold_before(&self, position: usize) -> i64 {
        self.ops[..position]
            .iter()
            .fold(self.start_value, |v, op| op.apply(v))
    }

    pub fn solve(&self) -> Answer {
        canonical(self.ops.iter().fold(self.start_value, |v, op| op.apply(v)))
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.ops.len();
        if !(MIN_HORIZON..=MAX_HORIZON).contains(&t) {
            return Err(Error::InvalidTrace(format!(
                "math chain length {t} outside [{MIN_HORIZON}, {MAX_HORIZON}]"
            )));
        }
        if self
            .ops
            .iter()
            .any(|op| op.operator == Operator::Mul && op.operand == 0)
        {
            return Err(Error::InvalidTrace("multiplication by zero".into()));
        }
        let mut v = self.start_value;
        for op in &self.ops {
            v = op.apply(v);
            if v.abs() > VALUE_BOUND {
                return Err(Error::InvalidTrace(format!(
                    "intermediate value {v} exceeds bound {VALUE_BOUND}"
                )));
            }
        }
        Ok(())
    }
}

pub fn canonical(value: i64) -> Answer {
    Answer(value.to_string())
}
