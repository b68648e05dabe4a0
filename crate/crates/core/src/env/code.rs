use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Answer;

use super::{MAX_HORIZON, MIN_HORIZON};

pub const ALPHABET: [&str; 16] = [
    "LOAD", "STORE", "ADD", "SUB", "MUL", "DIV", "JMP", "JZ", "PUSH", "POP", "CALL", "RET", "CMP",
    "MOV", "AND", "OR",
];

/// One instruction from the fixed 16-symbol alphabet. Serialized as its
/// mnemonic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(pub u8);

impl Token {
    pub fn mnemonic(self) -> &'static str {
        ALPHABET[self.0 as usize]
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl TryFrom<String> for Token {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        ALPHABET
            .iter()
            .position(|m| *m == s)
            .map(|i| Token(i as u8))
            .ok_or_else(|| format!("unknown instruction `{s}`"))
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.mnemonic().to_string()
    }
}

/// A target program plus, per position, the wrong tokens a generator is
/// likely to emit there (most plausible first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeAssemblySpec {
    pub target_program: Vec<Token>,
    pub distractor_set: Vec<Vec<Token>>,
}

impl CodeAssemblySpec {
    pub fn solve(&self) -> Answer {
        canonical(&self.target_program)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.target_program.len();
        if !(MIN_HORIZON..=MAX_HORIZON).contains(&t) {
            return Err(Error::InvalidTrace(format!(
                "program length {t} outside [{MIN_HORIZON}, {MAX_HORIZON}]"
            )));
        }
        if self.distractor_set.len() != t {
            return Err(Error::InvalidTrace(format!(
                "{} distractor lists for {t} positions",
                self.distractor_set.len()
            )));
        }
        for (pos, (target, distractors)) in self
            .target_program
            .iter()
            .zip(&self.distractor_set)
            .enumerate()
        {
            if distractors.is_empty() || distractors.contains(target) {
                return Err(Error::InvalidTrace(format!(
                    "position {pos}: distractors must be nonempty and exclude the target"
                )));
            }
        }
        Ok(())
    }
}

/// Normalized token sequence: mnemonics joined by single spaces.
pub fn canonical(tokens: &[Token]) -> Answer {
    let mut s = String::with_capacity(tokens.len() * 5);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.mnemonic());
    }
    Answer(s)
}
