//! Deciding whether two sampled answers mean the same thing.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub trait EquivalencePolicy {
    fn name(&self) -> String;
    fn equivalent(&self, question: &str, a: &str, b: &str) -> Result<bool>;
}

/// Lowercases, strips punctuation and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation() && !matches!(c, '“' | '”' | '‘' | '’' | '…'))
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two answers are equivalent when their normalised strings are equal.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedExactMatch;

impl EquivalencePolicy for NormalizedExactMatch {
    fn name(&self) -> String {
        "normalized_exact_match".into()
    }

    fn equivalent(&self, _question: &str, a: &str, b: &str) -> Result<bool> {
        Ok(normalize_answer(a) == normalize_answer(b))
    }
}

/// Delegates to an external program.
///
/// The program receives one JSON object `{"question", "a", "b"}` on stdin
/// and must print `same` or `different`.
#[derive(Debug, Clone)]
pub struct CommandJudge {
    pub program: String,
    pub args: Vec<String>,
}

impl EquivalencePolicy for CommandJudge {
    fn name(&self) -> String {
        format!("judge:{}", self.program)
    }

    fn equivalent(&self, question: &str, a: &str, b: &str) -> Result<bool> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Judge(format!("{}: {e}", self.program)))?;
        let request = serde_json::json!({ "question": question, "a": a, "b": b });
        child.stdin.take().expect("piped stdin").write_all(format!("{request}\n").as_bytes())?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::Judge(format!("{} exited with {}", self.program, out.status)));
        }
        match String::from_utf8_lossy(&out.stdout).trim().to_lowercase().as_str() {
            "same" => Ok(true),
            "different" => Ok(false),
            other => Err(Error::Judge(format!("unexpected verdict {other:?}"))),
        }
    }
}

/// Serializable choice of equivalence policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum EquivalenceConfig {
    #[default]
    NormalizedExactMatch,
    Judge {
        command: Vec<String>,
    },
}

impl EquivalenceConfig {
    pub fn build(&self) -> Result<Box<dyn EquivalencePolicy>> {
        match self {
            Self::NormalizedExactMatch => Ok(Box::new(NormalizedExactMatch)),
            Self::Judge { command } => {
                let (program, args) =
                    command.split_first().ok_or_else(|| Error::Config("judge command is empty".into()))?;
                Ok(Box::new(CommandJudge { program: program.clone(), args: args.to_vec() }))
            }
        }
    }
}
