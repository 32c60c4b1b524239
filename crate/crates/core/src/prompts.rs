//! Prompt templates and the two-pass rendering used by LI.
//!
//! Every example is rendered twice with the same instruction and question:
//! once after the context (`context ⏎ query`) and once with the empty
//! context (`query`). Both sequences start with the model's
//! begin-of-sequence token, and the scored target span must tokenize to the
//! same ids in both.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::model::{ModelHandle, TokenSequence};
use crate::{Error, Result};

/// Between context and query, and between instruction and question.
pub const SEPARATOR: &str = "\n";

pub const BINARY_INSTRUCTION: &str = "Is this answerable?";
pub const OPEN_ENDED_INSTRUCTION: &str = "Answer the question or say don't know";
pub const CERTAINTY_INSTRUCTION: &str = "Are you certain about the answer?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    None,
    OpenEnded,
    Binary,
    Certainty,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    BeforeQuestion,
    AfterQuestion,
}

/// Which part of the query is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredSpan {
    #[default]
    InstructionAndQuestion,
    QuestionOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub kind: TemplateKind,
    #[serde(default)]
    pub instruction_text: String,
    #[serde(default)]
    pub placement: Placement,
}

impl PromptTemplate {
    fn builtin(id: &str, kind: TemplateKind, text: &str) -> Self {
        Self {
            template_id: id.to_string(),
            kind,
            instruction_text: text.to_string(),
            placement: Placement::BeforeQuestion,
        }
    }

    pub fn none() -> Self {
        Self::builtin("none", TemplateKind::None, "")
    }

    pub fn open_ended() -> Self {
        Self::builtin("open_ended", TemplateKind::OpenEnded, OPEN_ENDED_INSTRUCTION)
    }

    pub fn binary() -> Self {
        Self::builtin("binary", TemplateKind::Binary, BINARY_INSTRUCTION)
    }

    pub fn certainty() -> Self {
        Self::builtin("certainty", TemplateKind::Certainty, CERTAINTY_INSTRUCTION)
    }

    pub fn custom(template_id: impl Into<String>, instruction_text: impl Into<String>) -> Self {
        Self {
            template_id: template_id.into(),
            kind: TemplateKind::Custom,
            instruction_text: instruction_text.into(),
            placement: Placement::BeforeQuestion,
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.template_id.is_empty() {
            return Err(Error::InvalidArgument("template id is empty".into()));
        }
        match (self.kind, self.instruction_text.trim().is_empty()) {
            (TemplateKind::None, false) => {
                Err(Error::InvalidArgument(format!("template {} has kind none but an instruction", self.template_id)))
            }
            (TemplateKind::None, true) => Ok(()),
            (_, true) => Err(Error::InvalidArgument(format!("template {} has no instruction text", self.template_id))),
            (_, false) => Ok(()),
        }
    }

    fn instruction(&self) -> Option<&str> {
        match self.kind {
            TemplateKind::None => None,
            _ => Some(self.instruction_text.as_str()),
        }
    }

    /// The query text and the byte offset where scoring starts.
    fn query(&self, question: &str, scope: ScoredSpan) -> (String, usize) {
        match (self.instruction(), self.placement, scope) {
            (None, ..) => (question.to_string(), 0),
            (Some(instr), Placement::BeforeQuestion, ScoredSpan::InstructionAndQuestion) => {
                (format!("{instr}{SEPARATOR}{question}"), 0)
            }
            (Some(instr), Placement::BeforeQuestion, ScoredSpan::QuestionOnly) => {
                (format!("{instr}{SEPARATOR}{question}"), instr.len() + SEPARATOR.len())
            }
            (Some(instr), Placement::AfterQuestion, ScoredSpan::InstructionAndQuestion) => {
                (format!("{question}{SEPARATOR}{instr}"), 0)
            }
            // A trailing instruction cannot affect causal scores of the
            // question, so it is dropped.
            (Some(_), Placement::AfterQuestion, ScoredSpan::QuestionOnly) => (question.to_string(), 0),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.template_id)
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    /// `none`, `open_ended`, `binary`, `certainty` or `custom:<instruction>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::none()),
            "open_ended" => Ok(Self::open_ended()),
            "binary" => Ok(Self::binary()),
            "certainty" => Ok(Self::certainty()),
            other => match other.strip_prefix("custom:") {
                Some(text) if !text.trim().is_empty() => Ok(Self::custom(other, text.trim())),
                _ => Err(Error::InvalidArgument(format!("unknown template {other:?}"))),
            },
        }
    }
}

/// The two token sequences LI compares for one example and template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPair {
    pub example_id: String,
    pub template_id: String,
    pub null_pass: TokenSequence,
    pub ctx_pass: TokenSequence,
    pub target_span_null: Range<usize>,
    pub target_span_ctx: Range<usize>,
    /// Text of the with-context pass (without the begin-of-sequence token).
    pub ctx_text: String,
}

impl RenderedPair {
    /// Both spans must be non-empty, run to the end of their pass, start
    /// after at least one conditioning token, and hold identical ids.
    pub fn check_spans(&self) -> Result<()> {
        let mismatch = |reason: String| Error::SpanMismatch { example_id: self.example_id.clone(), reason };
        for (name, seq, span) in
            [("null", &self.null_pass, &self.target_span_null), ("ctx", &self.ctx_pass, &self.target_span_ctx)]
        {
            if span.start == 0 || span.start >= span.end || span.end != seq.len() {
                return Err(mismatch(format!("{name} span {span:?} invalid for {} tokens", seq.len())));
            }
        }
        if self.null_pass.ids[self.target_span_null.clone()] != self.ctx_pass.ids[self.target_span_ctx.clone()] {
            return Err(mismatch("target token ids differ between passes".into()));
        }
        Ok(())
    }

    pub fn target_ids(&self) -> &[u32] {
        &self.ctx_pass.ids[self.target_span_ctx.clone()]
    }
}

/// Index of the first token starting at or after byte `char_start`, provided
/// no token straddles that boundary. Index 0 (begin-of-sequence) is skipped.
fn span_start(seq: &TokenSequence, char_start: usize) -> Option<usize> {
    let idx = (1..seq.len()).find(|&i| seq.offsets[i].0 >= char_start)?;
    (seq.offsets[idx - 1].1 <= char_start).then_some(idx)
}

fn render_pass(model: &ModelHandle, text: &str, char_start: usize) -> Result<(TokenSequence, Option<Range<usize>>)> {
    let seq = model.tokenize_with_bos(text)?;
    let span = span_start(&seq, char_start).map(|s| s..seq.len());
    Ok((seq, span))
}

/// Renders `example` under `template` into the null-context and
/// with-context passes.
///
/// If boundary merges make the target tokenize differently in the two
/// passes, the null pass is retried with the separator in place of the
/// empty context; a remaining mismatch is reported as
/// [`Error::SpanMismatch`] and the example should be skipped.
pub fn render_pair(
    example: &Example,
    template: &PromptTemplate,
    model: &ModelHandle,
    scope: ScoredSpan,
) -> Result<RenderedPair> {
    template.validate()?;
    let (query, scored_from) = template.query(&example.question, scope);
    let (ctx_text, ctx_start) = if example.context.is_empty() {
        (query.clone(), scored_from)
    } else {
        let prefix = example.context.len() + SEPARATOR.len();
        (format!("{}{SEPARATOR}{query}", example.context), prefix + scored_from)
    };

    let (ctx_pass, ctx_span) = render_pass(model, &ctx_text, ctx_start)?;
    let mismatch =
        |reason: &str| Error::SpanMismatch { example_id: example.example_id.clone(), reason: reason.to_string() };
    let ctx_span = ctx_span.ok_or_else(|| mismatch("target boundary splits a token in the context pass"))?;

    let attempts = [(query.clone(), scored_from), (format!("{SEPARATOR}{query}"), scored_from + SEPARATOR.len())];
    for (null_text, null_start) in attempts {
        let (null_pass, null_span) = render_pass(model, &null_text, null_start)?;
        let Some(null_span) = null_span else { continue };
        let pair = RenderedPair {
            example_id: example.example_id.clone(),
            template_id: template.template_id.clone(),
            null_pass,
            ctx_pass: ctx_pass.clone(),
            target_span_null: null_span,
            target_span_ctx: ctx_span.clone(),
            ctx_text: ctx_text.clone(),
        };
        if pair.check_spans().is_ok() {
            return Ok(pair);
        }
    }
    Err(mismatch("target tokens differ between the null and context passes"))
}
