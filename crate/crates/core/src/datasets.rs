//! QA corpora with answerability labels.
//!
//! Native formats are mapped onto [`Example`]:
//!
//! | format          | unanswerable when                                  |
//! |-----------------|----------------------------------------------------|
//! | `coqa_like`     | the turn's answer `input_text` is `unknown`        |
//! | `quac_like`     | `orig_answer.text` (else first answer) is `CANNOTANSWER` |
//! | `condaqa_like`  | `label` is `DON'T KNOW`                            |
//! | `generic_jsonl` | `answerable` is `false`                            |
//!
//! Conversational corpora are flattened to one example per turn, with the
//! previous turns (up to [`LoadOptions::history_turns`]) appended to the
//! passage as `Q: …` / `A: …` lines.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub context: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub answerable: bool,
    pub source: String,
}

impl Example {
    fn checked(self) -> Option<Self> {
        let ok = !self.example_id.is_empty()
            && !self.question.trim().is_empty()
            && (!self.answerable || !self.gold_answers.is_empty());
        ok.then_some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    CoqaLike,
    QuacLike,
    CondaqaLike,
    GenericJsonl,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coqa_like" => Ok(Self::CoqaLike),
            "quac_like" => Ok(Self::QuacLike),
            "condaqa_like" => Ok(Self::CondaqaLike),
            "generic_jsonl" => Ok(Self::GenericJsonl),
            other => Err(Error::InvalidArgument(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Previous conversation turns folded into the context.
    pub history_turns: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { history_turns: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub examples: Vec<Example>,
    /// Records dropped as malformed.
    pub skipped: usize,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset> {
    load_dataset_with(path, format, &LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<LoadedDataset> {
    let fail = |reason: String| Error::Dataset { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let source = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();

    let records: Vec<Option<Example>> = match format {
        DatasetFormat::GenericJsonl => jsonl(&text).map(|v| v.and_then(|v| generic(&v, &source))).collect(),
        DatasetFormat::CondaqaLike => {
            jsonl(&text).enumerate().map(|(i, v)| v.and_then(|v| condaqa(&v, i, &source))).collect()
        }
        DatasetFormat::CoqaLike => {
            let root: Value = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
            coqa(&root, opts, &source).ok_or_else(|| fail("missing top-level data array".into()))?
        }
        DatasetFormat::QuacLike => {
            let root: Value = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
            quac(&root, opts, &source).ok_or_else(|| fail("missing top-level data array".into()))?
        }
    };

    let total = records.len();
    let mut seen = BTreeSet::new();
    let examples: Vec<Example> = records
        .into_iter()
        .flatten()
        .filter_map(Example::checked)
        .filter(|e| seen.insert(e.example_id.clone()))
        .collect();
    let skipped = total - examples.len();
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed record(s)", path.display());
    }
    if examples.is_empty() {
        return Err(fail("no usable records".into()));
    }
    Ok(LoadedDataset { examples, skipped })
}

fn jsonl(text: &str) -> impl Iterator<Item = Option<Value>> + '_ {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).ok())
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key)?.as_str()
}

fn generic(v: &Value, source: &str) -> Option<Example> {
    let answers = match v.get("answers") {
        None | Some(Value::Null) => Vec::new(),
        Some(a) => a.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<_>>()?,
    };
    Some(Example {
        example_id: str_field(v, "id")?.to_string(),
        context: str_field(v, "context").unwrap_or_default().to_string(),
        question: str_field(v, "question")?.to_string(),
        gold_answers: answers,
        answerable: v.get("answerable")?.as_bool()?,
        source: source.to_string(),
    })
}

fn condaqa(v: &Value, index: usize, source: &str) -> Option<Example> {
    let label = str_field(v, "label")?.trim().to_uppercase();
    let answerable = match label.as_str() {
        "YES" | "NO" => true,
        "DON'T KNOW" | "DONT KNOW" | "DON'T_KNOW" => false,
        _ => return None,
    };
    let id = str_field(v, "QuestionID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-{index}", str_field(v, "PassageID").unwrap_or("condaqa")));
    Some(Example {
        example_id: id,
        context: str_field(v, "sentence1")?.to_string(),
        question: str_field(v, "sentence2")?.to_string(),
        gold_answers: if answerable { vec![label.to_lowercase()] } else { Vec::new() },
        answerable,
        source: source.to_string(),
    })
}

fn with_history(passage: &str, history: &[(String, String)], turns: usize) -> String {
    let start = history.len().saturating_sub(turns);
    let mut context = passage.trim().to_string();
    for (q, a) in &history[start..] {
        context.push_str(&format!("\nQ: {q}\nA: {a}"));
    }
    context
}

fn coqa(root: &Value, opts: &LoadOptions, source: &str) -> Option<Vec<Option<Example>>> {
    let mut out = Vec::new();
    for story in root.get("data")?.as_array()? {
        let (Some(id), Some(passage), Some(questions), Some(answers)) = (
            str_field(story, "id"),
            str_field(story, "story"),
            story.get("questions").and_then(Value::as_array),
            story.get("answers").and_then(Value::as_array),
        ) else {
            out.push(None);
            continue;
        };
        let mut history = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            let turn = q.get("turn_id").and_then(Value::as_u64).unwrap_or(i as u64 + 1);
            let question = str_field(q, "input_text");
            let answer = answers.get(i).and_then(|a| str_field(a, "input_text"));
            let (Some(question), Some(answer)) = (question, answer) else {
                out.push(None);
                continue;
            };
            let answerable = !answer.trim().eq_ignore_ascii_case("unknown");
            out.push(Some(Example {
                example_id: format!("{id}_{turn}"),
                context: with_history(passage, &history, opts.history_turns),
                question: question.to_string(),
                gold_answers: if answerable { vec![answer.to_string()] } else { Vec::new() },
                answerable,
                source: source.to_string(),
            }));
            history.push((question.to_string(), answer.to_string()));
        }
    }
    Some(out)
}

const CANNOTANSWER: &str = "CANNOTANSWER";

fn quac(root: &Value, opts: &LoadOptions, source: &str) -> Option<Vec<Option<Example>>> {
    let mut out = Vec::new();
    for doc in root.get("data")?.as_array()? {
        let Some(paragraphs) = doc.get("paragraphs").and_then(Value::as_array) else {
            out.push(None);
            continue;
        };
        for para in paragraphs {
            let (Some(context), Some(qas)) = (str_field(para, "context"), para.get("qas").and_then(Value::as_array))
            else {
                out.push(None);
                continue;
            };
            let passage = context.trim_end().strip_suffix(CANNOTANSWER).unwrap_or(context).trim_end();
            let mut history = Vec::new();
            for qa in qas {
                let answers: Vec<String> = qa
                    .get("answers")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(|x| str_field(x, "text")).map(str::to_string).collect())
                    .unwrap_or_default();
                let orig = qa.get("orig_answer").and_then(|o| str_field(o, "text")).map(str::to_string);
                let (Some(id), Some(question), Some(primary)) =
                    (str_field(qa, "id"), str_field(qa, "question"), orig.or_else(|| answers.first().cloned()))
                else {
                    out.push(None);
                    continue;
                };
                let answerable = primary.trim() != CANNOTANSWER;
                let gold: Vec<String> = answers.into_iter().filter(|a| a.trim() != CANNOTANSWER).collect();
                let gold = if answerable && gold.is_empty() {
                    vec![primary.clone()]
                } else if answerable {
                    gold
                } else {
                    Vec::new()
                };
                out.push(Some(Example {
                    example_id: id.to_string(),
                    context: with_history(passage, &history, opts.history_turns),
                    question: question.to_string(),
                    gold_answers: gold,
                    answerable,
                    source: source.to_string(),
                }));
                history.push((question.to_string(), primary));
            }
        }
    }
    Some(out)
}

/// Subsamples so that `answerable : unanswerable ≈ ratio`, keeping every
/// example of the limiting class. Kept examples retain their input order.
pub fn balance_answerability(examples: &[Example], ratio: f64, seed: u64) -> Result<Vec<Example>> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} must be positive")));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| examples[i].answerable);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass("balancing needs both answerable and unanswerable examples".into()));
    }
    let (want_pos, want_neg) = if pos.len() as f64 > ratio * neg.len() as f64 {
        (((neg.len() as f64) * ratio).round().max(1.0) as usize, neg.len())
    } else {
        (pos.len(), ((pos.len() as f64) / ratio).round().max(1.0) as usize)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for (class, want) in [(&pos, want_pos.min(pos.len())), (&neg, want_neg.min(neg.len()))] {
        keep.extend(sample(&mut rng, class.len(), want).into_iter().map(|i| class[i]));
    }
    Ok(keep.into_iter().map(|i| examples[i].clone()).collect())
}
