//! Comparison scorers: generated yes/no answers, P(True), predictive and
//! length-normalised entropy, and semantic entropy.
//!
//! Every value is oriented so that higher means more confident, and hence
//! "answerable"; entropies are negated.

mod equivalence;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use equivalence::{normalize_answer, CommandJudge, EquivalenceConfig, EquivalencePolicy, NormalizedExactMatch};

use crate::datasets::Example;
use crate::model::{softmax, Decoding, GenerateOptions, Generation, ModelHandle, Usage};
use crate::prompts::RenderedPair;
use crate::{Error, Result};

/// Appended to the with-context pass before generating an answer.
pub const ANSWER_CUE: &str = "\nAnswer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AnswerMatch,
    PTrue,
    PredEntropy,
    NormEntropy,
    SemanticEntropy,
    PviFirst,
    PviLast,
    Li,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::AnswerMatch,
        Method::PTrue,
        Method::PredEntropy,
        Method::NormEntropy,
        Method::SemanticEntropy,
        Method::PviFirst,
        Method::PviLast,
        Method::Li,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AnswerMatch => "answer_match",
            Method::PTrue => "p_true",
            Method::PredEntropy => "pred_entropy",
            Method::NormEntropy => "norm_entropy",
            Method::SemanticEntropy => "semantic_entropy",
            Method::PviFirst => "pvi_first",
            Method::PviLast => "pvi_last",
            Method::Li => "li",
        }
    }

    /// Methods read off the two LI passes rather than a separate scorer.
    pub fn uses_li_profile(self) -> bool {
        matches!(self, Method::PviFirst | Method::PviLast | Method::Li)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Method-specific details kept next to a score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreAux {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_sizes: Option<Vec<usize>>,
    pub forward_passes: u64,
    pub tokens_processed: u64,
}

impl ScoreAux {
    fn with_usage(mut self, usage: Usage) -> Self {
        self.forward_passes = usage.forward_passes;
        self.tokens_processed = usage.tokens_processed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub example_id: String,
    pub method: Method,
    pub value: f64,
    pub aux: ScoreAux,
}

// ---------------------------------------------------------------------------
// Generated yes/no answers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Undecided,
}

const YES_WORDS: &[&str] = &["yes", "yeah", "yep", "yup", "true", "answerable", "correct", "sure", "affirmative"];
const NO_WORDS: &[&str] =
    &["no", "nope", "false", "unanswerable", "not", "cannot", "cant", "dont", "unknown", "incorrect", "negative"];

/// Reads a yes/no verdict from free text: after normalisation, the first
/// word found in either word list decides.
pub fn parse_verdict(response: &str) -> Verdict {
    for word in normalize_answer(response).split(' ') {
        if YES_WORDS.contains(&word) {
            return Verdict::Yes;
        }
        if NO_WORDS.contains(&word) {
            return Verdict::No;
        }
    }
    Verdict::Undecided
}

/// Token ids of the with-context pass followed by [`ANSWER_CUE`].
pub fn answer_prompt(model: &ModelHandle, pair: &RenderedPair) -> Result<Vec<u32>> {
    let mut ids = pair.ctx_pass.ids.clone();
    ids.extend(model.tokenize(ANSWER_CUE)?.ids);
    Ok(ids)
}

/// One-line greedy answer to the with-context pass.
pub fn greedy_answer(model: &ModelHandle, pair: &RenderedPair, max_tokens: usize) -> Result<Generation> {
    let opts = GenerateOptions { decoding: Decoding::Greedy, max_tokens, stop_at_newline: true };
    model.generate_ids(&answer_prompt(model, pair)?, &opts)
}

/// 1 when the greedy yes/no response agrees with the gold answerability
/// label ("yes" for answerable), else 0. Unparseable or empty responses
/// score 0 and are flagged.
pub fn answer_match(
    model: &ModelHandle,
    pair: &RenderedPair,
    example: &Example,
    max_tokens: usize,
) -> Result<BaselineScore> {
    let before = model.usage();
    let generation = greedy_answer(model, pair, max_tokens)?;
    Ok(answer_match_of(example, &generation, model.usage().since(before)))
}

/// [`answer_match`] on an existing greedy generation.
pub fn answer_match_of(example: &Example, generation: &Generation, usage: Usage) -> BaselineScore {
    let verdict = parse_verdict(&generation.text);
    let value = match verdict {
        Verdict::Yes if example.answerable => 1.0,
        Verdict::No if !example.answerable => 1.0,
        _ => 0.0,
    };
    let aux = ScoreAux {
        response: Some(generation.text.clone()),
        flagged: verdict == Verdict::Undecided,
        generated_tokens: Some(generation.ids.len()),
        ..Default::default()
    };
    BaselineScore {
        example_id: example.example_id.clone(),
        method: Method::AnswerMatch,
        value,
        aux: aux.with_usage(usage),
    }
}

// ---------------------------------------------------------------------------
// P(True)
// ---------------------------------------------------------------------------

/// Fixed few-shot frame for P(True). `{context}`, `{question}` and
/// `{answer}` are substituted; demonstrations end with `true_text` or
/// `false_text` followed by `separator`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PTrueFrame {
    pub template: String,
    pub true_text: String,
    pub false_text: String,
    pub separator: String,
}

impl Default for PTrueFrame {
    fn default() -> Self {
        Self {
            template: "Context: {context}\nQuestion: {question}\nProposed answer: {answer}\n\
                       Is the proposed answer:\n (A) True\n (B) False\nThe proposed answer is:"
                .into(),
            true_text: " True".into(),
            false_text: " False".into(),
            separator: "\n\n".into(),
        }
    }
}

impl PTrueFrame {
    /// The query block for `example` with `answer` filled in.
    pub fn render(&self, example: &Example, answer: &str) -> String {
        self.template
            .replace("{context}", &example.context)
            .replace("{question}", &example.question)
            .replace("{answer}", answer)
    }

    /// A solved block: first gold answer (or "unknown") and its verdict.
    pub fn demonstration(&self, demo: &Example) -> String {
        let answer = demo.gold_answers.first().map(String::as_str).unwrap_or("unknown");
        let verdict = if demo.answerable { &self.true_text } else { &self.false_text };
        format!("{}{verdict}{}", self.render(demo, answer), self.separator)
    }
}

/// Picks `k` demonstrations from `pool`, never `exclude_id`, in pool order.
pub fn select_demos(pool: &[Example], exclude_id: &str, k: usize, seed: u64) -> Result<Vec<Example>> {
    let candidates: Vec<&Example> = pool.iter().filter(|e| e.example_id != exclude_id).collect();
    if candidates.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k} demonstrations requested, only {} available",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Probability of the first token of `frame.true_text` after `k`
/// demonstrations and the framed `proposed_answer` for `example`.
///
/// Each demonstration and the final query are prefilled as separate
/// chunks into one cache, so the cost is `k + 1` forward passes.
pub fn p_true(
    model: &ModelHandle,
    example: &Example,
    proposed_answer: &str,
    demos: &[Example],
    k: usize,
    frame: &PTrueFrame,
) -> Result<BaselineScore> {
    if demos.len() < k {
        return Err(Error::InvalidArgument(format!("p_true needs {k} demonstrations, got {}", demos.len())));
    }
    if demos[..k].iter().any(|d| d.example_id == example.example_id) {
        return Err(Error::InvalidArgument(format!("{} appears among its own demonstrations", example.example_id)));
    }
    let true_id = *model
        .tokenize(&frame.true_text)?
        .ids
        .first()
        .ok_or_else(|| Error::InvalidArgument("true_text tokenizes to nothing".into()))?;

    let mut chunks = Vec::with_capacity(k + 1);
    for demo in &demos[..k] {
        chunks.push(model.tokenize(&frame.demonstration(demo))?.ids);
    }
    chunks.push(model.tokenize(&frame.render(example, proposed_answer))?.ids);
    chunks[0].insert(0, model.model().bos_id());

    let before = model.usage();
    let logits = model.prefill_chunks(&chunks)?;
    let probs = softmax(ndarray::ArrayView1::from(&logits));
    Ok(BaselineScore {
        example_id: example.example_id.clone(),
        method: Method::PTrue,
        value: probs[true_id as usize],
        aux: ScoreAux { response: Some(proposed_answer.to_string()), ..Default::default() }
            .with_usage(model.usage().since(before)),
    })
}

// ---------------------------------------------------------------------------
// Entropies
// ---------------------------------------------------------------------------

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Negated mean entropy (bits) of the full next-token distribution over the
/// steps of `generation`.
pub fn predictive_entropy_of(example_id: &str, generation: &Generation, usage: Usage) -> Result<BaselineScore> {
    if generation.step_entropies.is_empty() {
        return Err(Error::Empty("generated answer"));
    }
    Ok(BaselineScore {
        example_id: example_id.to_string(),
        method: Method::PredEntropy,
        value: -mean(&generation.step_entropies),
        aux: ScoreAux {
            response: Some(generation.text.clone()),
            generated_tokens: Some(generation.step_entropies.len()),
            ..Default::default()
        }
        .with_usage(usage),
    })
}

/// Mean log₂-likelihood per generated token, i.e. the negated
/// length-normalised negative log-likelihood.
pub fn normalized_entropy_of(example_id: &str, generation: &Generation, usage: Usage) -> Result<BaselineScore> {
    if generation.token_log_probs.is_empty() {
        return Err(Error::Empty("generated answer"));
    }
    Ok(BaselineScore {
        example_id: example_id.to_string(),
        method: Method::NormEntropy,
        value: mean(&generation.token_log_probs),
        aux: ScoreAux {
            response: Some(generation.text.clone()),
            generated_tokens: Some(generation.token_log_probs.len()),
            ..Default::default()
        }
        .with_usage(usage),
    })
}

pub fn predictive_entropy(model: &ModelHandle, pair: &RenderedPair, max_tokens: usize) -> Result<BaselineScore> {
    let before = model.usage();
    let generation = greedy_answer(model, pair, max_tokens)?;
    predictive_entropy_of(&pair.example_id, &generation, model.usage().since(before))
}

pub fn normalized_entropy(model: &ModelHandle, pair: &RenderedPair, max_tokens: usize) -> Result<BaselineScore> {
    let before = model.usage();
    let generation = greedy_answer(model, pair, max_tokens)?;
    normalized_entropy_of(&pair.example_id, &generation, model.usage().since(before))
}

// ---------------------------------------------------------------------------
// Semantic entropy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub n_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { n_samples: 10, temperature: 1.0, max_tokens: 16, seed: 0 }
    }
}

/// Groups answers greedily: each joins the first cluster whose founding
/// answer it is equivalent to. Returns cluster sizes, largest first.
pub fn cluster_answers(question: &str, answers: &[String], policy: &dyn EquivalencePolicy) -> Result<Vec<usize>> {
    let mut founders: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    'answers: for answer in answers {
        for (i, founder) in founders.iter().enumerate() {
            if policy.equivalent(question, founder, answer)? {
                sizes[i] += 1;
                continue 'answers;
            }
        }
        founders.push(answer);
        sizes.push(1);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sizes)
}

/// Entropy in bits of the empirical cluster distribution.
pub fn cluster_entropy(sizes: &[usize]) -> f64 {
    let n: usize = sizes.iter().sum();
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

/// A solved question-answer block used as a sampling demonstration.
pub fn answer_demonstration(demo: &Example) -> String {
    let answer = demo.gold_answers.first().map(String::as_str).unwrap_or("unknown");
    format!("{}\n{}{ANSWER_CUE} {answer}\n\n", demo.context, demo.question)
}

/// Negated entropy over semantic clusters of `n_samples` sampled answers.
/// Sample `i` uses seed `params.seed + i`; one forward pass per sample.
/// `demos` (possibly empty) are placed after the begin-of-sequence token,
/// ahead of the with-context pass.
pub fn semantic_entropy(
    model: &ModelHandle,
    pair: &RenderedPair,
    question: &str,
    demos: &[Example],
    params: &SamplingParams,
    equivalence: &dyn EquivalencePolicy,
) -> Result<BaselineScore> {
    if params.n_samples < 2 {
        return Err(Error::InvalidArgument("semantic entropy needs at least 2 samples".into()));
    }
    let before = model.usage();
    let mut prompt = answer_prompt(model, pair)?;
    if !demos.is_empty() {
        let shots: String = demos.iter().map(answer_demonstration).collect();
        let ids = model.tokenize(&shots)?.ids;
        prompt.splice(1..1, ids);
    }
    let mut answers = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let decoding = Decoding::Sample { temperature: params.temperature, seed: params.seed.wrapping_add(i as u64) };
        let opts = GenerateOptions { decoding, max_tokens: params.max_tokens, stop_at_newline: true };
        answers.push(model.generate_ids(&prompt, &opts)?.text);
    }
    if answers.iter().all(|a| normalize_answer(a).is_empty()) {
        return Err(Error::Empty("every sampled answer"));
    }
    let sizes = cluster_answers(question, &answers, equivalence)?;
    Ok(BaselineScore {
        example_id: pair.example_id.clone(),
        method: Method::SemanticEntropy,
        value: -cluster_entropy(&sizes),
        aux: ScoreAux { cluster_sizes: Some(sizes), ..Default::default() }.with_usage(model.usage().since(before)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecodeSession, HeadNormPolicy, LanguageModel, LayerSelection, TokenSequence};
    use crate::prompts::{render_pair, PromptTemplate, ScoredSpan};
    use ndarray::{Array2, ArrayView2};

    /// Whitespace-delimited word tokenizer over a fixed vocabulary with
    /// position-independent next-token logits.
    struct FixedModel {
        vocab: Vec<&'static str>,
        logits: Vec<f64>,
    }

    const VOCAB: &[&str] = &["<s>", "</s>", "<unk>", " True", " False", " yes", " no", "\n", " maybe"];

    impl FixedModel {
        fn new(logits: Vec<f64>) -> Self {
            assert_eq!(logits.len(), VOCAB.len());
            Self { vocab: VOCAB.to_vec(), logits }
        }

        fn with_probability(id: usize, p: f64) -> Self {
            let rest = (1.0 - p) / (VOCAB.len() - 1) as f64;
            Self::new((0..VOCAB.len()).map(|i| if i == id { p.ln() } else { rest.ln() }).collect())
        }
    }

    impl LanguageModel for FixedModel {
        fn model_id(&self) -> &str {
            "fixed"
        }
        fn num_layers(&self) -> usize {
            1
        }
        fn vocab_size(&self) -> usize {
            self.vocab.len()
        }
        fn context_window(&self) -> usize {
            10_000
        }
        fn bos_id(&self) -> u32 {
            0
        }
        fn eos_ids(&self) -> &[u32] {
            &[1]
        }
        fn tokenize(&self, text: &str) -> Result<TokenSequence> {
            let mut ids = Vec::new();
            let mut offsets = Vec::new();
            let mut start = 0;
            let bytes = text.as_bytes();
            while start < bytes.len() {
                let mut end = start;
                while end < bytes.len() && bytes[end] == b' ' {
                    end += 1;
                }
                if end < bytes.len() && bytes[end] == b'\n' {
                    end += 1;
                } else {
                    while end < bytes.len() && !matches!(bytes[end], b' ' | b'\n') {
                        end += 1;
                    }
                }
                let piece = &text[start..end];
                ids.push(self.vocab.iter().position(|v| *v == piece).unwrap_or(2) as u32);
                offsets.push((start, end));
                start = end;
            }
            Ok(TokenSequence::new(ids, offsets))
        }
        fn decode(&self, ids: &[u32]) -> Result<String> {
            Ok(ids.iter().map(|&i| self.vocab[i as usize]).collect())
        }
        fn block_outputs(&self, ids: &[u32]) -> Result<Vec<Array2<f64>>> {
            Ok(vec![Array2::zeros((ids.len(), 1))])
        }
        fn final_norm(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
            hidden.to_owned()
        }
        fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
            Array2::from_shape_fn((hidden.nrows(), self.logits.len()), |(_, j)| self.logits[j])
        }
        fn session(&self) -> Box<dyn DecodeSession + '_> {
            Box::new(FixedSession { model: self, position: 0 })
        }
    }

    struct FixedSession<'a> {
        model: &'a FixedModel,
        position: usize,
    }

    impl DecodeSession for FixedSession<'_> {
        fn extend(&mut self, ids: &[u32]) -> Result<Array2<f64>> {
            self.position += ids.len();
            Ok(self.model.head(Array2::zeros((ids.len(), 1)).view()))
        }
        fn position(&self) -> usize {
            self.position
        }
    }

    fn handle(model: FixedModel) -> ModelHandle {
        ModelHandle::new(Box::new(model), &LayerSelection::All, HeadNormPolicy::ApplyFinalNorm).unwrap()
    }

    fn example(id: &str, answerable: bool) -> Example {
        Example {
            example_id: id.into(),
            context: "some words here".into(),
            question: "maybe?".into(),
            gold_answers: if answerable { vec!["yes".into()] } else { vec![] },
            answerable,
            source: "test".into(),
        }
    }

    fn pair(model: &ModelHandle) -> RenderedPair {
        render_pair(&example("e", true), &PromptTemplate::none(), model, ScoredSpan::default()).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("entropy".parse::<Method>().is_err());
    }

    #[test]
    fn verdict_table() {
        let table = [
            ("Yes.", Verdict::Yes),
            ("yes", Verdict::Yes),
            ("YES!", Verdict::Yes),
            ("I think yes", Verdict::Yes),
            ("Yeah, it is.", Verdict::Yes),
            ("True", Verdict::Yes),
            ("It is answerable.", Verdict::Yes),
            ("Sure", Verdict::Yes),
            ("No", Verdict::No),
            ("no.", Verdict::No),
            ("Nope", Verdict::No),
            ("False", Verdict::No),
            ("I don't know", Verdict::No),
            ("It cannot be answered", Verdict::No),
            ("unanswerable", Verdict::No),
            ("Not from this text", Verdict::No),
            ("unknown", Verdict::No),
            ("The answer is Paris", Verdict::Undecided),
            ("", Verdict::Undecided),
            ("maybe", Verdict::Undecided),
        ];
        for (text, verdict) in table {
            assert_eq!(parse_verdict(text), verdict, "{text:?}");
        }
    }

    #[test]
    fn answer_match_scores_agreement() {
        let m = handle(FixedModel::with_probability(5, 0.9));
        let p = pair(&m);
        let ans = answer_match(&m, &p, &example("e", true), 1).unwrap();
        assert_eq!(ans.value, 1.0);
        assert_eq!(ans.aux.response.as_deref(), Some("yes"));
        assert_eq!(answer_match(&m, &p, &example("e", false), 1).unwrap().value, 0.0);

        let m = handle(FixedModel::with_probability(8, 0.9));
        let flagged = answer_match(&m, &pair(&m), &example("e", true), 1).unwrap();
        assert_eq!(flagged.value, 0.0);
        assert!(flagged.aux.flagged);
    }

    #[test]
    fn p_true_reads_the_true_token() {
        let m = handle(FixedModel::with_probability(3, 0.9));
        let demos: Vec<Example> = (0..10).map(|i| example(&format!("d{i}"), i % 2 == 0)).collect();
        let s = p_true(&m, &example("e", true), "yes", &demos, 10, &PTrueFrame::default()).unwrap();
        assert!((s.value - 0.9).abs() < 1e-12);
        assert_eq!(s.aux.forward_passes, 11);

        let zero_shot = p_true(&m, &example("e", true), "yes", &[], 0, &PTrueFrame::default()).unwrap();
        assert_eq!(zero_shot.aux.forward_passes, 1);
        assert!(p_true(&m, &example("e", true), "yes", &demos[..3], 4, &PTrueFrame::default()).is_err());
        assert!(p_true(&m, &example("d0", true), "yes", &demos, 2, &PTrueFrame::default()).is_err());
    }

    #[test]
    fn demo_selection_excludes_the_example() {
        let pool: Vec<Example> = (0..12).map(|i| example(&format!("d{i}"), true)).collect();
        let demos = select_demos(&pool, "d3", 11, 7).unwrap();
        assert_eq!(demos.len(), 11);
        assert!(demos.iter().all(|d| d.example_id != "d3"));
        assert_eq!(select_demos(&pool, "d3", 5, 7).unwrap(), select_demos(&pool, "d3", 5, 7).unwrap());
        assert!(select_demos(&pool, "d3", 12, 7).is_err());
    }

    #[test]
    fn uniform_distribution_has_log_v_entropy() {
        let m = handle(FixedModel::new(vec![0.0; VOCAB.len()]));
        let s = predictive_entropy(&m, &pair(&m), 3).unwrap();
        assert!((s.value + (VOCAB.len() as f64).log2()).abs() < 1e-12);
        let n = normalized_entropy(&m, &pair(&m), 3).unwrap();
        assert!((n.value + (VOCAB.len() as f64).log2()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_distribution_has_zero_entropy() {
        let mut logits = vec![0.0; VOCAB.len()];
        logits[1] = 1000.0;
        let m = handle(FixedModel::new(logits));
        assert_eq!(predictive_entropy(&m, &pair(&m), 4).unwrap().value, 0.0);
        assert_eq!(normalized_entropy(&m, &pair(&m), 4).unwrap().value, 0.0);
    }

    #[test]
    fn two_half_probability_tokens_give_one_bit() {
        let g = Generation {
            ids: vec![5, 6],
            text: "yes no".into(),
            token_log_probs: vec![-1.0, -1.0],
            step_entropies: vec![1.0, 1.0],
        };
        assert_eq!(normalized_entropy_of("e", &g, Usage::default()).unwrap().value, -1.0);
        let empty = Generation { ids: vec![], text: String::new(), token_log_probs: vec![], step_entropies: vec![] };
        assert!(normalized_entropy_of("e", &empty, Usage::default()).is_err());
        assert!(predictive_entropy_of("e", &empty, Usage::default()).is_err());
    }

    #[test]
    fn cluster_entropy_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let same = cluster_answers("q", &s(&["Paris", "paris.", "PARIS"]), &NormalizedExactMatch).unwrap();
        assert_eq!(same, vec![3]);
        assert_eq!(cluster_entropy(&same), 0.0);
        let two = cluster_answers("q", &s(&["a", "b", "a", "b"]), &NormalizedExactMatch).unwrap();
        assert_eq!(cluster_entropy(&two), 1.0);
        let three = cluster_answers("q", &s(&["x", "y", "x", "z", "y", "x"]), &NormalizedExactMatch).unwrap();
        assert_eq!(three, vec![3, 2, 1]);
        let expected =
            -(0.5f64 * 0.5f64.log2() + (1.0 / 3.0) * (1.0f64 / 3.0).log2() + (1.0 / 6.0) * (1.0f64 / 6.0).log2());
        assert!((cluster_entropy(&three) - expected).abs() < 1e-12);
        assert!((cluster_entropy(&three) - 1.459).abs() < 1e-3);
    }

    #[test]
    fn semantic_entropy_costs_one_pass_per_sample() {
        let m = handle(FixedModel::new(vec![0.0, -50.0, 0.0, 0.0, 0.0, 1.0, 1.0, -50.0, 0.0]));
        let params = SamplingParams { n_samples: 6, max_tokens: 1, ..Default::default() };
        let s = semantic_entropy(&m, &pair(&m), "maybe?", &[], &params, &NormalizedExactMatch).unwrap();
        assert_eq!(s.aux.forward_passes, 6);
        assert_eq!(s.aux.cluster_sizes.as_ref().unwrap().iter().sum::<usize>(), 6);
        assert!(s.value <= 0.0);
        let again = semantic_entropy(&m, &pair(&m), "maybe?", &[], &params, &NormalizedExactMatch).unwrap();
        assert_eq!(s, again);
        // demonstrations lengthen the prompt but not the pass count
        let demo = Example {
            example_id: "d".into(),
            context: "yes".into(),
            question: "no".into(),
            gold_answers: vec![],
            answerable: false,
            source: String::new(),
        };
        let shot = semantic_entropy(&m, &pair(&m), "maybe?", &[demo], &params, &NormalizedExactMatch).unwrap();
        assert_eq!(shot.aux.forward_passes, 6);
        assert!(shot.aux.tokens_processed > s.aux.tokens_processed);
        let one = SamplingParams { n_samples: 1, ..params };
        assert!(semantic_entropy(&m, &pair(&m), "maybe?", &[], &one, &NormalizedExactMatch).is_err());
    }
}
