//! Randomised agreement checks between the scoring path and the oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{brute_force_li, build_toy_model, ToyModelSpec, MAX_LAYERS, MAX_VOCAB, MAX_WIDTH};
use crate::datasets::Example;
use crate::li::{cumulative_li, li_profile, pvi_at_layer, LIProfile, PviLayer};
use crate::model::{HeadNormPolicy, LayerSelection, ModelHandle};
use crate::prompts::{render_pair, PromptTemplate, ScoredSpan};
use crate::Result;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=7);
    (0..len).map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char).collect()
}

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

/// A random toy-scale model, template, layer subset, policy and example.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub spec: ToyModelSpec,
    pub layers: LayerSelection,
    pub policy: HeadNormPolicy,
    pub template: PromptTemplate,
    pub scope: ScoredSpan,
    pub example: Example,
}

impl RandomCase {
    pub fn draw(rng: &mut ChaCha8Rng, index: usize) -> Self {
        let spec = ToyModelSpec {
            num_layers: rng.random_range(1..=MAX_LAYERS),
            vocab: rng.random_range(8..=MAX_VOCAB),
            width: rng.random_range(2..=MAX_WIDTH),
            seed: rng.random(),
        };
        let mut layers: Vec<usize> = (1..=spec.num_layers).filter(|_| rng.random_bool(0.6)).collect();
        if layers.is_empty() {
            layers.push(rng.random_range(1..=spec.num_layers));
        }
        let policy = if rng.random_bool(0.5) { HeadNormPolicy::ApplyFinalNorm } else { HeadNormPolicy::RawHidden };
        let template = match rng.random_range(0..4) {
            0 => PromptTemplate::none(),
            1 => PromptTemplate::binary(),
            2 => PromptTemplate::open_ended(),
            _ => PromptTemplate::certainty(),
        };
        let context_words = rng.random_range(0..=30);
        let question_words = rng.random_range(1..=8);
        let example = Example {
            example_id: format!("case{index}"),
            context: sentence(rng, context_words),
            question: format!("{}?", sentence(rng, question_words)),
            gold_answers: vec!["x".into()],
            answerable: true,
            source: "random".into(),
        };
        let scope = if rng.random_bool(0.5) { ScoredSpan::InstructionAndQuestion } else { ScoredSpan::QuestionOnly };
        Self { spec, layers: LayerSelection::Layers(layers), policy, template, scope, example }
    }

    pub fn handle(&self) -> Result<ModelHandle> {
        ModelHandle::new(Box::new(build_toy_model(&self.spec)?), &self.layers, self.policy)
    }
}

/// Largest absolute per-layer difference between two profiles over
/// `h_null`, `h_ctx`, `i_layer` and the total.
pub fn profile_distance(a: &LIProfile, b: &LIProfile) -> f64 {
    assert_eq!(a.layer_ids, b.layer_ids);
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    diff(&a.h_null, &b.h_null)
        .max(diff(&a.h_ctx, &b.h_ctx))
        .max(diff(&a.i_layer, &b.i_layer))
        .max((a.li_total - b.li_total).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub pairs: usize,
    /// Worst per-layer disagreement with the brute-force oracle, bits/token.
    pub max_abs_diff: f64,
    pub worst_case: Option<String>,
    /// Every empty-context profile was exactly zero.
    pub null_identity: bool,
    /// Cumulative and last-layer readouts matched the total exactly.
    pub sums_exact: bool,
}

impl OracleCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_abs_diff <= tolerance && self.null_identity && self.sums_exact
    }
}

/// Scores `n_pairs` random cases with both the regular path and the
/// oracle, plus the empty-context variant of each.
pub fn oracle_check(n_pairs: usize, seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleCheck { pairs: 0, max_abs_diff: 0.0, worst_case: None, null_identity: true, sums_exact: true };
    for i in 0..n_pairs {
        let case = RandomCase::draw(&mut rng, i);
        let handle = case.handle()?;
        let toy = build_toy_model(&case.spec)?;
        let pair = render_pair(&case.example, &case.template, &handle, case.scope)?;
        let fast = li_profile(&handle, &pair)?;
        let slow = brute_force_li(&toy, handle.layer_selection(), case.policy, &pair);
        let d = profile_distance(&fast, &slow);
        if d > out.max_abs_diff || out.worst_case.is_none() {
            out.max_abs_diff = out.max_abs_diff.max(d);
            out.worst_case = Some(format!("{} {:?} {:?}", case.example.example_id, case.spec, case.policy));
        }

        let last = *fast.layer_ids.last().expect("non-empty selection");
        out.sums_exact &= cumulative_li(&fast, last)? == fast.li_total
            && pvi_at_layer(&fast, PviLayer::Last)? == *fast.i_layer.last().expect("non-empty");

        let empty = Example { context: String::new(), ..case.example.clone() };
        let null_pair = render_pair(&empty, &case.template, &handle, case.scope)?;
        let null = li_profile(&handle, &null_pair)?;
        out.null_identity &= null.li_total == 0.0 && null.i_layer.iter().all(|&v| v == 0.0);
        out.pairs += 1;
    }
    Ok(out)
}
