use std::path::Path;

use layerinfo::baselines::{
    answer_prompt, cluster_answers, cluster_entropy, greedy_answer, normalized_entropy, p_true, predictive_entropy,
    NormalizedExactMatch, PTrueFrame,
};
use layerinfo::datasets::{load_dataset, DatasetFormat, Example};
use layerinfo::desk::{build_toy_model, RandomCase, ToyModel, ToyModelSpec};
use layerinfo::li::li_profile;
use layerinfo::model::{
    entropy_bits, load_model, Decoding, HeadNormPolicy, LanguageModel, LayerSelection, ModelHandle, TokenSequence,
};
use layerinfo::prompts::{render_pair, PromptTemplate, ScoredSpan};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn case(seed: u64) -> RandomCase {
    RandomCase::draw(&mut ChaCha8Rng::seed_from_u64(seed), 0)
}

fn all_layers(spec: &ToyModelSpec, policy: HeadNormPolicy) -> ModelHandle {
    ModelHandle::new(Box::new(build_toy_model(spec).unwrap()), &LayerSelection::All, policy).unwrap()
}

fn toy_examples() -> Vec<Example> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpora/generic_toy.jsonl");
    load_dataset(&path, DatasetFormat::GenericJsonl).unwrap().examples
}

fn tiny() -> (ModelHandle, ToyModel) {
    let spec = ToyModelSpec::default();
    (all_layers(&spec, HeadNormPolicy::ApplyFinalNorm), build_toy_model(&spec).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn appended_tokens_leave_target_scores_unchanged(seed in any::<u64>(), extra in prop::collection::vec(3u32..8, 1..6)) {
        let c = case(seed);
        let handle = c.handle().unwrap();
        let pair = render_pair(&c.example, &c.template, &handle, c.scope).unwrap();
        let start = pair.target_span_ctx.start;
        let base = handle.score_span(&pair.ctx_pass, start).unwrap();

        let mut ids = pair.ctx_pass.ids.clone();
        ids.extend(&extra);
        let longer = TokenSequence::new(ids.clone(), vec![(0, 0); ids.len()]);
        let extended = handle.score_span(&longer, start).unwrap();
        let n = base.values.ncols();
        for r in 0..base.values.nrows() {
            for t in 0..n {
                prop_assert!((base.values[[r, t]] - extended.values[[r, t]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn later_edits_leave_earlier_positions_unchanged(seed in any::<u64>(), at in any::<prop::sample::Index>(), tok in 3u32..8) {
        let c = case(seed);
        let handle = c.handle().unwrap();
        let pair = render_pair(&c.example, &c.template, &handle, c.scope).unwrap();
        let start = pair.target_span_ctx.start;
        let len = pair.ctx_pass.len();
        let p = start + at.index(len - start);
        let base = handle.score_span(&pair.ctx_pass, start).unwrap();

        let mut edited = pair.ctx_pass.clone();
        edited.ids[p] = tok;
        let changed = handle.score_span(&edited, start).unwrap();
        for r in 0..base.values.nrows() {
            for t in 0..(p - start) {
                prop_assert!((base.values[[r, t]] - changed.values[[r, t]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn last_layer_row_matches_standard_scoring(seed in any::<u64>()) {
        let c = case(seed);
        let handle = all_layers(&c.spec, c.policy);
        let pair = render_pair(&c.example, &c.template, &handle, c.scope).unwrap();
        let start = pair.target_span_ctx.start;
        let lens = handle.score_span(&pair.ctx_pass, start).unwrap();
        let standard = handle.standard_log_probs(&pair.ctx_pass.ids).unwrap();
        let last = lens.values.row(lens.values.nrows() - 1);
        for (t, v) in last.iter().enumerate() {
            prop_assert!((v - standard[start - 1 + t]).abs() <= 1e-5);
        }
    }

    #[test]
    fn score_span_matches_materialised_distributions(seed in any::<u64>()) {
        let c = case(seed);
        let handle = all_layers(&c.spec, c.policy);
        let toy = build_toy_model(&c.spec).unwrap();
        let pair = render_pair(&c.example, &c.template, &handle, c.scope).unwrap();
        let ids = &pair.ctx_pass.ids;
        let start = pair.target_span_ctx.start;
        let lens = handle.score_span(&pair.ctx_pass, start).unwrap();
        let dists = toy.layer_distributions(ids, c.policy == HeadNormPolicy::ApplyFinalNorm).unwrap();
        for (row, dist) in dists.iter().enumerate() {
            for t in 0..lens.values.ncols() {
                let pos = start + t;
                let expected = dist[[pos - 1, ids[pos] as usize]].log2();
                prop_assert!((lens.values[[row, t]] - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn profile_is_finite_and_costs_two_passes(seed in any::<u64>()) {
        let c = case(seed);
        let handle = c.handle().unwrap();
        let pair = render_pair(&c.example, &c.template, &handle, c.scope).unwrap();
        let before = handle.usage();
        let profile = li_profile(&handle, &pair).unwrap();
        let used = handle.usage().since(before);
        prop_assert_eq!(used.forward_passes, 2);
        prop_assert_eq!(used.tokens_processed, (pair.ctx_pass.len() + pair.null_pass.len()) as u64);
        // realised-token entropies are cross-entropies: non-negative, not capped at log2 V
        for (&hn, &hc) in profile.h_null.iter().zip(&profile.h_ctx) {
            prop_assert!(hn.is_finite() && hn >= 0.0 && hc.is_finite() && hc >= 0.0);
        }
    }

    #[test]
    fn empty_context_gives_zero_information(seed in any::<u64>()) {
        let c = case(seed);
        let handle = c.handle().unwrap();
        let example = Example { context: String::new(), ..c.example };
        let pair = render_pair(&example, &c.template, &handle, c.scope).unwrap();
        let profile = li_profile(&handle, &pair).unwrap();
        prop_assert!(profile.i_layer.iter().all(|&v| v == 0.0));
        prop_assert_eq!(profile.li_total, 0.0);
    }

    #[test]
    fn semantic_clusters_ignore_sample_order(
        answers in prop::collection::vec(prop::sample::select(vec!["Paris", "paris.", "Lyon", " lyon", "Nice", "unknown"]), 2..12),
        seed in any::<u64>(),
    ) {
        let answers: Vec<String> = answers.into_iter().map(String::from).collect();
        let mut shuffled = answers.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = cluster_answers("q", &answers, &NormalizedExactMatch).unwrap();
        let b = cluster_answers("q", &shuffled, &NormalizedExactMatch).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(cluster_entropy(&a), cluster_entropy(&b));
    }
}

#[test]
fn twenty_questions_with_empty_context_on_tiny_lm() {
    let handle = load_model("tiny-lm", &LayerSelection::All, HeadNormPolicy::ApplyFinalNorm).unwrap();
    for (i, ex) in toy_examples().iter().cycle().take(20).enumerate() {
        let template = [PromptTemplate::none(), PromptTemplate::binary()][i % 2].clone();
        let example = Example { context: String::new(), ..ex.clone() };
        let profile =
            li_profile(&handle, &render_pair(&example, &template, &handle, ScoredSpan::default()).unwrap()).unwrap();
        assert!(profile.i_layer.iter().all(|&v| v == 0.0));
        assert_eq!(profile.li_total, 0.0);
    }
}

#[test]
fn p_true_equals_full_forward_softmax_entry() {
    let (handle, toy) = tiny();
    let examples = toy_examples();
    let frame = PTrueFrame::default();
    let (target, demos) = (&examples[0], &examples[1..4]);
    let score = p_true(&handle, target, "a cat", demos, 3, &frame).unwrap();
    assert_eq!(score.aux.forward_passes, 4);

    let mut ids = vec![toy.bos_id()];
    for d in demos {
        ids.extend(handle.tokenize(&frame.demonstration(d)).unwrap().ids);
    }
    ids.extend(handle.tokenize(&frame.render(target, "a cat")).unwrap().ids);
    let true_id = handle.tokenize(&frame.true_text).unwrap().ids[0] as usize;
    let dists = toy.layer_distributions(&ids, true).unwrap();
    let last = dists.last().unwrap();
    let expected = last[[ids.len() - 1, true_id]];
    assert!((score.value - expected).abs() <= 1e-9, "{} vs {expected}", score.value);
}

#[test]
fn generation_entropies_match_materialised_distributions() {
    let (handle, toy) = tiny();
    let examples = toy_examples();
    let pair = render_pair(&examples[0], &PromptTemplate::none(), &handle, ScoredSpan::default()).unwrap();
    let prompt = answer_prompt(&handle, &pair).unwrap();
    let generation = greedy_answer(&handle, &pair, 2).unwrap();
    assert!(!generation.step_entropies.is_empty());

    let mut full = prompt.clone();
    full.extend(&generation.ids);
    let dists = toy.layer_distributions(&full, true).unwrap();
    let last = dists.last().unwrap();
    let mut entropy_sum = 0.0;
    let mut logp_sum = 0.0;
    for (i, &h) in generation.step_entropies.iter().enumerate() {
        let row: Vec<f64> = last.row(prompt.len() - 1 + i).to_vec();
        let hand: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
        assert!((h - hand).abs() <= 1e-9);
        assert!((h - entropy_bits(&row)).abs() <= 1e-12);
        entropy_sum += hand;
        // greedy: the first maximum
        let chosen = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if let Some(&id) = generation.ids.get(i) {
            assert_eq!(id as usize, chosen);
        }
        assert!((generation.token_log_probs[i] - row[chosen].log2()).abs() <= 1e-9);
        logp_sum += row[chosen].log2();
    }
    let steps = generation.step_entropies.len() as f64;
    let pe = predictive_entropy(&handle, &pair, 2).unwrap();
    let ne = normalized_entropy(&handle, &pair, 2).unwrap();
    assert!((pe.value + entropy_sum / steps).abs() <= 1e-9);
    assert!((ne.value - logp_sum / steps).abs() <= 1e-9);
}

#[test]
fn sampling_with_different_seeds_is_non_empty() {
    let handle = load_model("tiny-lm", &LayerSelection::All, HeadNormPolicy::ApplyFinalNorm).unwrap();
    for seed in [1, 2] {
        let text = handle.generate("the cat", Decoding::Sample { temperature: 1.0, seed }, 8).unwrap();
        assert!(!text.is_empty());
    }
}
