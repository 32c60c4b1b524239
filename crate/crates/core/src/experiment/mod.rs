//! Config-driven runs over (dataset × template × method) grids with a
//! content-addressed score cache, metric tables, per-example dumps and
//! figures.

mod cache;
mod config;
mod figures;
mod report;

use std::collections::BTreeMap;
use std::fs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, CacheKey, CachePayload, ScoreCache};
pub use config::{BalanceConfig, BaselineConfig, CalibrationConfig, DatasetConfig, RunConfig};
pub use figures::{emit_figures, emit_figures_from_dump, FigureKind};
pub use report::{
    calibrate_rows, calibrate_sets, read_scores, Dump, EceResult, EvalReport, MethodResult, OverheadRow, ProfileRecord,
    ProfileRow, RejectionResult, ScoreRow, SkipRecord, PROFILES_CSV, SCORES_CSV, SINGLE_PASS,
};

use crate::baselines::{
    answer_match_of, greedy_answer, normalized_entropy_of, p_true, predictive_entropy_of, select_demos,
    semantic_entropy, BaselineScore, EquivalencePolicy, Method,
};
use crate::datasets::{balance_answerability, load_dataset_with, Example};
use crate::li::{li_profile, pvi_at_layer, LIProfile, PviLayer};
use crate::metrics::OverheadCounter;
use crate::model::{load_model, Generation, ModelHandle, Usage};
use crate::prompts::{render_pair, PromptTemplate, RenderedPair};
use crate::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const CACHE_DIR: &str = "cache";

/// Loads, balances and truncates the configured dataset.
pub fn load_examples(config: &RunConfig) -> Result<Vec<Example>> {
    let loaded = load_dataset_with(&config.dataset.path, config.dataset.format, &config.load_options())?;
    let mut examples = match &config.balance {
        Some(b) => balance_answerability(&loaded.examples, b.ratio, config.seed)?,
        None => loaded.examples,
    };
    if let Some(limit) = config.dataset.limit {
        examples.truncate(limit);
    }
    Ok(examples)
}

fn digest_json<T: serde::Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

#[derive(Default)]
struct Accumulator {
    scores: Vec<ScoreRow>,
    profiles: Vec<ProfileRecord>,
    skipped: Vec<SkipRecord>,
    /// `(template, counter name) -> (counter, examples)`
    overhead: BTreeMap<(String, String), (OverheadCounter, usize)>,
}

impl Accumulator {
    fn charge(&mut self, template_id: &str, name: &str, passes: u64, tokens: u64) {
        let entry = self
            .overhead
            .entry((template_id.to_string(), name.to_string()))
            .or_insert_with(|| (OverheadCounter::new(name), 0));
        entry.0.add(passes, tokens);
        entry.1 += 1;
    }

    fn skip(&mut self, template_id: &str, example_id: &str, method: Option<Method>, err: &Error) {
        log::warn!("skipping {example_id} / {template_id} / {method:?}: {err}");
        self.skipped.push(SkipRecord {
            template_id: template_id.to_string(),
            example_id: example_id.to_string(),
            method,
            reason: err.to_string(),
        });
    }
}

struct Runner<'a> {
    config: &'a RunConfig,
    model: &'a ModelHandle,
    cache: &'a ScoreCache,
    equivalence: &'a dyn EquivalencePolicy,
    pool: &'a [Example],
    pool_digest: String,
}

impl Runner<'_> {
    fn key(&self, example: &Example, template: &PromptTemplate, kind: &str, params: serde_json::Value) -> CacheKey {
        CacheKey {
            model_id: self.model.model_id().to_string(),
            example_id: example.example_id.clone(),
            example_digest: digest_json(example),
            template_id: template.template_id.clone(),
            layer_selection: self.model.layer_selection().to_vec(),
            head_norm_policy: self.model.head_norm_policy(),
            scored_span: self.config.scored_span,
            kind: kind.to_string(),
            params: params.to_string(),
        }
    }

    fn baseline_params(&self, method: Method) -> serde_json::Value {
        let b = &self.config.baselines;
        match method {
            Method::PTrue => serde_json::json!({
                "max_tokens": b.max_tokens, "k": b.k, "seed": self.config.seed,
                "frame": b.p_true_frame, "pool": self.pool_digest,
            }),
            Method::SemanticEntropy => serde_json::json!({
                "max_tokens": b.max_tokens, "n_samples": b.n_samples, "temperature": b.temperature,
                "seed": self.config.seed, "equivalence": b.equivalence,
                "shots": b.se_shots, "pool": if b.se_shots > 0 { self.pool_digest.as_str() } else { "" },
            }),
            _ => serde_json::json!({ "max_tokens": b.max_tokens }),
        }
    }

    fn profile(&self, example: &Example, template: &PromptTemplate, pair: &RenderedPair) -> Result<(LIProfile, Usage)> {
        let key = self.key(example, template, "li_profile", serde_json::json!({}));
        if let Some(CachePayload::Profile { profile, forward_passes, tokens_processed }) = self.cache.get(&key) {
            return Ok((profile, Usage { forward_passes, tokens_processed }));
        }
        let before = self.model.usage();
        let profile = li_profile(self.model, pair)?;
        let usage = self.model.usage().since(before);
        self.cache.put(
            &key,
            &CachePayload::Profile {
                profile: profile.clone(),
                forward_passes: usage.forward_passes,
                tokens_processed: usage.tokens_processed,
            },
        )?;
        Ok((profile, usage))
    }

    fn baseline(
        &self,
        method: Method,
        example: &Example,
        pair: &RenderedPair,
        generation: &mut Option<std::result::Result<(Generation, Usage), String>>,
    ) -> Result<BaselineScore> {
        let mut greedy = || -> Result<(Generation, Usage)> {
            let cached = generation.get_or_insert_with(|| {
                let before = self.model.usage();
                greedy_answer(self.model, pair, self.config.baselines.max_tokens)
                    .map(|g| (g, self.model.usage().since(before)))
                    .map_err(|e| e.to_string())
            });
            cached.clone().map_err(Error::InvalidArgument)
        };
        let id = &example.example_id;
        match method {
            Method::AnswerMatch => {
                let (g, u) = greedy()?;
                Ok(answer_match_of(example, &g, u))
            }
            Method::PredEntropy => {
                let (g, u) = greedy()?;
                predictive_entropy_of(id, &g, u)
            }
            Method::NormEntropy => {
                let (g, u) = greedy()?;
                normalized_entropy_of(id, &g, u)
            }
            Method::PTrue => {
                let (g, _) = greedy()?;
                let b = &self.config.baselines;
                let demos = select_demos(self.pool, id, b.k, self.config.seed)?;
                p_true(self.model, example, &g.text, &demos, b.k, &b.p_true_frame)
            }
            Method::SemanticEntropy => {
                let b = &self.config.baselines;
                let demos = if b.se_shots > 0 {
                    select_demos(self.pool, id, b.se_shots, self.config.seed)?
                } else {
                    Vec::new()
                };
                semantic_entropy(
                    self.model,
                    pair,
                    &example.question,
                    &demos,
                    &b.sampling(self.config.seed),
                    self.equivalence,
                )
            }
            Method::Li | Method::PviFirst | Method::PviLast => unreachable!("profile methods are scored separately"),
        }
    }

    fn score_example(&self, template: &PromptTemplate, example: &Example, acc: &mut Accumulator) -> Result<()> {
        let tid = template.template_id.as_str();
        let eid = example.example_id.as_str();
        let pair = match render_pair(example, template, self.model, self.config.scored_span) {
            Ok(p) => p,
            Err(e) => {
                acc.skip(tid, eid, None, &e);
                return Ok(());
            }
        };
        acc.charge(tid, SINGLE_PASS, 1, pair.ctx_pass.len() as u64);
        let push = |acc: &mut Accumulator, method: Method, value: f64| {
            acc.scores.push(ScoreRow {
                template_id: tid.to_string(),
                example_id: eid.to_string(),
                answerable: example.answerable,
                method,
                value,
            })
        };

        let profile_methods: Vec<Method> =
            self.config.methods.iter().copied().filter(|m| m.uses_li_profile()).collect();
        if !profile_methods.is_empty() {
            match self.profile(example, template, &pair) {
                Ok((profile, usage)) => {
                    for &m in &profile_methods {
                        let value = match m {
                            Method::Li => profile.li_total,
                            Method::PviFirst => pvi_at_layer(&profile, PviLayer::First)?,
                            _ => pvi_at_layer(&profile, PviLayer::Last)?,
                        };
                        acc.charge(tid, m.as_str(), usage.forward_passes, usage.tokens_processed);
                        push(acc, m, value);
                    }
                    acc.profiles.push(ProfileRecord {
                        template_id: tid.to_string(),
                        answerable: example.answerable,
                        profile,
                    });
                }
                Err(e @ Error::Io(_)) => return Err(e),
                Err(e) => profile_methods.iter().for_each(|&m| acc.skip(tid, eid, Some(m), &e)),
            }
        }

        let mut generation = None;
        for &m in self.config.methods.iter().filter(|m| !m.uses_li_profile()) {
            let key = self.key(example, template, m.as_str(), self.baseline_params(m));
            let score = match self.cache.get(&key) {
                Some(CachePayload::Score { score }) => Ok(score),
                _ => self.baseline(m, example, &pair, &mut generation).and_then(|s| {
                    self.cache.put(&key, &CachePayload::Score { score: s.clone() })?;
                    Ok(s)
                }),
            };
            match score {
                Ok(s) => {
                    acc.charge(tid, m.as_str(), s.aux.forward_passes, s.aux.tokens_processed);
                    push(acc, m, s.value);
                }
                Err(e @ Error::Io(_)) => return Err(e),
                Err(e) => acc.skip(tid, eid, Some(m), &e),
            }
        }
        Ok(())
    }
}

/// Runs `config` end to end and writes `report.json`, `scores.csv`,
/// `profiles.csv` and `config.toml` into `config.out`.
pub fn run_experiment(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let templates = config.parsed_templates()?;
    let examples = load_examples(config)?;
    let model = load_model(&config.model, &config.layers, config.head_norm_policy)?;
    fs::create_dir_all(&config.out)?;
    let cache = ScoreCache::new(config.out.join(CACHE_DIR))?;
    let equivalence = config.baselines.equivalence.build()?;
    let ids: Vec<&String> = examples.iter().map(|e| &e.example_id).collect();
    let runner = Runner {
        config,
        model: &model,
        cache: &cache,
        equivalence: equivalence.as_ref(),
        pool: &examples,
        pool_digest: digest_json(&ids),
    };

    let mut acc = Accumulator::default();
    for template in &templates {
        for (i, example) in examples.iter().enumerate() {
            log::debug!("{} [{}/{}] {}", template.template_id, i + 1, examples.len(), example.example_id);
            runner.score_example(template, example, &mut acc)?;
        }
    }

    let report = assemble(config, &model, &templates, &examples, acc);
    write_outputs(config, &report)?;
    Ok(report)
}

fn assemble(
    config: &RunConfig,
    model: &ModelHandle,
    templates: &[PromptTemplate],
    examples: &[Example],
    acc: Accumulator,
) -> EvalReport {
    let mut shuffled: Vec<&str> = examples.iter().map(|e| e.example_id.as_str()).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let split_order: BTreeMap<String, usize> = shuffled.iter().enumerate().map(|(i, id)| (id.to_string(), i)).collect();

    let dump = Dump { scores: acc.scores, profiles: Vec::new() };
    let mut results = Vec::new();
    let mut overhead = Vec::new();
    for template in templates {
        let tid = &template.template_id;
        for &method in &config.methods {
            let set = dump.scored_set(tid, method);
            results.push(report::method_result(
                tid,
                method,
                &set,
                &config.reject_fractions,
                &config.calibration.sizes,
                config.calibration.bins,
                &split_order,
            ));
        }
        let reference = acc
            .overhead
            .get(&(tid.clone(), SINGLE_PASS.to_string()))
            .cloned()
            .unwrap_or_else(|| (OverheadCounter::new(SINGLE_PASS), 0));
        for name in std::iter::once(SINGLE_PASS).chain(config.methods.iter().map(|m| m.as_str())) {
            if let Some((counter, n)) = acc.overhead.get(&(tid.clone(), name.to_string())) {
                overhead.push(report::overhead_row(tid, counter.clone(), *n, &reference.0));
            }
        }
    }

    EvalReport {
        config_hash: config.config_hash(),
        model_id: model.model_id().to_string(),
        dataset: config.dataset.path.display().to_string(),
        layer_ids: model.layer_selection().to_vec(),
        num_examples: examples.len(),
        num_answerable: examples.iter().filter(|e| e.answerable).count(),
        results,
        overhead,
        skipped: acc.skipped,
        per_example: dump.scores,
        profiles: acc.profiles,
    }
}

fn write_outputs(config: &RunConfig, report: &EvalReport) -> Result<()> {
    let out = &config.out;
    fs::write(out.join(REPORT_JSON), report.to_json()?)?;
    fs::write(out.join(CONFIG_TOML), config.to_toml()?)?;
    report.dump().write(out)
}

/// Reads `report.json` from a run directory.
pub fn read_report(run_dir: &std::path::Path) -> Result<EvalReport> {
    let path = run_dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    EvalReport::from_json(&text)
}
