//! Uniform access to causal decoder-only language models.
//!
//! A backend implements [`LanguageModel`]: tokenization, a forward pass that
//! exposes every decoder block's output, the final normalisation, the output
//! head, and an incremental decoding session. [`ModelHandle`] layers the
//! logit-lens scoring, generation and usage accounting on top of it.

mod llama;
mod sampling;

use std::cell::Cell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::desk::{build_toy_model, ToyModelSpec};
use crate::{Error, Result};

pub use llama::LlamaModel;
pub use sampling::{Decoding, GenerateOptions, Generation};

const LN_2: f64 = std::f64::consts::LN_2;

/// Token ids with the byte span each token covers in its source string.
///
/// Special tokens inserted by the adapter (begin-of-sequence) carry an empty
/// span at the start of the string.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, offsets: Vec<(usize, usize)>) -> Self {
        debug_assert_eq!(ids.len(), offsets.len());
        Self { ids, offsets }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Returns a copy with `bos` prepended.
    pub fn with_bos(&self, bos: u32) -> Self {
        let mut ids = Vec::with_capacity(self.len() + 1);
        let mut offsets = Vec::with_capacity(self.len() + 1);
        ids.push(bos);
        offsets.push((0, 0));
        ids.extend_from_slice(&self.ids);
        offsets.extend_from_slice(&self.offsets);
        Self { ids, offsets }
    }
}

/// How intermediate hidden states reach the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadNormPolicy {
    /// Apply the model's final normalisation before the head (logit lens).
    #[default]
    ApplyFinalNorm,
    /// Feed intermediate block outputs to the head unnormalised. The last
    /// block still goes through the final norm, since that is the model.
    RawHidden,
}

impl fmt::Display for HeadNormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadNormPolicy::ApplyFinalNorm => "apply_final_norm",
            HeadNormPolicy::RawHidden => "raw_hidden",
        })
    }
}

impl FromStr for HeadNormPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apply_final_norm" => Ok(Self::ApplyFinalNorm),
            "raw_hidden" => Ok(Self::RawHidden),
            other => Err(Error::InvalidArgument(format!("unknown head norm policy {other:?}"))),
        }
    }
}

/// Which decoder blocks to read out. Layers are 1-based block outputs; the
/// embedding output is not a layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum LayerSelection {
    #[default]
    All,
    Layers(Vec<usize>),
}

impl Serialize for LayerSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSelection::All => s.serialize_str("all"),
            LayerSelection::Layers(l) => l.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::List(l) => Ok(LayerSelection::Layers(l)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl LayerSelection {
    /// Resolves against a model with `num_layers` blocks.
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((1..=num_layers).collect()),
            LayerSelection::Layers(layers) => {
                if layers.is_empty() {
                    return Err(Error::InvalidLayers("empty selection".into()));
                }
                if layers.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidLayers(format!("{layers:?} is not strictly increasing")));
                }
                if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
                    return Err(Error::InvalidLayers(format!("layer {bad} outside 1..={num_layers}")));
                }
                Ok(layers.clone())
            }
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Layers(l) => {
                let parts: Vec<String> = l.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    /// Accepts `all` or a comma-separated list such as `1,4,8`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSelection::All);
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::InvalidLayers(format!("cannot parse {p:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(LayerSelection::Layers)
    }
}

/// A causal decoder-only model backend.
///
/// Hidden states cross this boundary as `f64`; backends may compute in lower
/// precision internally but must project through the head in at least `f32`.
pub trait LanguageModel {
    fn model_id(&self) -> &str;
    fn num_layers(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn context_window(&self) -> usize;
    fn bos_id(&self) -> u32;
    fn eos_ids(&self) -> &[u32];

    /// Tokenizes without inserting special tokens.
    fn tokenize(&self, text: &str) -> Result<TokenSequence>;
    fn decode(&self, ids: &[u32]) -> Result<String>;

    /// Outputs of blocks `1..=num_layers`, each `[ids.len(), width]`.
    fn block_outputs(&self, ids: &[u32]) -> Result<Vec<Array2<f64>>>;
    fn final_norm(&self, hidden: ArrayView2<f64>) -> Array2<f64>;
    /// Output head: `[rows, width] -> [rows, vocab]` logits.
    fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64>;

    /// Starts an incremental (KV-cached) decoding session.
    fn session(&self) -> Box<dyn DecodeSession + '_>;
}

/// Incremental decoding state over a growing prefix.
pub trait DecodeSession {
    /// Appends `ids` and returns the ordinary next-token logits at each of
    /// the appended positions, `[ids.len(), vocab]`.
    fn extend(&mut self, ids: &[u32]) -> Result<Array2<f64>>;
    fn position(&self) -> usize;
}

/// Forward-pass and token accounting for one handle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub forward_passes: u64,
    pub tokens_processed: u64,
}

impl Usage {
    pub fn since(&self, earlier: Usage) -> Usage {
        Usage {
            forward_passes: self.forward_passes - earlier.forward_passes,
            tokens_processed: self.tokens_processed - earlier.tokens_processed,
        }
    }
}

/// Per-layer log₂ probabilities of the realised target tokens for one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogProbs {
    /// `[layer_ids.len(), target_len]`.
    pub values: Array2<f64>,
    pub layer_ids: Vec<usize>,
    pub target_len: usize,
}

impl LayerLogProbs {
    pub fn new(values: Array2<f64>, layer_ids: Vec<usize>) -> Result<Self> {
        let (rows, target_len) = values.dim();
        if target_len == 0 {
            return Err(Error::Empty("target span"));
        }
        if rows != layer_ids.len() {
            return Err(Error::InvalidArgument(format!("{rows} rows for {} layers", layer_ids.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v > 0.0) {
            return Err(Error::InvalidArgument(format!("log-probability {v} not in (-inf, 0]")));
        }
        Ok(Self { values, layer_ids, target_len })
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.values.row(index)
    }
}

/// A loaded model plus the layer read-out configuration.
///
/// Handles are single-threaded; run one per worker.
pub struct ModelHandle {
    model: Box<dyn LanguageModel>,
    layer_selection: Vec<usize>,
    head_norm_policy: HeadNormPolicy,
    usage: Cell<Usage>,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model_id", &self.model_id())
            .field("num_layers", &self.num_layers())
            .field("vocab_size", &self.vocab_size())
            .field("layer_selection", &self.layer_selection)
            .field("head_norm_policy", &self.head_norm_policy)
            .finish()
    }
}

/// Resolves `model_id` and wraps it in a handle.
///
/// Recognised identifiers:
/// - `tiny-lm`: the default desk-oracle toy model
/// - `toy:<layers>:<vocab>:<width>:<seed>`: a custom toy model
/// - a directory holding `config.json`, `tokenizer.json` and safetensors
///   weights for a Llama, Mistral or Qwen2 checkpoint
pub fn load_model(
    model_id: &str,
    layer_selection: &LayerSelection,
    head_norm_policy: HeadNormPolicy,
) -> Result<ModelHandle> {
    let model: Box<dyn LanguageModel> = if model_id == "tiny-lm" {
        Box::new(build_toy_model(&ToyModelSpec::default())?)
    } else if let Some(rest) = model_id.strip_prefix("toy:") {
        Box::new(build_toy_model(&ToyModelSpec::parse(rest)?)?)
    } else {
        let path = Path::new(model_id);
        if !path.join("config.json").is_file() {
            return Err(Error::ModelNotFound(model_id.to_string()));
        }
        Box::new(LlamaModel::load(path)?)
    };
    ModelHandle::new(model, layer_selection, head_norm_policy)
}

impl ModelHandle {
    pub fn new(
        model: Box<dyn LanguageModel>,
        layer_selection: &LayerSelection,
        head_norm_policy: HeadNormPolicy,
    ) -> Result<Self> {
        let layer_selection = layer_selection.resolve(model.num_layers())?;
        Ok(Self { model, layer_selection, head_norm_policy, usage: Cell::new(Usage::default()) })
    }

    pub fn model(&self) -> &dyn LanguageModel {
        self.model.as_ref()
    }

    pub fn model_id(&self) -> &str {
        self.model.model_id()
    }

    pub fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    pub fn layer_selection(&self) -> &[usize] {
        &self.layer_selection
    }

    pub fn head_norm_policy(&self) -> HeadNormPolicy {
        self.head_norm_policy
    }

    pub fn usage(&self) -> Usage {
        self.usage.get()
    }

    pub(crate) fn record_pass(&self, tokens: usize) {
        let mut u = self.usage.get();
        u.forward_passes += 1;
        u.tokens_processed += tokens as u64;
        self.usage.set(u);
    }

    fn check_window(&self, len: usize) -> Result<()> {
        let window = self.model.context_window();
        if len > window {
            return Err(Error::ContextOverflow { len, window });
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.model.tokenize(text)
    }

    /// Tokenizes `text` and prepends the begin-of-sequence token.
    pub fn tokenize_with_bos(&self, text: &str) -> Result<TokenSequence> {
        Ok(self.model.tokenize(text)?.with_bos(self.model.bos_id()))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.model.decode(ids)
    }

    /// Teacher-forced logit-lens scoring of `full_input[target_start..]`.
    ///
    /// Row `i` holds, for selected layer `layer_selection[i]`, the log₂
    /// probability of every target token given all preceding tokens, read
    /// out of that layer through the output head. One forward pass.
    pub fn score_span(&self, full_input: &TokenSequence, target_start: usize) -> Result<LayerLogProbs> {
        let len = full_input.len();
        if target_start == 0 || target_start >= len {
            return Err(Error::TargetOutOfRange { start: target_start, len });
        }
        self.check_window(len)?;
        let ids = &full_input.ids;
        let blocks = self.model.block_outputs(ids)?;
        self.record_pass(len);

        let last = self.model.num_layers();
        let targets = &ids[target_start..];
        let mut values = Array2::zeros((self.layer_selection.len(), targets.len()));
        for (row, &layer) in self.layer_selection.iter().enumerate() {
            // position t-1 predicts token t
            let states = blocks[layer - 1].slice(ndarray::s![target_start - 1..len - 1, ..]);
            let normed;
            let states = if layer == last || self.head_norm_policy == HeadNormPolicy::ApplyFinalNorm {
                normed = self.model.final_norm(states);
                normed.view()
            } else {
                states
            };
            let logits = self.model.head(states);
            for (t, &tok) in targets.iter().enumerate() {
                values[[row, t]] = log2_softmax_at(logits.row(t), tok as usize);
            }
        }
        LayerLogProbs::new(values, self.layer_selection.clone())
    }

    /// Ordinary next-token log₂ probabilities of `ids[1..]` via the
    /// decoding path.
    pub fn standard_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_window(ids.len())?;
        let mut session = self.model.session();
        let logits = session.extend(ids)?;
        self.record_pass(ids.len());
        Ok((1..ids.len()).map(|t| log2_softmax_at(logits.row(t - 1), ids[t] as usize)).collect())
    }

    /// Feeds `chunks` through one session, one forward pass per chunk, and
    /// returns the next-token logits after the last chunk.
    pub fn prefill_chunks(&self, chunks: &[Vec<u32>]) -> Result<Vec<f64>> {
        let total: usize = chunks.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::Empty("prompt"));
        }
        self.check_window(total)?;
        let mut session = self.model.session();
        let mut last = None;
        for chunk in chunks.iter().filter(|c| !c.is_empty()) {
            let logits = session.extend(chunk)?;
            self.record_pass(chunk.len());
            last = Some(logits.row(chunk.len() - 1).to_vec());
        }
        Ok(last.expect("at least one non-empty chunk"))
    }

    /// Generates a continuation of `prompt` (begin-of-sequence prepended).
    pub fn generate(&self, prompt: &str, decoding: Decoding, max_tokens: usize) -> Result<String> {
        let ids = self.tokenize_with_bos(prompt)?;
        let opts = GenerateOptions { decoding, max_tokens, stop_at_newline: false };
        Ok(self.generate_ids(&ids.ids, &opts)?.text)
    }

    /// Generates from pre-tokenized `prompt` ids. Counted as one forward
    /// pass covering prompt plus generated tokens.
    pub fn generate_ids(&self, prompt: &[u32], opts: &GenerateOptions) -> Result<Generation> {
        if opts.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        self.check_window(prompt.len() + opts.max_tokens)?;
        let generation = sampling::run(self.model.as_ref(), prompt, opts)?;
        self.record_pass(prompt.len() + generation.ids.len());
        Ok(generation)
    }
}

/// Numerically stable `log₂ softmax(logits)[index]`, computed in `f64`.
pub fn log2_softmax_at(logits: ArrayView1<f64>, index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    ((logits[index] - lse) / LN_2).min(0.0)
}

/// Full `softmax(logits)` in `f64`.
pub fn softmax(logits: ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in bits.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
}
