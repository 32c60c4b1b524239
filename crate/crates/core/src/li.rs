//! Layer-wise usable information.
//!
//! For a question span `q` and context `c`, every layer `ℓ` yields a
//! per-token conditional entropy `H_ℓ(Q|C) = -(1/T) Σ_t log₂ p_ℓ(q_t | q_<t, c)`
//! and the same quantity under the empty context. Their difference
//! `I_ℓ = H_ℓ(Q|∅) - H_ℓ(Q|C)` is the information the context makes usable at
//! that layer; LI is the sum over layers.
//!
//! Nothing here assumes `I_ℓ` is monotone in depth: usable information is not
//! bound by the data processing inequality and routinely rises and falls.

use serde::{Deserialize, Serialize};

use crate::model::{LayerLogProbs, ModelHandle};
use crate::prompts::RenderedPair;
use crate::{Error, Result};

/// Per-layer entropies and information gains for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LIProfile {
    pub example_id: String,
    pub layer_ids: Vec<usize>,
    /// `H_ℓ(Q|∅)` in bits/token.
    pub h_null: Vec<f64>,
    /// `H_ℓ(Q|C)` in bits/token.
    pub h_ctx: Vec<f64>,
    /// `I_ℓ = h_null - h_ctx` in bits/token.
    pub i_layer: Vec<f64>,
    /// Sum of `i_layer` in ascending layer order.
    pub li_total: f64,
    /// Number of scored target tokens.
    pub target_len: usize,
}

/// Dataset-level LI: the mean over examples of each example's LI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLIScore {
    pub mean_li: f64,
    pub per_example: Vec<(String, f64)>,
    pub count: usize,
}

/// Which single layer to read as a pointwise information baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PviLayer {
    First,
    Last,
    Index(usize),
}

/// Left-to-right sum; the one accumulation order used for LI and its prefixes.
fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Per-layer conditional entropy in bits/token: `-(1/T) Σ_t log₂ p`.
pub fn layer_entropies(logprobs: &LayerLogProbs) -> Result<Vec<f64>> {
    let t = logprobs.target_len;
    if t == 0 || logprobs.values.ncols() == 0 {
        return Err(Error::Empty("target span"));
    }
    if logprobs.values.iter().any(|v| !v.is_finite() || *v > 0.0) {
        return Err(Error::InvalidArgument("log-probabilities must be finite and <= 0".into()));
    }
    Ok(logprobs.values.rows().into_iter().map(|row| -row.iter().fold(0.0, |acc, v| acc + v) / t as f64).collect())
}

impl LIProfile {
    /// Builds a profile from per-layer entropies under both conditions.
    pub fn from_entropies(
        example_id: impl Into<String>,
        layer_ids: Vec<usize>,
        h_null: Vec<f64>,
        h_ctx: Vec<f64>,
        target_len: usize,
    ) -> Result<Self> {
        if h_null.len() != layer_ids.len() || h_ctx.len() != layer_ids.len() {
            return Err(Error::InvalidArgument("entropy vectors do not match the layer list".into()));
        }
        let i_layer: Vec<f64> = h_null.iter().zip(&h_ctx).map(|(n, c)| n - c).collect();
        let li_total = ordered_sum(&i_layer);
        Ok(Self { example_id: example_id.into(), layer_ids, h_null, h_ctx, i_layer, li_total, target_len })
    }

    /// Prefix sums of `i_layer`; the last entry equals `li_total` exactly.
    pub fn cumulative(&self) -> Vec<f64> {
        self.i_layer
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }

    fn position_of(&self, layer: usize) -> Result<usize> {
        self.layer_ids.iter().position(|&l| l == layer).ok_or(Error::UnknownLayer(layer))
    }
}

/// Runs both passes of `pair` and returns the example's LI profile.
///
/// Exactly two forward passes: the null-context rendering and the
/// with-context rendering, each scoring the same target tokens.
pub fn li_profile(model: &ModelHandle, pair: &RenderedPair) -> Result<LIProfile> {
    pair.check_spans()?;
    let null = model.score_span(&pair.null_pass, pair.target_span_null.start)?;
    let ctx = model.score_span(&pair.ctx_pass, pair.target_span_ctx.start)?;
    let h_null = layer_entropies(&null)?;
    let h_ctx = layer_entropies(&ctx)?;
    LIProfile::from_entropies(&pair.example_id, null.layer_ids, h_null, h_ctx, null.target_len)
}

/// Mean LI over examples, keeping per-example scores.
pub fn dataset_li(profiles: &[LIProfile]) -> Result<DatasetLIScore> {
    if profiles.is_empty() {
        return Err(Error::Empty("profiles"));
    }
    let per_example: Vec<(String, f64)> = profiles.iter().map(|p| (p.example_id.clone(), p.li_total)).collect();
    let totals: Vec<f64> = per_example.iter().map(|(_, v)| *v).collect();
    Ok(DatasetLIScore { mean_li: ordered_sum(&totals) / profiles.len() as f64, per_example, count: profiles.len() })
}

/// Sum of `i_layer` over all selected layers up to and including
/// `upto_layer`.
pub fn cumulative_li(profile: &LIProfile, upto_layer: usize) -> Result<f64> {
    let pos = profile.position_of(upto_layer)?;
    Ok(ordered_sum(&profile.i_layer[..=pos]))
}

/// Pointwise information of the context at a single layer.
pub fn pvi_at_layer(profile: &LIProfile, which: PviLayer) -> Result<f64> {
    let pos = match which {
        PviLayer::First if !profile.i_layer.is_empty() => 0,
        PviLayer::Last if !profile.i_layer.is_empty() => profile.i_layer.len() - 1,
        PviLayer::Index(layer) => profile.position_of(layer)?,
        _ => return Err(Error::Empty("profile layers")),
    };
    Ok(profile.i_layer[pos])
}
