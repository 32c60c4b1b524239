//! Desk oracle: a tiny deterministic decoder and brute-force recomputation.
//!
//! The toy model is a standard pre-norm transformer (RMSNorm, causal
//! multi-head attention, SiLU MLP, sinusoidal positions) over a lowercase
//! character vocabulary. It is small enough that every per-layer
//! distribution can be materialised and checked by [`brute_force_li`], which
//! shares no arithmetic with the scoring path.

mod brute;
mod check;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{DecodeSession, LanguageModel, TokenSequence};
use crate::{Error, Result};

pub use brute::brute_force_li;
pub use check::{oracle_check, profile_distance, OracleCheck, RandomCase};

pub const MAX_LAYERS: usize = 2;
pub const MAX_VOCAB: usize = 64;
pub const MAX_WIDTH: usize = 32;
pub const CONTEXT_WINDOW: usize = 4096;

const RMS_EPS: f64 = 1e-6;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const FIRST_CHAR_ID: usize = 3;
const ALPHABET: &str = " \nabcdefghijklmnopqrstuvwxyz0123456789.,?!'\"-:;()";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub num_layers: usize,
    pub vocab: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self { num_layers: 2, vocab: MAX_VOCAB, width: MAX_WIDTH, seed: 0 }
    }
}

impl ToyModelSpec {
    /// Parses `layers:vocab:width:seed`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidArgument(format!("toy spec {s:?}, expected layers:vocab:width:seed"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |i: usize| parts[i].parse::<u64>().map_err(|_| bad());
        Ok(Self { num_layers: num(0)? as usize, vocab: num(1)? as usize, width: num(2)? as usize, seed: num(3)? })
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("toy spec: {what}")));
        if !(1..=MAX_LAYERS).contains(&self.num_layers) {
            return bad(format!("num_layers {} not in 1..={MAX_LAYERS}", self.num_layers));
        }
        if !(FIRST_CHAR_ID + 1..=MAX_VOCAB).contains(&self.vocab) {
            return bad(format!("vocab {} not in {}..={MAX_VOCAB}", self.vocab, FIRST_CHAR_ID + 1));
        }
        if !(2..=MAX_WIDTH).contains(&self.width) {
            return bad(format!("width {} not in 2..={MAX_WIDTH}", self.width));
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        format!("toy:{}:{}:{}:{}", self.num_layers, self.vocab, self.width, self.seed)
    }
}

/// Lowercasing character tokenizer. Characters outside the alphabet (or
/// beyond the vocabulary) map to `UNK`, which decodes to U+FFFD.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    chars: Vec<char>,
}

impl CharTokenizer {
    fn new(vocab: usize) -> Self {
        Self { chars: ALPHABET.chars().take(vocab - FIRST_CHAR_ID).collect() }
    }

    fn id_of(&self, c: char) -> u32 {
        let c = c.to_lowercase().next().unwrap_or(c);
        self.chars.iter().position(|&x| x == c).map_or(UNK, |p| (p + FIRST_CHAR_ID) as u32)
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let (ids, offsets) = text.char_indices().map(|(i, c)| (self.id_of(c), (i, i + c.len_utf8()))).unzip();
        TokenSequence::new(ids, offsets)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                BOS | EOS => None,
                UNK => Some('\u{FFFD}'),
                id => Some(self.chars.get(id as usize - FIRST_CHAR_ID).copied().unwrap_or('\u{FFFD}')),
            })
            .collect()
    }
}

/// One pre-norm block. Projections use the `x · W` convention.
#[derive(Debug, Clone)]
pub struct ToyBlock {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    /// `[width, 2 * width]`
    pub w_in: Array2<f64>,
    /// `[2 * width, width]`
    pub w_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    pub num_heads: usize,
    /// `[vocab, width]`
    pub embed: Array2<f64>,
    pub blocks: Vec<ToyBlock>,
    pub final_norm: Array1<f64>,
    /// `[width, vocab]`
    pub head: Array2<f64>,
    id: String,
    tokenizer: CharTokenizer,
    eos: [u32; 1],
}

/// Builds the toy model for `spec`; identical specs give bitwise-identical
/// parameters.
pub fn build_toy_model(spec: &ToyModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.width;
    let mut matrix = |rows: usize, cols: usize, std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };
    let embed = matrix(spec.vocab, w, 1.0);
    let scale = 1.0 / (w as f64).sqrt();
    let mut blocks = Vec::with_capacity(spec.num_layers);
    for _ in 0..spec.num_layers {
        let attn_norm = gain(&mut matrix, w);
        let wq = matrix(w, w, scale);
        let wk = matrix(w, w, scale);
        let wv = matrix(w, w, scale);
        let wo = matrix(w, w, scale);
        let mlp_norm = gain(&mut matrix, w);
        let w_in = matrix(w, 2 * w, scale);
        let w_out = matrix(2 * w, w, scale / 2f64.sqrt());
        blocks.push(ToyBlock { attn_norm, wq, wk, wv, wo, mlp_norm, w_in, w_out });
    }
    let final_norm = gain(&mut matrix, w);
    let head = matrix(w, spec.vocab, 3.0 * scale);
    Ok(ToyModel {
        spec: *spec,
        num_heads: if w.is_multiple_of(2) { 2 } else { 1 },
        embed,
        blocks,
        final_norm,
        head,
        id: spec.model_id(),
        tokenizer: CharTokenizer::new(spec.vocab),
        eos: [EOS],
    })
}

fn gain(matrix: &mut impl FnMut(usize, usize, f64) -> Array2<f64>, w: usize) -> Array1<f64> {
    matrix(1, w, 0.2).row(0).mapv(|g| 1.0 + g)
}

/// Sinusoidal position code, `pe[2i] = sin(p / 10000^(2i/w))`,
/// `pe[2i+1] = cos(...)`.
fn position_code(pos: usize, width: usize) -> Array1<f64> {
    Array1::from_shape_fn(width, |d| {
        let i = (d / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / width as f64);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn rms_norm(x: ArrayView2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().zip(gain.iter()).for_each(|(v, g)| *v *= inv * g);
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct KvCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

impl KvCache {
    fn new(model: &ToyModel) -> Self {
        let empty = || Array2::zeros((0, model.spec.width));
        Self {
            keys: (0..model.spec.num_layers).map(|_| empty()).collect(),
            values: (0..model.spec.num_layers).map(|_| empty()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.keys[0].nrows()
    }
}

impl ToyModel {
    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }

    /// SHA-256 over every parameter in a fixed order.
    pub fn parameter_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |values: &mut dyn Iterator<Item = &f64>| {
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        };
        feed(&mut self.embed.iter());
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out] {
                feed(&mut m.iter());
            }
            feed(&mut b.attn_norm.iter());
            feed(&mut b.mlp_norm.iter());
        }
        feed(&mut self.final_norm.iter());
        feed(&mut self.head.iter());
        hex::encode(hasher.finalize())
    }

    /// Runs `ids` at positions `cache.len()..`, returning each block's output
    /// for the new positions.
    fn forward(&self, ids: &[u32], cache: &mut KvCache) -> Result<Vec<Array2<f64>>> {
        let w = self.spec.width;
        let start = cache.len();
        if start + ids.len() > CONTEXT_WINDOW {
            return Err(Error::ContextOverflow { len: start + ids.len(), window: CONTEXT_WINDOW });
        }
        let mut x = Array2::zeros((ids.len(), w));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.spec.vocab {
                return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
            }
            let row = &self.embed.row(id as usize) + &position_code(start + i, w);
            x.row_mut(i).assign(&row);
        }

        let head_dim = w / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let a = rms_norm(x.view(), &block.attn_norm);
            let q = a.dot(&block.wq);
            let k = a.dot(&block.wk);
            let v = a.dot(&block.wv);
            for i in 0..ids.len() {
                cache.keys[l].push_row(k.row(i)).expect("width matches");
                cache.values[l].push_row(v.row(i)).expect("width matches");
            }
            let keys = &cache.keys[l];
            let values = &cache.values[l];

            let mut attn = Array2::zeros((ids.len(), w));
            for h in 0..self.num_heads {
                let cols = s![.., h * head_dim..(h + 1) * head_dim];
                let kh = keys.slice(cols);
                let vh = values.slice(cols);
                for i in 0..ids.len() {
                    let visible = start + i + 1;
                    let qi = q.slice(s![i, h * head_dim..(h + 1) * head_dim]);
                    let scores = kh.slice(s![..visible, ..]).dot(&qi) * scale;
                    let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                    let weights = scores.mapv(|s| (s - max).exp());
                    let weights = &weights / weights.sum();
                    let out = weights.dot(&vh.slice(s![..visible, ..]));
                    attn.slice_mut(s![i, h * head_dim..(h + 1) * head_dim]).assign(&out);
                }
            }
            x = x + attn.dot(&block.wo);

            let m = rms_norm(x.view(), &block.mlp_norm);
            let hidden = m.dot(&block.w_in).mapv(silu);
            x = x + hidden.dot(&block.w_out);
            outputs.push(x.clone());
        }
        Ok(outputs)
    }
}

impl LanguageModel for ToyModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    fn vocab_size(&self) -> usize {
        self.spec.vocab
    }

    fn context_window(&self) -> usize {
        CONTEXT_WINDOW
    }

    fn bos_id(&self) -> u32 {
        BOS
    }

    fn eos_ids(&self) -> &[u32] {
        &self.eos
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(self.tokenizer.encode(text))
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(self.tokenizer.decode(ids))
    }

    fn block_outputs(&self, ids: &[u32]) -> Result<Vec<Array2<f64>>> {
        self.forward(ids, &mut KvCache::new(self))
    }

    fn final_norm(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        rms_norm(hidden, &self.final_norm)
    }

    fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        hidden.dot(&self.head)
    }

    fn session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(ToySession { model: self, cache: KvCache::new(self) })
    }
}

struct ToySession<'a> {
    model: &'a ToyModel,
    cache: KvCache,
}

impl DecodeSession for ToySession<'_> {
    fn extend(&mut self, ids: &[u32]) -> Result<Array2<f64>> {
        let blocks = self.model.forward(ids, &mut self.cache)?;
        let last = blocks.last().expect("at least one block");
        Ok(self.model.head(self.model.final_norm(last.view()).view()))
    }

    fn position(&self) -> usize {
        self.cache.len()
    }
}

impl ToyModel {
    /// Softmax over the full vocabulary of every layer at every position,
    /// `[layer][position][token]`, via the regular forward path.
    pub fn layer_distributions(&self, ids: &[u32], apply_final_norm: bool) -> Result<Vec<Array2<f64>>> {
        let blocks = self.block_outputs(ids)?;
        let last = blocks.len() - 1;
        Ok(blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let states = if apply_final_norm || l == last { self.final_norm(b.view()) } else { b.clone() };
                let mut logits = self.head(states.view());
                for mut row in logits.axis_iter_mut(Axis(0)) {
                    let p = crate::model::softmax(row.view());
                    row.iter_mut().zip(p).for_each(|(x, p)| *x = p);
                }
                logits
            })
            .collect())
    }
}
