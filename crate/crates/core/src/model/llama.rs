//! Llama-family checkpoints (Llama, Mistral, Qwen2) loaded from a local
//! directory of `config.json`, `tokenizer.json` and safetensors weights.
//!
//! The forward pass runs in `f32` on the CPU and mirrors the reference
//! implementation: pre-norm RMSNorm blocks, rotary position embeddings
//! (with optional `linear` or `llama3` frequency scaling), grouped-query
//! attention and a SiLU-gated MLP.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;
use serde_json::Value;
use tokenizers::Tokenizer;

use super::{DecodeSession, LanguageModel, TokenSequence};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RawConfig {
    model_type: String,
    vocab_size: usize,
    hidden_size: usize,
    intermediate_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    num_key_value_heads: Option<usize>,
    head_dim: Option<usize>,
    #[serde(default = "default_eps")]
    rms_norm_eps: f64,
    rope_theta: Option<f64>,
    rope_scaling: Option<RopeParams>,
    rope_parameters: Option<RopeParams>,
    max_position_embeddings: Option<usize>,
    #[serde(default)]
    tie_word_embeddings: bool,
    attention_bias: Option<bool>,
    sliding_window: Option<usize>,
    hidden_act: Option<String>,
    bos_token_id: Option<Value>,
    eos_token_id: Option<Value>,
}

fn default_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RopeParams {
    rope_type: Option<String>,
    #[serde(rename = "type")]
    legacy_type: Option<String>,
    rope_theta: Option<f64>,
    factor: Option<f64>,
    low_freq_factor: Option<f64>,
    high_freq_factor: Option<f64>,
    original_max_position_embeddings: Option<f64>,
}

fn token_ids(v: &Option<Value>) -> Vec<u32> {
    match v {
        Some(Value::Number(n)) => n.as_u64().map(|x| vec![x as u32]).unwrap_or_default(),
        Some(Value::Array(a)) => a.iter().filter_map(Value::as_u64).map(|x| x as u32).collect(),
        _ => Vec::new(),
    }
}

/// Rotary inverse frequencies after any configured scaling.
fn inverse_frequencies(head_dim: usize, theta: f64, scaling: Option<&RopeParams>) -> Result<Vec<f32>> {
    let base: Vec<f64> = (0..head_dim / 2).map(|i| 1.0 / theta.powf((2 * i) as f64 / head_dim as f64)).collect();
    let Some(p) = scaling else {
        return Ok(base.into_iter().map(|f| f as f32).collect());
    };
    let kind = p.rope_type.as_deref().or(p.legacy_type.as_deref()).unwrap_or("default");
    let scaled: Vec<f64> = match kind {
        "default" => base,
        "linear" => {
            let factor = p.factor.unwrap_or(1.0);
            base.into_iter().map(|f| f / factor).collect()
        }
        "llama3" => {
            let factor = p.factor.unwrap_or(8.0);
            let low = p.low_freq_factor.unwrap_or(1.0);
            let high = p.high_freq_factor.unwrap_or(4.0);
            let old_ctx = p.original_max_position_embeddings.unwrap_or(8192.0);
            let low_wavelen = old_ctx / low;
            let high_wavelen = old_ctx / high;
            base.into_iter()
                .map(|f| {
                    let wavelen = 2.0 * std::f64::consts::PI / f;
                    if wavelen > low_wavelen {
                        f / factor
                    } else if wavelen < high_wavelen {
                        f
                    } else {
                        let smooth = (old_ctx / wavelen - low) / (high - low);
                        (1.0 - smooth) * f / factor + smooth * f
                    }
                })
                .collect()
        }
        other => return Err(Error::UnsupportedModel(format!("rope scaling type {other:?}"))),
    };
    Ok(scaled.into_iter().map(|f| f as f32).collect())
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

struct Linear {
    /// `[out, in]`, as stored in the checkpoint.
    weight: Array2<f32>,
    bias: Option<Array1<f32>>,
}

impl Linear {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

struct Block {
    attn_norm: Array1<f32>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp_norm: Array1<f32>,
    gate: Linear,
    up: Linear,
    down: Linear,
}

struct TensorStore {
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorStore {
    fn load(dir: &Path) -> Result<Self> {
        let mut tensors = HashMap::new();
        for file in weight_files(dir)? {
            let bytes = fs::read(&file)?;
            let st =
                SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
            for (name, view) in st.tensors() {
                let data = to_f32(view.dtype(), view.data())
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: unsupported dtype {:?}", view.dtype())))?;
                tensors.insert(name, (view.shape().to_vec(), data));
            }
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.tensors.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let (shape, data) = self.take(name)?;
        if shape != [rows, cols] {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected [{rows}, {cols}]")));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        let (shape, data) = self.take(name)?;
        if shape != [len] {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected [{len}]")));
        }
        Ok(Array1::from(data))
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) -> Result<Linear> {
        let weight = self.matrix(&format!("{prefix}.weight"), out, inp)?;
        let bias = if bias { Some(self.vector(&format!("{prefix}.bias"), out)?) } else { None };
        Ok(Linear { weight, bias })
    }
}

fn weight_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let single = dir.join("model.safetensors");
    if single.is_file() {
        return Ok(vec![single]);
    }
    let index = dir.join("model.safetensors.index.json");
    if index.is_file() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&index)?)?;
        let mut files: Vec<String> = v
            .get("weight_map")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Checkpoint("index without weight_map".into()))?
            .values()
            .filter_map(Value::as_str)
            .map(str::to_string)
            .collect();
        files.sort();
        files.dedup();
        return Ok(files.into_iter().map(|f| dir.join(f)).collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Checkpoint(format!("no safetensors weights in {}", dir.display())));
    }
    Ok(files)
}

fn to_f32(dtype: Dtype, data: &[u8]) -> Option<Vec<f32>> {
    Some(match dtype {
        Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => data.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        Dtype::BF16 => data.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct LlamaModel {
    id: String,
    vocab_size: usize,
    num_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
    eps: f32,
    context_window: usize,
    sliding_window: Option<usize>,
    inv_freq: Vec<f32>,
    embed: Array2<f32>,
    blocks: Vec<Block>,
    norm: Array1<f32>,
    /// `None` when the head is tied to the embedding.
    lm_head: Option<Array2<f32>>,
    tokenizer: Tokenizer,
    bos: u32,
    eos: Vec<u32>,
}

impl LlamaModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)
            .map_err(|e| Error::Checkpoint(format!("config.json: {e}")))?;
        let attention_bias = match raw.model_type.as_str() {
            "llama" | "mistral" => raw.attention_bias.unwrap_or(false),
            "qwen2" => true,
            other => return Err(Error::UnsupportedModel(format!("model_type {other:?}"))),
        };
        if let Some(act) = raw.hidden_act.as_deref() {
            if act != "silu" {
                return Err(Error::UnsupportedModel(format!("activation {act:?}")));
            }
        }
        let d = raw.hidden_size;
        let num_heads = raw.num_attention_heads;
        let num_kv_heads = raw.num_key_value_heads.unwrap_or(num_heads);
        let head_dim = raw.head_dim.unwrap_or(d / num_heads);
        if !num_heads.is_multiple_of(num_kv_heads) {
            return Err(Error::Checkpoint(format!("{num_heads} heads not divisible by {num_kv_heads} kv heads")));
        }
        let rope = raw.rope_parameters.clone().or(raw.rope_scaling.clone());
        let theta = raw.rope_theta.or(rope.as_ref().and_then(|r| r.rope_theta)).unwrap_or(10000.0);
        let inv_freq = inverse_frequencies(head_dim, theta, rope.as_ref())?;

        let tokenizer = Tokenizer::from_file(dir.join("tokenizer.json"))
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", dir.join("tokenizer.json").display())))?;

        let mut store = TensorStore::load(dir)?;
        let embed = store.matrix("model.embed_tokens.weight", raw.vocab_size, d)?;
        let (qd, kvd) = (num_heads * head_dim, num_kv_heads * head_dim);
        let mut blocks = Vec::with_capacity(raw.num_hidden_layers);
        for i in 0..raw.num_hidden_layers {
            let p = format!("model.layers.{i}");
            blocks.push(Block {
                attn_norm: store.vector(&format!("{p}.input_layernorm.weight"), d)?,
                q: store.linear(&format!("{p}.self_attn.q_proj"), qd, d, attention_bias)?,
                k: store.linear(&format!("{p}.self_attn.k_proj"), kvd, d, attention_bias)?,
                v: store.linear(&format!("{p}.self_attn.v_proj"), kvd, d, attention_bias)?,
                o: store.linear(&format!("{p}.self_attn.o_proj"), d, qd, false)?,
                mlp_norm: store.vector(&format!("{p}.post_attention_layernorm.weight"), d)?,
                gate: store.linear(&format!("{p}.mlp.gate_proj"), raw.intermediate_size, d, false)?,
                up: store.linear(&format!("{p}.mlp.up_proj"), raw.intermediate_size, d, false)?,
                down: store.linear(&format!("{p}.mlp.down_proj"), d, raw.intermediate_size, false)?,
            });
        }
        let norm = store.vector("model.norm.weight", d)?;
        let lm_head = if raw.tie_word_embeddings || !store.tensors.contains_key("lm_head.weight") {
            None
        } else {
            Some(store.matrix("lm_head.weight", raw.vocab_size, d)?)
        };

        let mut eos = token_ids(&raw.eos_token_id);
        if let Ok(text) = fs::read_to_string(dir.join("generation_config.json")) {
            if let Ok(v) = serde_json::from_str::<Value>(&text) {
                eos.extend(token_ids(&v.get("eos_token_id").cloned()));
            }
        }
        eos.sort_unstable();
        eos.dedup();
        let bos = token_ids(&raw.bos_token_id)
            .first()
            .or(eos.first())
            .copied()
            .ok_or_else(|| Error::Checkpoint("config has neither bos_token_id nor eos_token_id".into()))?;

        Ok(Self {
            id: dir.display().to_string(),
            vocab_size: raw.vocab_size,
            num_heads,
            num_kv_heads,
            head_dim,
            eps: raw.rms_norm_eps as f32,
            context_window: raw.max_position_embeddings.unwrap_or(2048),
            sliding_window: if raw.model_type == "mistral" { raw.sliding_window } else { None },
            inv_freq,
            embed,
            blocks,
            norm,
            lm_head,
            tokenizer,
            bos,
            eos,
        })
    }

    fn rms(&self, x: ArrayView2<f32>, weight: &Array1<f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
            let inv = 1.0 / (ms + self.eps).sqrt();
            row.iter_mut().zip(weight.iter()).for_each(|(v, w)| *v = w * (*v * inv));
        }
        out
    }

    fn project(&self, x: ArrayView2<f32>) -> Array2<f32> {
        match &self.lm_head {
            Some(h) => x.dot(&h.t()),
            None => x.dot(&self.embed.t()),
        }
    }

    /// Rotates each head of `x` (`[n, heads * head_dim]`) for positions
    /// `start..start + n`, using the half-split pairing `(i, i + head_dim/2)`.
    fn rope(&self, x: &mut Array2<f32>, heads: usize, start: usize) {
        let half = self.head_dim / 2;
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let pos = (start + i) as f32;
            let (cos, sin): (Vec<f32>, Vec<f32>) = self
                .inv_freq
                .iter()
                .map(|f| (pos * f).cos())
                .zip(self.inv_freq.iter().map(|f| (pos * f).sin()))
                .unzip();
            for h in 0..heads {
                let base = h * self.head_dim;
                for k in 0..half {
                    let a = row[base + k];
                    let b = row[base + k + half];
                    row[base + k] = a * cos[k] - b * sin[k];
                    row[base + k + half] = b * cos[k] + a * sin[k];
                }
            }
        }
    }

    /// Runs `ids` at positions `cache.len()..`; returns the new rows of every
    /// block output when `capture` is set, and the last block's output.
    fn forward(&self, ids: &[u32], cache: &mut KvCache, capture: bool) -> Result<(Vec<Array2<f32>>, Array2<f32>)> {
        let start = cache.len;
        let d = self.embed.ncols();
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
            }
            x.row_mut(i).assign(&self.embed.row(id as usize));
        }
        let total = start + ids.len();
        let group = self.num_heads / self.num_kv_heads;
        let hd = self.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();

        let mut captured = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = self.rms(x.view(), &blk.attn_norm);
            let mut q = blk.q.forward(&a);
            let mut k = blk.k.forward(&a);
            let v = blk.v.forward(&a);
            self.rope(&mut q, self.num_heads, start);
            self.rope(&mut k, self.num_kv_heads, start);
            cache.keys[l].append(Axis(0), k.view()).expect("kv width");
            cache.values[l].append(Axis(0), v.view()).expect("kv width");

            let mut attn = Array2::<f32>::zeros((ids.len(), self.num_heads * hd));
            for h in 0..self.num_heads {
                let g = h / group;
                let kh = cache.keys[l].slice(s![..total, g * hd..(g + 1) * hd]);
                let vh = cache.values[l].slice(s![..total, g * hd..(g + 1) * hd]);
                let qh = q.slice(s![.., h * hd..(h + 1) * hd]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let pos = start + i;
                    let lo = self.sliding_window.map_or(0, |w| (pos + 1).saturating_sub(w));
                    for (j, s) in row.iter_mut().enumerate() {
                        if j > pos || j < lo {
                            *s = f32::NEG_INFINITY;
                        }
                    }
                    let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                attn.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&scores.dot(&vh));
            }
            x = x + blk.o.forward(&attn);

            let m = self.rms(x.view(), &blk.mlp_norm);
            let gated = blk.gate.forward(&m).mapv(|z| z / (1.0 + (-z).exp())) * blk.up.forward(&m);
            x = x + blk.down.forward(&gated);
            if capture {
                captured.push(x.clone());
            }
        }
        cache.len = total;
        Ok((captured, x))
    }
}

struct KvCache {
    keys: Vec<Array2<f32>>,
    values: Vec<Array2<f32>>,
    len: usize,
}

impl KvCache {
    fn new(model: &LlamaModel) -> Self {
        let width = model.num_kv_heads * model.head_dim;
        let empty = || Array2::zeros((0, width));
        Self {
            keys: model.blocks.iter().map(|_| empty()).collect(),
            values: model.blocks.iter().map(|_| empty()).collect(),
            len: 0,
        }
    }
}

fn widen(x: Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

fn narrow(x: ArrayView2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}

impl LanguageModel for LlamaModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_window(&self) -> usize {
        self.context_window
    }

    fn bos_id(&self) -> u32 {
        self.bos
    }

    fn eos_ids(&self) -> &[u32] {
        &self.eos
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let enc = self.tokenizer.encode(text, false).map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(TokenSequence::new(enc.get_ids().to_vec(), enc.get_offsets().to_vec()))
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        self.tokenizer.decode(ids, true).map_err(|e| Error::Tokenizer(e.to_string()))
    }

    fn block_outputs(&self, ids: &[u32]) -> Result<Vec<Array2<f64>>> {
        let (blocks, _) = self.forward(ids, &mut KvCache::new(self), true)?;
        Ok(blocks.into_iter().map(widen).collect())
    }

    fn final_norm(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        widen(self.rms(narrow(hidden).view(), &self.norm))
    }

    fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        widen(self.project(narrow(hidden).view()))
    }

    fn session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(LlamaSession { model: self, cache: KvCache::new(self) })
    }
}

struct LlamaSession<'a> {
    model: &'a LlamaModel,
    cache: KvCache,
}

impl DecodeSession for LlamaSession<'_> {
    fn extend(&mut self, ids: &[u32]) -> Result<Array2<f64>> {
        let (_, last) = self.model.forward(ids, &mut self.cache, false)?;
        let normed = self.model.rms(last.view(), &self.model.norm);
        Ok(widen(self.model.project(normed.view())))
    }

    fn position(&self) -> usize {
        self.cache.len
    }
}
