use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{entropy_bits, softmax, LanguageModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub decoding: Decoding,
    pub max_tokens: usize,
    /// Stop once the answer text contains a line break after some content.
    pub stop_at_newline: bool,
}

/// A generated continuation together with the model's own distribution at
/// every step (temperature 1, regardless of the sampling temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, excluding a terminating end-of-sequence token.
    pub ids: Vec<u32>,
    pub text: String,
    /// log₂ probability of each chosen token, including a terminating
    /// end-of-sequence or line-break token.
    pub token_log_probs: Vec<f64>,
    /// Entropy in bits of the full next-token distribution at each step.
    pub step_entropies: Vec<f64>,
}

pub(crate) fn run(model: &dyn LanguageModel, prompt: &[u32], opts: &GenerateOptions) -> Result<Generation> {
    let mut rng = match opts.decoding {
        Decoding::Sample { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Decoding::Greedy => None,
    };

    let mut session = model.session();
    let prefill = session.extend(prompt)?;
    let mut logits = prefill.row(prompt.len() - 1).to_owned();

    let mut ids = Vec::new();
    let mut token_log_probs = Vec::new();
    let mut step_entropies = Vec::new();
    for _ in 0..opts.max_tokens {
        let probs = softmax(logits.view());
        step_entropies.push(entropy_bits(&probs));
        let next = match (&mut rng, opts.decoding) {
            (Some(rng), Decoding::Sample { temperature, .. }) => sample(logits.view(), temperature, rng),
            _ => argmax(&probs),
        };
        token_log_probs.push(probs[next].log2());
        let next = next as u32;
        if model.eos_ids().contains(&next) {
            break;
        }
        ids.push(next);
        if opts.stop_at_newline {
            let text = model.decode(&ids)?;
            if text.trim_start().contains('\n') {
                break;
            }
        }
        logits = session.extend(&[next])?.row(0).to_owned();
    }

    let mut text = model.decode(&ids)?;
    if opts.stop_at_newline {
        text = text.trim_start().lines().next().unwrap_or("").to_string();
    }
    Ok(Generation { ids, text: text.trim().to_string(), token_log_probs, step_entropies })
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: ArrayView1<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled = logits.mapv(|x| x / temperature);
    let probs = softmax(scaled.view());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
