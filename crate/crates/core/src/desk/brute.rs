//! Independent recomputation of LI on the toy model.
//!
//! Plain nested loops over `Vec<f64>`: no ndarray, no KV cache, no shared
//! softmax or entropy helpers. Every per-layer distribution is materialised
//! as probabilities over the whole vocabulary before the target entry is
//! read.

use super::ToyModel;
use crate::li::LIProfile;
use crate::model::HeadNormPolicy;
use crate::prompts::RenderedPair;

type Matrix = Vec<Vec<f64>>;

fn to_rows(a: &ndarray::Array2<f64>) -> Matrix {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn matmul(x: &Matrix, w: &Matrix) -> Matrix {
    let cols = w[0].len();
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|c| {
                    let mut acc = 0.0;
                    for k in 0..row.len() {
                        acc += row[k] * w[k][c];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn rms(x: &Matrix, gain: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            let mut ms = 0.0;
            for v in row {
                ms += v * v;
            }
            ms /= row.len() as f64;
            let denom = (ms + 1e-6).sqrt();
            row.iter().zip(gain).map(|(v, g)| v / denom * g).collect()
        })
        .collect()
}

fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut max = logits[0];
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut total = 0.0;
    for w in &weights {
        total += w;
    }
    weights.iter().map(|w| w / total).collect()
}

/// `[layer][position][token]` probabilities for every block of the toy model.
fn all_layer_distributions(model: &ToyModel, ids: &[u32], apply_final_norm: bool) -> Vec<Matrix> {
    let width = model.spec.width;
    let heads = model.num_heads;
    let hd = width / heads;
    let n = ids.len();

    let embed = to_rows(&model.embed);
    let mut x: Matrix = (0..n)
        .map(|pos| {
            (0..width)
                .map(|d| {
                    let pair = (d / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
                    let code = if d % 2 == 0 { angle.sin() } else { angle.cos() };
                    embed[ids[pos] as usize][d] + code
                })
                .collect()
        })
        .collect();

    let final_gain = model.final_norm.to_vec();
    let head = to_rows(&model.head);
    let mut out = Vec::new();
    for (l, block) in model.blocks.iter().enumerate() {
        let a = rms(&x, &block.attn_norm.to_vec());
        let q = matmul(&a, &to_rows(&block.wq));
        let k = matmul(&a, &to_rows(&block.wk));
        let v = matmul(&a, &to_rows(&block.wv));
        let mut mixed = vec![vec![0.0; width]; n];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let mut dot = 0.0;
                        for d in h * hd..(h + 1) * hd {
                            dot += q[i][d] * k[j][d];
                        }
                        dot / (hd as f64).sqrt()
                    })
                    .collect();
                let weights = probabilities(&scores);
                for d in h * hd..(h + 1) * hd {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += weights[j] * v[j][d];
                    }
                    mixed[i][d] = acc;
                }
            }
        }
        let attn = matmul(&mixed, &to_rows(&block.wo));
        for i in 0..n {
            for d in 0..width {
                x[i][d] += attn[i][d];
            }
        }
        let m = rms(&x, &block.mlp_norm.to_vec());
        let hidden: Matrix = matmul(&m, &to_rows(&block.w_in))
            .into_iter()
            .map(|row| row.into_iter().map(|z| z / (1.0 + (-z).exp())).collect())
            .collect();
        let mlp = matmul(&hidden, &to_rows(&block.w_out));
        for i in 0..n {
            for d in 0..width {
                x[i][d] += mlp[i][d];
            }
        }

        let is_last = l + 1 == model.blocks.len();
        let states = if apply_final_norm || is_last { rms(&x, &final_gain) } else { x.clone() };
        let logits = matmul(&states, &head);
        out.push(logits.iter().map(|row| probabilities(row)).collect());
    }
    out
}

fn pass_entropies(model: &ToyModel, ids: &[u32], start: usize, layers: &[usize], policy: HeadNormPolicy) -> Vec<f64> {
    let dists = all_layer_distributions(model, ids, policy == HeadNormPolicy::ApplyFinalNorm);
    let t = (ids.len() - start) as f64;
    layers
        .iter()
        .map(|&layer| {
            let mut nll = 0.0;
            for pos in start..ids.len() {
                nll -= dists[layer - 1][pos - 1][ids[pos] as usize].log2();
            }
            nll / t
        })
        .collect()
}

/// Recomputes the LI profile of `pair` from scratch on the toy model.
pub fn brute_force_li(model: &ToyModel, layers: &[usize], policy: HeadNormPolicy, pair: &RenderedPair) -> LIProfile {
    let h_null = pass_entropies(model, &pair.null_pass.ids, pair.target_span_null.start, layers, policy);
    let h_ctx = pass_entropies(model, &pair.ctx_pass.ids, pair.target_span_ctx.start, layers, policy);
    let i_layer: Vec<f64> = (0..layers.len()).map(|i| h_null[i] - h_ctx[i]).collect();
    let mut li_total = 0.0;
    for v in &i_layer {
        li_total += v;
    }
    LIProfile {
        example_id: pair.example_id.clone(),
        layer_ids: layers.to_vec(),
        h_null,
        h_ctx,
        i_layer,
        li_total,
        target_len: pair.target_span_ctx.len(),
    }
}
