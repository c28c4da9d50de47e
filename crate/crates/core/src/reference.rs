//! Cache-free forward pass in f64, independent of the engine's kernels.
//! Every call recomputes the whole sequence from scratch.

use crate::error::{KcError, Result};
use crate::model::{LayerWeights, ModelWeights, RMS_EPS};
use crate::tensor::Matrix;

type Rows = Vec<Vec<f64>>;

fn project(x: &Rows, w: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * w.get(k, j) as f64).sum())
                .collect()
        })
        .collect()
}

fn rms(x: &Rows, gain: &[f32]) -> Rows {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
            row.iter().zip(gain).map(|(v, &g)| v * inv * g as f64).collect()
        })
        .collect()
}

fn causal_attention(q: &Rows, k: &Rows, v: &Rows, n_heads: usize, head_dim: usize) -> Rows {
    let s = q.len();
    let scale = (head_dim as f64).sqrt();
    let mut out = vec![vec![0.0; n_heads * head_dim]; s];
    for head in 0..n_heads {
        let cols = head * head_dim..(head + 1) * head_dim;
        for i in 0..s {
            let scores: Vec<f64> = (0..=i)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e / z * v[j][c];
                }
            }
        }
    }
    out
}

fn block(x: &Rows, lw: &LayerWeights, n_heads: usize, head_dim: usize) -> Rows {
    let xn = rms(x, &lw.attn_gain);
    let attn = causal_attention(&project(&xn, &lw.wq), &project(&xn, &lw.wk), &project(&xn, &lw.wv), n_heads, head_dim);
    let proj = project(&attn, &lw.wo);
    let h: Rows = x.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let hn = rms(&h, &lw.ffn_gain);
    let gate = project(&hn, &lw.w_gate);
    let up = project(&hn, &lw.w_up);
    let act: Rows = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(&g, &u)| g / (1.0 + (-g).exp()) * u).collect())
        .collect();
    let down = project(&act, &lw.w_down);
    h.iter().zip(&down).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Next-token logits after the last position of `tokens`.
pub fn next_logits(weights: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(KcError::arg("empty sequence"));
    }
    let mut x: Rows = tokens
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab {
                Ok(weights.embedding.row(t as usize).iter().map(|&v| v as f64).collect())
            } else {
                Err(KcError::arg(format!("token id {t} out of range")))
            }
        })
        .collect::<Result<_>>()?;
    for lw in &weights.layers {
        x = block(&x, lw, cfg.n_heads, cfg.head_dim);
    }
    let last = rms(&vec![x.pop().expect("non-empty")], &weights.final_gain);
    Ok(project(&last, &weights.head).remove(0))
}

/// Greedy generation by full recompute. Returns the emitted tokens and the
/// logits behind each of them.
pub fn generate(weights: &ModelWeights, prompt: &[u32], gen_len: usize) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::with_capacity(gen_len);
    let mut logits = Vec::with_capacity(gen_len);
    for _ in 0..gen_len {
        let l = next_logits(weights, &seq)?;
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        seq.push(best as u32);
        tokens.push(best as u32);
        logits.push(l);
    }
    Ok((tokens, logits))
}

/// `max |a - b| / max |b|`.
pub fn relative_error(a: &[f32], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
