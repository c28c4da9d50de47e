//! Test oracles written independently of the library kernels.
#![allow(dead_code)]

use kcache::model::{ModelWeights, RMS_EPS};
use kcache::tensor::Matrix;

fn mat_vec(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, &xv) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xv * w.get(k, j) as f64;
        }
    }
    out
}

fn rms_norm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + RMS_EPS as f64).sqrt();
    x.iter().zip(g).map(|(v, &g)| v / r * g as f64).collect()
}

/// Greedy-free full recompute: logits after the last token of `seq`.
pub fn oracle_logits(w: &ModelWeights, seq: &[u32]) -> Vec<f64> {
    let c = w.config;
    let (n, h) = (c.n_heads, c.head_dim);
    let mut xs: Vec<Vec<f64>> =
        seq.iter().map(|&t| w.embedding.row(t as usize).iter().map(|&v| v as f64).collect()).collect();
    for lw in &w.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x, &lw.attn_gain)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(x, &lw.wq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(x, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| mat_vec(x, &lw.wv)).collect();
        for i in 0..xs.len() {
            let mut attn = vec![0.0; n * h];
            for head in 0..n {
                let r = head * h..(head + 1) * h;
                let s: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (h as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in r.clone() {
                        attn[c] += e[j] / z * v[j][c];
                    }
                }
            }
            let o = mat_vec(&attn, &lw.wo);
            for (x, o) in xs[i].iter_mut().zip(o) {
                *x += o;
            }
        }
        for x in xs.iter_mut() {
            let hn = rms_norm(x, &lw.ffn_gain);
            let g = mat_vec(&hn, &lw.w_gate);
            let u = mat_vec(&hn, &lw.w_up);
            let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            for (x, d) in x.iter_mut().zip(mat_vec(&a, &lw.w_down)) {
                *x += d;
            }
        }
    }
    mat_vec(&rms_norm(xs.last().unwrap(), &w.final_gain), &w.head)
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max);
    num / b.iter().map(|y| y.abs()).fold(0.0, f64::max)
}

pub fn bits(v: &[Vec<f32>]) -> Vec<Vec<u32>> {
    v.iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect()
}
