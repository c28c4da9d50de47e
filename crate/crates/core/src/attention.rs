//! Causal prefill attention, full decode attention and TopN decode
//! attention over the tiered cache.
//!
//! All three share the score and weighted-sum helpers below, and every
//! weighted sum walks sequence positions in ascending order. That makes
//! TopN with `N >= s` reproduce full attention bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{KcError, Result};
use crate::kvcache::TieredKVCache;
use crate::tensor::{arg_topk, dot, softmax_in_place, Matrix};

/// Divisor applied to raw `q . k` logits.
pub fn score_scale(head_dim: usize) -> f32 {
    (head_dim as f32).sqrt()
}

/// Deliberate defects used as negative controls by the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Accumulate the TopN weighted sum in rank order instead of ascending
    /// sequence order.
    UnsortedTopN,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopNOptions {
    /// Rescale retained weights to sum to 1.
    pub renormalize: bool,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// Selected positions, strictly increasing.
    pub indices: Vec<usize>,
    /// Raw softmax probabilities at `indices`.
    pub weights: Vec<f32>,
    /// `1 - Σ weights`, floored at zero.
    pub dropped_mass: f32,
}

/// Per-`(batch, head)` selections in batch-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNSelection {
    pub n_heads: usize,
    pub heads: Vec<HeadSelection>,
}

impl TopNSelection {
    pub fn get(&self, batch: usize, head: usize) -> &HeadSelection {
        &self.heads[batch * self.n_heads + head]
    }

    pub fn index_sets(&self) -> Vec<Vec<usize>> {
        self.heads.iter().map(|h| h.indices.clone()).collect()
    }

    pub fn mean_dropped_mass(&self) -> f64 {
        if self.heads.is_empty() {
            return 0.0;
        }
        self.heads.iter().map(|h| h.dropped_mass as f64).sum::<f64>() / self.heads.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopNOutput {
    pub output: Matrix,
    pub selection: TopNSelection,
    pub h2d_bytes: u64,
}

/// Softmax of `q_head . k_j / sqrt(h)` for `j in 0..len`, where `keys` holds
/// seq-major rows of width `d` and the head occupies columns
/// `head*h..(head+1)*h`.
fn head_probs(q_head: &[f32], keys: &[f32], len: usize, d: usize, head: usize, h: usize) -> Vec<f32> {
    let scale = score_scale(h);
    let mut scores: Vec<f32> = (0..len)
        .map(|j| dot(q_head, &keys[j * d + head * h..j * d + (head + 1) * h]) / scale)
        .collect();
    softmax_in_place(&mut scores);
    scores
}

/// `out += Σ w_i * row_i`, rows visited in the order given.
fn accumulate<'a>(out: &mut [f32], terms: impl IntoIterator<Item = (f32, &'a [f32])>) {
    for (w, row) in terms {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
}

fn check_heads(q: &Matrix, n_heads: usize, head_dim: usize) -> Result<()> {
    if q.cols() != n_heads * head_dim {
        return Err(KcError::shape(format!(
            "query width {} != n_heads {n_heads} x head_dim {head_dim}",
            q.cols()
        )));
    }
    Ok(())
}

/// Causal multi-head attention over one prompt. Returns the concatenated
/// head outputs (`Wo` is applied by the caller).
pub fn prefill_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, head_dim: usize) -> Result<Matrix> {
    check_heads(q, n_heads, head_dim)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(KcError::shape(format!(
            "prefill Q {:?}, K {:?}, V {:?} must match",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (s, d, h) = (q.rows(), q.cols(), head_dim);
    let mut out = Matrix::zeros(s, d);
    for i in 0..s {
        for head in 0..n_heads {
            let q_head = &q.row(i)[head * h..(head + 1) * h];
            let probs = head_probs(q_head, k.data(), i + 1, d, head, h);
            let dst = &mut out.row_mut(i)[head * h..(head + 1) * h];
            accumulate(dst, probs.iter().enumerate().map(|(j, &w)| (w, &v.row(j)[head * h..(head + 1) * h])));
        }
    }
    Ok(out)
}

fn decode_preconditions(q: &Matrix, cache: &TieredKVCache, layer: usize) -> Result<usize> {
    let shape = cache.shape();
    check_heads(q, shape.n_heads, shape.head_dim)?;
    if q.rows() != shape.batch {
        return Err(KcError::shape(format!("query has {} rows, batch is {}", q.rows(), shape.batch)));
    }
    if layer >= shape.n_layers {
        return Err(KcError::arg(format!("layer {layer} out of range")));
    }
    let len = cache.layer_len(layer);
    if len == 0 {
        return Err(KcError::state(format!("layer {layer} cache is empty")));
    }
    Ok(len)
}

/// Attention of one query row per batch over every cached position.
///
/// Reads V from whichever tier holds it; slow-tier layers are charged a
/// full H2D pull.
pub fn decode_attention_full(q: &Matrix, cache: &mut TieredKVCache, layer: usize) -> Result<Matrix> {
    let len = decode_preconditions(q, cache, layer)?;
    cache.fetch_full_v(layer)?;
    let shape = cache.shape();
    let (n, h, d) = (shape.n_heads, shape.head_dim, shape.d_model());
    let mut out = Matrix::zeros(shape.batch, d);
    for b in 0..shape.batch {
        let keys = cache.keys(layer, b);
        let values = cache.values(layer, b);
        for head in 0..n {
            let q_head = &q.row(b)[head * h..(head + 1) * h];
            let probs = head_probs(q_head, keys, len, d, head, h);
            let dst = &mut out.row_mut(b)[head * h..(head + 1) * h];
            accumulate(dst, probs.iter().enumerate().map(|(j, &w)| (w, &values[j * d + head * h..j * d + (head + 1) * h])));
        }
    }
    Ok(out)
}

/// TopN attention: full scores against the resident K, softmax, keep the
/// `N` most probable positions per `(batch, head)`, gather only those V rows
/// and take the weighted sum.
///
/// Retained weights are the raw probabilities unless
/// `options.renormalize` is set.
pub fn decode_attention_topn(
    q: &Matrix,
    cache: &mut TieredKVCache,
    layer: usize,
    top_n: usize,
    options: TopNOptions,
) -> Result<TopNOutput> {
    if top_n == 0 {
        return Err(KcError::arg("TopN requires N >= 1"));
    }
    let len = decode_preconditions(q, cache, layer)?;
    let shape = cache.shape();
    let (n, h, d) = (shape.n_heads, shape.head_dim, shape.d_model());

    let mut heads = Vec::with_capacity(shape.batch * n);
    for b in 0..shape.batch {
        let keys = cache.keys(layer, b);
        for head in 0..n {
            let q_head = &q.row(b)[head * h..(head + 1) * h];
            let probs = head_probs(q_head, keys, len, d, head, h);
            let indices = arg_topk(&probs, top_n)?;
            let weights: Vec<f32> = indices.iter().map(|&i| probs[i]).collect();
            let mut kept = 0.0f32;
            for &w in &weights {
                kept += w;
            }
            heads.push(HeadSelection { indices, weights, dropped_mass: (1.0 - kept).max(0.0) });
        }
    }
    let selection = TopNSelection { n_heads: n, heads };
    let gathered = cache.gather_v(layer, &selection.index_sets())?;

    let mut output = Matrix::zeros(shape.batch, d);
    for (pair, sel) in selection.heads.iter().enumerate() {
        let (b, head) = (pair / n, pair % n);
        let block = &gathered.blocks[pair];
        let weights: Vec<f32> = if options.renormalize {
            let total: f32 = sel.weights.iter().sum();
            sel.weights.iter().map(|&w| w / total).collect()
        } else {
            sel.weights.clone()
        };
        let mut order: Vec<usize> = (0..weights.len()).collect();
        if options.fault == Some(Fault::UnsortedTopN) {
            order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        }
        let dst = &mut output.row_mut(b)[head * h..(head + 1) * h];
        accumulate(dst, order.iter().map(|&r| (weights[r], &block[r * h..(r + 1) * h])));
    }
    Ok(TopNOutput { output, selection, h2d_bytes: gathered.h2d_bytes })
}

/// Softmax rows of every `(batch, head)` for one query per batch, without
/// touching V or the ledger. Batch-major.
pub fn decode_probabilities(q: &Matrix, cache: &TieredKVCache, layer: usize) -> Result<Vec<Vec<f32>>> {
    let len = decode_preconditions(q, cache, layer)?;
    let shape = cache.shape();
    let (n, h, d) = (shape.n_heads, shape.head_dim, shape.d_model());
    let mut out = Vec::with_capacity(shape.batch * n);
    for b in 0..shape.batch {
        for head in 0..n {
            out.push(head_probs(&q.row(b)[head * h..(head + 1) * h], cache.keys(layer, b), len, d, head, h));
        }
    }
    Ok(out)
}

/// Probability mass TopN would drop on one softmax row.
pub fn dropped_mass(probs: &[f32], top_n: usize) -> Result<f32> {
    let mut kept = 0.0f32;
    for i in arg_topk(probs, top_n)? {
        kept += probs[i];
    }
    Ok((1.0 - kept).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::{CacheShape, TierPlacement};
    use crate::rng::SeededRng;

    fn cache_with(shape: CacheShape, resident: usize, keys: &[Matrix], values: &[Matrix]) -> TieredKVCache {
        let placement = TierPlacement::new(resident, shape.n_layers, 2).unwrap();
        let mut cache = TieredKVCache::new(shape, placement).unwrap();
        for layer in 0..shape.n_layers {
            let k: Vec<&[f32]> = keys.iter().map(Matrix::data).collect();
            let v: Vec<&[f32]> = values.iter().map(Matrix::data).collect();
            cache.append_kv(layer, &k, &v).unwrap();
            cache.offload_prefill_v(layer).unwrap();
        }
        cache
    }

    fn random_cache(seed: u64, batch: usize, s: usize, resident: usize) -> (TieredKVCache, Matrix) {
        let shape = CacheShape { batch, n_layers: 2, n_heads: 2, head_dim: 4 };
        let mut rng = SeededRng::new(seed);
        let keys: Vec<Matrix> = (0..batch).map(|_| Matrix::random(s, 8, 2.0, &mut rng)).collect();
        let values: Vec<Matrix> = (0..batch).map(|_| Matrix::random(s, 8, 2.0, &mut rng)).collect();
        let q = Matrix::random(batch, 8, 2.0, &mut rng);
        (cache_with(shape, resident, &keys, &values), q)
    }

    #[test]
    fn scale_is_sqrt_head_dim() {
        assert_eq!(score_scale(16), 4.0);
        assert_eq!(score_scale(128), 128f32.sqrt());
    }

    #[test]
    fn single_key_returns_value_row() {
        let (mut cache, q) = random_cache(1, 1, 1, 0);
        let out = decode_attention_full(&q, &mut cache, 0).unwrap();
        assert_eq!(out.data(), cache.values(0, 0));
    }

    #[test]
    fn equal_scores_average_values() {
        let shape = CacheShape { batch: 1, n_layers: 1, n_heads: 2, head_dim: 4 };
        let mut rng = SeededRng::new(4);
        let keys = Matrix::random(5, 8, 1.0, &mut rng);
        let values = Matrix::from_vec(5, 8, (0..40).map(|i| i as f32).collect()).unwrap();
        let mut cache = cache_with(shape, 1, &[keys], std::slice::from_ref(&values));
        let q = Matrix::zeros(1, 8);
        let out = decode_attention_full(&q, &mut cache, 0).unwrap();
        for c in 0..8 {
            let mean = (0..5).map(|r| values.get(r, c)).sum::<f32>() / 5.0;
            assert!((out.get(0, c) - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn prefill_single_token_matches_decode() {
        let (mut cache, _) = random_cache(2, 1, 1, 1);
        let mut rng = SeededRng::new(99);
        let q = Matrix::random(1, 8, 1.0, &mut rng);
        let k = Matrix::from_vec(1, 8, cache.keys(0, 0).to_vec()).unwrap();
        let v = Matrix::from_vec(1, 8, cache.values(0, 0).to_vec()).unwrap();
        let pre = prefill_attention(&q, &k, &v, 2, 4).unwrap();
        let dec = decode_attention_full(&q, &mut cache, 0).unwrap();
        assert_eq!(pre, dec);
    }

    #[test]
    fn prefill_uniform_keys_give_running_mean() {
        let s = 6;
        let k = Matrix::from_vec(s, 8, vec![0.3; s * 8]).unwrap();
        let mut rng = SeededRng::new(8);
        let q = Matrix::random(s, 8, 1.0, &mut rng);
        let v = Matrix::random(s, 8, 1.0, &mut rng);
        let out = prefill_attention(&q, &k, &v, 2, 4).unwrap();
        for i in 0..s {
            for c in 0..8 {
                let mean = (0..=i).map(|r| v.get(r, c)).sum::<f32>() / (i + 1) as f32;
                assert!((out.get(i, c) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prefill_matches_position_loop_oracle() {
        let (s, n, h) = (16, 2, 4);
        let d = n * h;
        let mut rng = SeededRng::new(16);
        let q = Matrix::random(s, d, 1.5, &mut rng);
        let k = Matrix::random(s, d, 1.5, &mut rng);
        let v = Matrix::random(s, d, 1.5, &mut rng);
        let got = prefill_attention(&q, &k, &v, n, h).unwrap();
        for i in 0..s {
            for head in 0..n {
                let cols = head * h..(head + 1) * h;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q.get(i, c) as f64 * k.get(j, c) as f64).sum::<f64>() / (h as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for c in cols.clone() {
                    let want: f64 = (0..=i).map(|j| (scores[j] - max).exp() / z * v.get(j, c) as f64).sum();
                    assert!((got.get(i, c) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn topn_hand_checked_selection() {
        // One head of width 1 with keys chosen so softmax = [0.1, 0.4, 0.2, 0.3].
        let shape = CacheShape { batch: 1, n_layers: 1, n_heads: 1, head_dim: 1 };
        let probs = [0.1f32, 0.4, 0.2, 0.3];
        let keys = Matrix::from_vec(4, 1, probs.iter().map(|p| p.ln()).collect()).unwrap();
        let values = Matrix::from_vec(4, 1, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let mut cache = cache_with(shape, 0, &[keys], &[values]);
        let q = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let out = decode_attention_topn(&q, &mut cache, 0, 2, TopNOptions::default()).unwrap();
        let sel = out.selection.get(0, 0);
        assert_eq!(sel.indices, vec![1, 3]);
        assert!((sel.weights[0] - 0.4).abs() < 1e-6);
        assert!((sel.weights[1] - 0.3).abs() < 1e-6);
        assert!((sel.dropped_mass - 0.3).abs() < 1e-6);
        let want = sel.weights[0] * 20.0 + sel.weights[1] * 40.0;
        assert_eq!(out.output.get(0, 0), want);
        assert_eq!(out.h2d_bytes, 2 * 2);
    }

    #[test]
    fn topn_full_coverage_is_bitwise_full() {
        for seed in 0..20 {
            let (mut cache, q) = random_cache(seed, 2, 9, 0);
            for layer in 0..2 {
                let full = decode_attention_full(&q, &mut cache.clone(), layer).unwrap();
                let topn = decode_attention_topn(&q, &mut cache, layer, 64, TopNOptions::default()).unwrap();
                assert_eq!(full.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                           topn.output.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                for sel in &topn.selection.heads {
                    assert_eq!(sel.indices, (0..9).collect::<Vec<_>>());
                    assert!(sel.dropped_mass.abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn topn_h2d_accounting() {
        let (mut cache, q) = random_cache(5, 2, 10, 1);
        let resident = decode_attention_topn(&q, &mut cache, 0, 4, TopNOptions::default()).unwrap();
        assert_eq!(resident.h2d_bytes, 0);
        let offloaded = decode_attention_topn(&q, &mut cache, 1, 64, TopNOptions::default()).unwrap();
        // N clamps to the 10 cached rows: bytes * b * n * 10 * h.
        assert_eq!(offloaded.h2d_bytes, 2 * 2 * 2 * 10 * 4);
    }

    #[test]
    fn topn_rejects_zero_and_empty() {
        let (mut cache, q) = random_cache(5, 1, 3, 0);
        assert!(matches!(decode_attention_topn(&q, &mut cache, 0, 0, TopNOptions::default()), Err(KcError::Argument(_))));
        let shape = CacheShape { batch: 1, n_layers: 1, n_heads: 2, head_dim: 4 };
        let mut empty = TieredKVCache::new(shape, TierPlacement::new(0, 1, 2).unwrap()).unwrap();
        assert!(matches!(decode_attention_full(&q, &mut empty, 0), Err(KcError::State(_))));
    }

    #[test]
    fn fault_breaks_bitwise_equivalence() {
        let mut differs = false;
        for seed in 0..10 {
            let (mut cache, q) = random_cache(seed, 1, 32, 0);
            let full = decode_attention_full(&q, &mut cache.clone(), 0).unwrap();
            let opts = TopNOptions { renormalize: false, fault: Some(Fault::UnsortedTopN) };
            let bad = decode_attention_topn(&q, &mut cache, 0, 32, opts).unwrap();
            differs |= full != bad.output;
        }
        assert!(differs);
    }

    #[test]
    fn renormalized_output_is_convex_combination() {
        for seed in 0..30 {
            let (mut cache, q) = random_cache(seed, 1, 12, 0);
            let opts = TopNOptions { renormalize: true, fault: None };
            let out = decode_attention_topn(&q, &mut cache, 1, 3, opts).unwrap();
            for head in 0..2 {
                let sel = out.selection.get(0, head);
                for c in 0..4 {
                    let col: Vec<f32> = sel.indices.iter().map(|&r| cache.values(1, 0)[r * 8 + head * 4 + c]).collect();
                    let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let v = out.output.get(0, head * 4 + c);
                    assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn dropped_mass_bounds_error() {
        for seed in 0..50 {
            let (mut cache, q) = random_cache(seed, 1, 24, 0);
            let full = decode_attention_full(&q, &mut cache.clone(), 0).unwrap();
            let topn = decode_attention_topn(&q, &mut cache, 0, 6, TopNOptions::default()).unwrap();
            let vmax = cache.values(0, 0).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            for head in 0..2 {
                let eps = topn.selection.get(0, head).dropped_mass;
                for c in head * 4..(head + 1) * 4 {
                    let err = (topn.output.get(0, c) - full.get(0, c)).abs();
                    assert!(err <= eps * vmax + 1e-5, "err {err} > {eps} * {vmax}");
                }
            }
        }
    }
}
