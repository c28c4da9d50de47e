//! Toy decoder-only transformer: configuration, weights, weight files and
//! the per-block forward pieces shared by every execution mode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KcError, Result};
use crate::rng::SeededRng;
use crate::tensor::{matmul, rms_norm_rows, silu, Matrix};

/// Bound of the uniform distribution used for every projection weight.
pub const INIT_BOUND: f32 = 0.08;
pub const RMS_EPS: f32 = 1e-5;

pub const WEIGHT_MAGIC: &[u8; 4] = b"KCW1";
pub const WEIGHT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

/// `ceil(8d/3)` rounded up to a multiple of 16.
pub fn default_ffn_hidden(d_model: usize) -> usize {
    let raw = (8 * d_model).div_ceil(3);
    raw.div_ceil(16) * 16
}

/// Preset names accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &["toy", "7b-shape"];

impl ModelConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "7b-shape" => Some(Self::llama2_7b_shape()),
            _ => None,
        }
    }

    /// Desk-scale model used for every numeric run.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            ffn_hidden: 176,
            vocab: 256,
            max_seq: 4096,
        }
    }

    /// LLaMA2-7B geometry. Shape-only: used by the cost model and
    /// footprint calculators, never instantiated as weights.
    pub fn llama2_7b_shape() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            head_dim: 128,
            ffn_hidden: 11008,
            vocab: 32000,
            max_seq: 32768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KcError::arg(format!("{name} must be >= 1")));
            }
        }
        if self.vocab < 2 {
            return Err(KcError::arg("vocab must be >= 2"));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(KcError::arg(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    pub fn params_per_layer(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.ffn_hidden as u64;
        2 * d + 4 * d * d + 3 * d * f
    }

    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab as u64;
        2 * v * d + d + self.n_layers as u64 * self.params_per_layer()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_gain: Vec<f32>,
    /// Gate projection (`W`, d x ffn_hidden), passed through SiLU.
    pub w_gate: Matrix,
    /// Linear projection (`V`, d x ffn_hidden).
    pub w_up: Matrix,
    /// Output projection (`W2`, ffn_hidden x d).
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f32>,
    pub head: Matrix,
}

fn gain(d: usize, rng: &mut SeededRng) -> Vec<f32> {
    (0..d).map(|_| 1.0 + rng.uniform_symmetric(INIT_BOUND)).collect()
}

/// Draws all weights from one SplitMix64 stream in file order: embedding,
/// then per layer `[attn_gain, wq, wk, wv, wo, ffn_gain, w_gate, w_up,
/// w_down]`, then the final gain and the output head.
///
/// Matrices are uniform in `[-0.08, 0.08]`; RMS gains are `1 + u` with `u`
/// in the same range.
pub fn generate_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let d = config.d_model;
    let f = config.ffn_hidden;
    let embedding = Matrix::random(config.vocab, d, INIT_BOUND, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_gain: gain(d, &mut rng),
            wq: Matrix::random(d, d, INIT_BOUND, &mut rng),
            wk: Matrix::random(d, d, INIT_BOUND, &mut rng),
            wv: Matrix::random(d, d, INIT_BOUND, &mut rng),
            wo: Matrix::random(d, d, INIT_BOUND, &mut rng),
            ffn_gain: gain(d, &mut rng),
            w_gate: Matrix::random(d, f, INIT_BOUND, &mut rng),
            w_up: Matrix::random(d, f, INIT_BOUND, &mut rng),
            w_down: Matrix::random(f, d, INIT_BOUND, &mut rng),
        })
        .collect();
    let final_gain = gain(d, &mut rng);
    let head = Matrix::random(d, config.vocab, INIT_BOUND, &mut rng);
    Ok(ModelWeights { config: *config, embedding, layers, final_gain, head })
}

impl ModelWeights {
    /// Tensors in file order.
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                l.attn_gain.as_slice(),
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                l.ffn_gain.as_slice(),
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_gain);
        out.push(self.head.data());
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    /// Token embeddings as a `tokens.len() x d` matrix.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab {
                return Err(KcError::arg(format!("token id {t} out of range (vocab {})", self.config.vocab)));
            }
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Matrix::from_vec(tokens.len(), d, data)
    }

    /// Final RMS norm followed by the output head.
    pub fn logits(&self, hidden: &Matrix) -> Result<Matrix> {
        let normed = rms_norm_rows(hidden, &self.final_gain, RMS_EPS)?;
        matmul(&normed, &self.head)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.param_count() as usize);
        buf.extend_from_slice(WEIGHT_MAGIC);
        for v in [
            WEIGHT_VERSION,
            c.n_layers as u32,
            c.d_model as u32,
            c.n_heads as u32,
            c.head_dim as u32,
            c.ffn_hidden as u32,
            c.vocab as u32,
            c.max_seq as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| KcError::Format { offset: offset as u64, message };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != WEIGHT_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            n_layers: word(1) as usize,
            d_model: word(2) as usize,
            n_heads: word(3) as usize,
            head_dim: word(4) as usize,
            ffn_hidden: word(5) as usize,
            vocab: word(6) as usize,
            max_seq: word(7) as usize,
        };
        config.validate().map_err(|e| fmt(8, format!("invalid header: {e}")))?;
        let expected = HEADER_LEN as u64 + 4 * config.param_count();
        if bytes.len() as u64 != expected {
            return Err(fmt(
                bytes.len().min(expected as usize),
                format!("payload length {} does not match header-declared size {expected}", bytes.len()),
            ));
        }

        let mut offset = HEADER_LEN;
        let mut take = |rows: usize, cols: usize| {
            let n = rows * cols;
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            offset += 4 * n;
            Matrix::from_vec(rows, cols, data).expect("length checked")
        };
        let (d, f, v) = (config.d_model, config.ffn_hidden, config.vocab);
        let embedding = take(v, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_gain: take(1, d).into_vec(),
                wq: take(d, d),
                wk: take(d, d),
                wv: take(d, d),
                wo: take(d, d),
                ffn_gain: take(1, d).into_vec(),
                w_gate: take(d, f),
                w_up: take(d, f),
                w_down: take(f, d),
            })
            .collect();
        let final_gain = take(1, d).into_vec();
        let head = take(d, v);
        Ok(Self { config, embedding, layers, final_gain, head })
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    ModelWeights::from_bytes(&fs::read(path)?)
}

fn check_width(x: &Matrix, d: usize, what: &str) -> Result<()> {
    if x.cols() != d {
        return Err(KcError::shape(format!("{what}: input width {} != d_model {d}", x.cols())));
    }
    Ok(())
}

/// `(x Wq, x Wk, x Wv)` for one layer. Heads are column slices of width
/// `head_dim`.
pub fn qkv_project(x: &Matrix, layer: &LayerWeights) -> Result<(Matrix, Matrix, Matrix)> {
    check_width(x, layer.wq.rows(), "qkv_project")?;
    Ok((matmul(x, &layer.wq)?, matmul(x, &layer.wk)?, matmul(x, &layer.wv)?))
}

/// `(silu(x W) * (x V)) W2`.
pub fn ffn_swiglu(x: &Matrix, layer: &LayerWeights) -> Result<Matrix> {
    check_width(x, layer.w_gate.rows(), "ffn_swiglu")?;
    let mut gate = matmul(x, &layer.w_gate)?;
    let up = matmul(x, &layer.w_up)?;
    for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    matmul(&gate, &layer.w_down)
}

/// One pre-norm residual block.
///
/// `attention` receives the projected `(Q, K, V)` of the normed input and
/// returns the concatenated head outputs; the block applies `Wo`, the
/// residual adds and the SwiGLU sublayer.
pub fn block_forward<F>(x: &Matrix, layer: &LayerWeights, attention: F) -> Result<Matrix>
where
    F: FnOnce(&Matrix, &Matrix, &Matrix) -> Result<Matrix>,
{
    let normed = rms_norm_rows(x, &layer.attn_gain, RMS_EPS)?;
    let (q, k, v) = qkv_project(&normed, layer)?;
    let heads = attention(&q, &k, &v)?;
    if heads.shape() != x.shape() {
        return Err(KcError::shape(format!(
            "attention returned {:?}, expected {:?}",
            heads.shape(),
            x.shape()
        )));
    }
    let mut h = x.clone();
    h.add_assign(&matmul(&heads, &layer.wo)?)?;
    let normed = rms_norm_rows(&h, &layer.ffn_gain, RMS_EPS)?;
    h.add_assign(&ffn_swiglu(&normed, layer)?)?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelWeights {
        generate_weights(&ModelConfig::toy(), 1).unwrap()
    }

    #[test]
    fn ffn_default_rule() {
        assert_eq!(default_ffn_hidden(64), 176);
        assert_eq!(default_ffn_hidden(4096), 10928);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = toy();
        assert_eq!(a, toy());
        let b = generate_weights(&ModelConfig::toy(), 2).unwrap();
        assert_ne!(a, b);
        assert!(a.embedding.is_finite());
    }

    #[test]
    fn toy_param_count_matches_enumerated_shapes() {
        // Enumerate every declared tensor shape independently.
        let (l, d, f, v) = (4u64, 64u64, 176u64, 256u64);
        let per_layer = [d, d * d, d * d, d * d, d * d, d, d * f, d * f, f * d];
        let want = v * d + l * per_layer.iter().sum::<u64>() + d + d * v;
        assert_eq!(want, 4 * (128 + 4 * 4096 + 3 * 11264) + 2 * 16384 + 64);
        assert_eq!(ModelConfig::toy().param_count(), want);
        assert_eq!(toy().param_count(), want);
    }

    #[test]
    fn llama_shape_weights_about_14gb() {
        let c = ModelConfig::llama2_7b_shape();
        c.validate().unwrap();
        assert_eq!(c.param_count(), 6_738_415_616);
        let bytes = c.param_count() * 2;
        assert!((13.0e9..14.5e9).contains(&(bytes as f64)));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.head_dim = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let w = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.kcw");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(w.to_bytes(), back.to_bytes());
        assert_eq!(w, back);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = toy().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(KcError::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(KcError::Format { offset: 4, .. })));

        // Header says 5 layers, payload carries 4.
        let mut bad = bytes.clone();
        bad[8] = 5;
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(KcError::Format { .. })));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(ModelWeights::from_bytes(truncated), Err(KcError::Format { .. })));
        assert!(matches!(ModelWeights::from_bytes(&bytes[..10]), Err(KcError::Format { offset: 10, .. })));
    }

    #[test]
    fn identity_projections_copy_input() {
        let mut w = toy();
        let d = w.config.d_model;
        let layer = &mut w.layers[0];
        layer.wq = Matrix::identity(d);
        layer.wk = Matrix::identity(d);
        layer.wv = Matrix::identity(d);
        let mut rng = SeededRng::new(3);
        let x = Matrix::random(5, d, 1.0, &mut rng);
        let (q, k, v) = qkv_project(&x, &w.layers[0]).unwrap();
        assert_eq!(q, x);
        assert_eq!(k, x);
        assert_eq!(v, x);

        let one = Matrix::random(1, d, 1.0, &mut rng);
        let (q, _, _) = qkv_project(&one, &w.layers[1]).unwrap();
        assert_eq!(q.shape(), (1, d));
        assert!(qkv_project(&Matrix::zeros(1, d + 1), &w.layers[0]).is_err());
    }

    #[test]
    fn qkv_matches_triple_loop() {
        let w = toy();
        let d = w.config.d_model;
        let mut rng = SeededRng::new(3);
        let x = Matrix::random(3, d, 1.0, &mut rng);
        let (q, _, v) = qkv_project(&x, &w.layers[2]).unwrap();
        for i in 0..3 {
            for j in 0..d {
                let mut qa = 0.0f32;
                let mut va = 0.0f32;
                for k in 0..d {
                    qa += x.get(i, k) * w.layers[2].wq.get(k, j);
                    va += x.get(i, k) * w.layers[2].wv.get(k, j);
                }
                assert_eq!(q.get(i, j).to_bits(), qa.to_bits());
                assert_eq!(v.get(i, j).to_bits(), va.to_bits());
            }
        }
    }

    #[test]
    fn ffn_zero_input_gives_zero() {
        let w = toy();
        let out = ffn_swiglu(&Matrix::zeros(2, 64), &w.layers[0]).unwrap();
        assert_eq!(out.shape(), (2, 64));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_matches_scalar_loop() {
        let w = toy();
        let layer = &w.layers[0];
        let (d, f) = (64, 176);
        let x = Matrix::from_vec(1, d, vec![1.0; d]).unwrap();
        let got = ffn_swiglu(&x, layer).unwrap();
        let mut hidden = vec![0.0f64; f];
        for (j, h) in hidden.iter_mut().enumerate() {
            let (mut g, mut u) = (0.0f64, 0.0f64);
            for k in 0..d {
                g += layer.w_gate.get(k, j) as f64;
                u += layer.w_up.get(k, j) as f64;
            }
            *h = g / (1.0 + (-g).exp()) * u;
        }
        for c in 0..d {
            let want: f64 = (0..f).map(|j| hidden[j] * layer.w_down.get(j, c) as f64).sum();
            assert!((got.get(0, c) as f64 - want).abs() < 1e-5, "{c}");
        }
    }

    #[test]
    fn zeroed_sublayers_are_identity() {
        let mut w = toy();
        let layer = &mut w.layers[1];
        layer.wo = Matrix::zeros(64, 64);
        layer.w_down = Matrix::zeros(176, 64);
        let mut rng = SeededRng::new(5);
        let x = Matrix::random(4, 64, 1.0, &mut rng);
        let out = block_forward(&x, &w.layers[1], |q, _, _| Ok(Matrix::zeros(q.rows(), q.cols()))).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn block_rejects_bad_attention_shape() {
        let w = toy();
        let x = Matrix::zeros(2, 64);
        let err = block_forward(&x, &w.layers[0], |_, _, _| Ok(Matrix::zeros(1, 64)));
        assert!(matches!(err, Err(KcError::Shape(_))));
    }
}
