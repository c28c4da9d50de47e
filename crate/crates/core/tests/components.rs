use proptest::prelude::*;

use kcache::attention::{decode_attention_full, decode_attention_topn, TopNOptions};
use kcache::kvcache::{memory_footprint, CacheMode, CacheShape, Direction, Tier, TierPlacement, TieredKVCache};
use kcache::model::{generate_weights, load_weights, save_weights, ModelConfig, ModelWeights};
use kcache::perf::kv_cache_bytes;
use kcache::rng::SeededRng;
use kcache::tensor::Matrix;
use kcache::KcError;

fn small_model() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, head_dim: 4, ffn_hidden: 12, vocab: 16, max_seq: 64 }
}

fn filled_cache(seed: u64, batch: usize, len: usize, resident: usize) -> TieredKVCache {
    let shape = CacheShape { batch, n_layers: 2, n_heads: 2, head_dim: 4 };
    let mut cache = TieredKVCache::new(shape, TierPlacement::new(resident, 2, 2).unwrap()).unwrap();
    let mut rng = SeededRng::new(seed);
    for layer in 0..2 {
        let ks: Vec<Matrix> = (0..batch).map(|_| Matrix::random(len, 8, 2.0, &mut rng)).collect();
        let vs: Vec<Matrix> = (0..batch).map(|_| Matrix::random(len, 8, 2.0, &mut rng)).collect();
        let k: Vec<&[f32]> = ks.iter().map(Matrix::data).collect();
        let v: Vec<&[f32]> = vs.iter().map(Matrix::data).collect();
        cache.append_kv(layer, &k, &v).unwrap();
        cache.offload_prefill_v(layer).unwrap();
    }
    cache
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topn_covering_the_cache_equals_full_attention(seed in any::<u64>(), batch in 1usize..3, len in 1usize..20, extra in 0usize..5) {
        let mut a = filled_cache(seed, batch, len, 0);
        let mut b = filled_cache(seed, batch, len, 0);
        let q = Matrix::random(batch, 8, 2.0, &mut SeededRng::new(seed ^ 1));
        let full = decode_attention_full(&q, &mut a, 1).unwrap();
        let topn = decode_attention_topn(&q, &mut b, 1, len + extra, TopNOptions::default()).unwrap();
        let fb: Vec<u32> = full.data().iter().map(|x| x.to_bits()).collect();
        let tb: Vec<u32> = topn.output.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(fb, tb);
    }

    #[test]
    fn h2d_charge_matches_rows_pulled(seed in any::<u64>(), batch in 1usize..3, len in 1usize..20, n in 1usize..25) {
        let mut cache = filled_cache(seed, batch, len, 1);
        let q = Matrix::random(batch, 8, 2.0, &mut SeededRng::new(seed));
        let resident = decode_attention_topn(&q, &mut cache, 0, n, TopNOptions::default()).unwrap();
        prop_assert_eq!(resident.h2d_bytes, 0);
        let out = decode_attention_topn(&q, &mut cache, 1, n, TopNOptions::default()).unwrap();
        let expected = 2 * batch * 2 * n.min(len) * 4;
        prop_assert_eq!(out.h2d_bytes, expected as u64);
        prop_assert_eq!(cache.ledger().total(Direction::H2D), expected as u64);
    }

    #[test]
    fn footprint_splits_the_baseline_cache(b in 1usize..8, s in 1usize..5000, l in 0usize..=4) {
        let cfg = ModelConfig::toy();
        let base = memory_footprint(&cfg, b, s, CacheMode::Baseline, 2).unwrap();
        let kc = memory_footprint(&cfg, b, s, CacheMode::KCache { resident_layers: l }, 2).unwrap();
        let total = kv_cache_bytes(b as u64, s as u64, 64, 4, 2).unwrap();
        prop_assert_eq!(base.fast_bytes, total);
        prop_assert_eq!(kc.fast_bytes + kc.slow_bytes, total);
        prop_assert_eq!(kc.weight_bytes, base.weight_bytes);
    }
}

#[test]
fn cache_tiers_and_ledger() {
    let cache = filled_cache(3, 2, 5, 1);
    assert_eq!(cache.v_tier(0), Tier::Fast);
    assert_eq!(cache.v_tier(1), Tier::Slow);
    assert_eq!(cache.ledger().total(Direction::D2H), 2 * 2 * 5 * 8);
    assert_eq!(cache.ledger().total_for_layer(0, Direction::D2H), 0);
    assert!(cache.lengths_consistent());
    let jsonl = cache.ledger().to_jsonl();
    assert_eq!(jsonl.lines().count(), cache.ledger().len());
    assert!(jsonl.contains("\"dir\":\"D2H\""));
}

#[test]
fn cache_misuse_is_rejected() {
    let mut cache = filled_cache(3, 1, 4, 0);
    assert!(matches!(cache.offload_prefill_v(0), Err(KcError::State(_))));
    assert!(cache.gather_v(0, &[vec![3, 1], vec![0], vec![0], vec![0]]).is_err());
    assert!(cache.gather_v(0, &[vec![9], vec![0]]).is_err());
    let wrong = [0.0f32; 5];
    assert!(cache.append_kv(0, &[&wrong], &[&wrong]).is_err());
    assert!(cache.append_kv(7, &[&[0.0; 8]], &[&[0.0; 8]]).is_err());
}

#[test]
fn capacity_limit_counts_steady_state_bytes() {
    let shape = CacheShape { batch: 1, n_layers: 2, n_heads: 2, head_dim: 4 };
    // K for both layers, 4 rows each: 2 layers * 4 * 8 * 2 bytes = 128.
    let mut cache = TieredKVCache::new(shape, TierPlacement::new(0, 2, 2).unwrap())
        .unwrap()
        .with_capacity_limit(Some(128));
    let rows = [0.5f32; 32];
    for layer in 0..2 {
        cache.append_kv(layer, &[&rows], &[&rows]).unwrap();
        cache.offload_prefill_v(layer).unwrap();
    }
    assert_eq!(cache.fast_bytes_used(), 128);
    let err = cache.append_kv(0, &[&[0.0; 8]], &[&[0.0; 8]]).unwrap_err();
    assert!(matches!(err, KcError::Capacity { required: 144, limit: 128 }));
}

#[test]
fn weight_files_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.kcw");
    let w = generate_weights(&small_model(), 5).unwrap();
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, w);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(ModelWeights::from_bytes(&bytes), Err(KcError::Format { offset: 0, .. })));
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1]), Err(KcError::Format { .. })));
    assert!(matches!(load_weights(dir.path().join("missing")), Err(KcError::Io(_))));
}

#[test]
fn weights_are_seed_deterministic() {
    let a = generate_weights(&small_model(), 1).unwrap();
    let b = generate_weights(&small_model(), 1).unwrap();
    let c = generate_weights(&small_model(), 2).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
    assert_eq!(a.param_count(), small_model().param_count());
}
