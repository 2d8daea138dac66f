use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2g::encoder::{BiAttention, Encoder, EncoderConfig, MultiHeadAttention, TransformerBlock};
use s2g::masks::{build_full_mask, build_sasa_mask, AttentionMask};
use s2g::numerics::{check_param_gradients, ParamStore, Tape, Tensor, DEFAULT_EPSILON};
use s2g::textproc::{SentenceMap, TokenSequence};

fn toy_config(layers: usize) -> EncoderConfig {
    EncoderConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: layers, d_ff: 16, max_len: 12, dropout: 0.1 }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Same parameters, fresh random draw for every value so no weight sits at
/// its zero/one initializer.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), 0.5, &mut r);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

#[test]
fn full_encoder_layer_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let cfg = toy_config(1);
    let block = TransformerBlock::new(&mut store, "block", cfg.d_model, cfg.n_heads, cfg.d_ff, 0.0, &mut r);
    let x = store.add("input", Tensor::randn(&[5, 8], 1.0, &mut r));
    jitter(&mut store, 8);
    let map = SentenceMap::new(vec![(1, 3), (3, 5)], 5).unwrap();
    let mask = build_sasa_mask(&map, 5).unwrap();
    let w = Tensor::randn(&[5, 8], 1.0, &mut r);
    let err = check_param_gradients(
        &store,
        |t| {
            let xv = t.param(x)?;
            let y = block.forward(t, xv, Some(&mask))?;
            t.weighted_sum(y, &w)
        },
        DEFAULT_EPSILON,
        usize::MAX,
    )
    .unwrap();
    assert!(err < 1e-4, "encoder layer max relative error {err}");
}

#[test]
fn whole_encoder_with_embeddings_gradients() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &toy_config(1), &mut rng(9)).unwrap();
    jitter(&mut store, 10);
    // two segments sharing tokens 7 and 9, so both overlap rows are used
    let seq = TokenSequence {
        ids: vec![2, 7, 9, 4, 3, 5, 7, 6, 9, 8, 10, 3],
        segments: vec![0, 1, 1, 1, 0, 2, 2, 2, 2, 2, 2, 0],
    };
    let mask = build_full_mask(12).unwrap();
    let w = Tensor::randn(&[12, 8], 1.0, &mut rng(11));
    let err = check_param_gradients(
        &store,
        |t| {
            let out = enc.encode(t, &seq, &mask)?;
            t.weighted_sum(out.hidden, &w)
        },
        DEFAULT_EPSILON,
        24,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn bi_attention_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let bi = BiAttention::new(&mut store, "bi", 6, &mut r);
    let c = store.add("c", Tensor::randn(&[4, 6], 1.0, &mut r));
    let q = store.add("q", Tensor::randn(&[3, 6], 1.0, &mut r));
    jitter(&mut store, 13);
    let w = Tensor::randn(&[4, 6], 1.0, &mut r);
    let err = check_param_gradients(
        &store,
        |t| {
            let (cv, qv) = (t.param(c)?, t.param(q)?);
            let y = bi.forward(t, cv, qv)?;
            t.weighted_sum(y, &w)
        },
        DEFAULT_EPSILON,
        usize::MAX,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn permutation_equivariance_without_positions() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &toy_config(1), &mut rng(14)).unwrap();
    jitter(&mut store, 15);
    let shape = store.value(enc.pos_emb).shape().to_vec();
    store.get_mut(enc.pos_emb).value = Tensor::zeros(&shape);
    let mask = build_full_mask(5).unwrap();
    let ids = TokenSequence::from_ids(vec![2, 6, 7, 8, 3]);
    let swapped = TokenSequence::from_ids(vec![2, 8, 7, 6, 3]);
    let mut t = Tape::with_params(&store);
    let a = enc.encode(&mut t, &ids, &mask).unwrap().hidden;
    let b = enc.encode(&mut t, &swapped, &mask).unwrap().hidden;
    let (a, b) = (t.value(a), t.value(b));
    let perm = [0, 3, 2, 1, 4];
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..8 {
            assert!((a.get(i, k) - b.get(p, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn hidden_token_cannot_influence_others() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &toy_config(1), &mut rng(16)).unwrap();
    jitter(&mut store, 17);
    let n = 6;
    let j = 3;
    let mut rows = vec![vec![0.0; n]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        if i != j {
            row[j] = f64::NEG_INFINITY;
        }
    }
    let mask = AttentionMask::from_tensor(Tensor::from_rows(&rows).unwrap()).unwrap();
    let ids = TokenSequence::from_ids(vec![2, 6, 7, 8, 9, 3]);
    let run = |bump: f64| {
        let mut t = Tape::with_params(&store);
        let mut x = {
            let e = enc.embed(&mut t, &ids).unwrap();
            t.value(e).clone()
        };
        for k in 0..8 {
            x.data_mut()[j * 8 + k] += bump * (k as f64 + 1.0);
        }
        let xv = t.constant(x);
        let h = enc.encode_embedded(&mut t, xv, &mask).unwrap().hidden;
        t.value(h).clone()
    };
    let base = run(0.0);
    let moved = run(3.0);
    for i in 0..n {
        let same = (0..8).all(|k| base.get(i, k).to_bits() == moved.get(i, k).to_bits());
        assert_eq!(same, i != j, "row {i}");
    }
}

#[test]
fn single_token_attention_is_linear() {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng(18));
    jitter(&mut store, 19);
    let f = |x: &Tensor| {
        let mut t = Tape::with_params(&store);
        let xv = t.constant(x.clone());
        let y = attn.forward(&mut t, xv, None).unwrap();
        t.value(y).clone()
    };
    let x1 = Tensor::randn(&[1, 8], 1.0, &mut rng(20));
    let x2 = Tensor::randn(&[1, 8], 1.0, &mut rng(21));
    let sum = Tensor::new(vec![1, 8], x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect()).unwrap();
    let zero = f(&Tensor::zeros(&[1, 8]));
    let (y1, y2, ys) = (f(&x1), f(&x2), f(&sum));
    for k in 0..8 {
        // affine: f(a + b) = f(a) + f(b) - f(0)
        assert!((ys.data()[k] - (y1.data()[k] + y2.data()[k] - zero.data()[k])).abs() < 1e-12);
    }
}

#[test]
fn bi_attention_concentrates_on_matching_rows() {
    let mut store = ParamStore::new();
    let bi = BiAttention::new(&mut store, "bi", 4, &mut rng(22));
    let c = Tensor::eye(4);
    let mut prev = 0.0;
    for tau in [0.5, 2.0, 8.0, 32.0] {
        store.get_mut(bi.w_c).value = Tensor::zeros(&[4, 1]);
        store.get_mut(bi.w_q).value = Tensor::zeros(&[4, 1]);
        store.get_mut(bi.w_cq).value = Tensor::full(&[4], tau);
        let mut t = Tape::with_params(&store);
        let cv = t.constant(c.clone());
        let s = bi.similarity(&mut t, cv, cv).unwrap();
        let a = t.softmax(s).unwrap();
        let diag = t.value(a).get(1, 1);
        assert!(diag > prev);
        prev = diag;
    }
    assert!(prev > 0.999);
}

#[test]
fn inference_is_deterministic() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &toy_config(2), &mut rng(23)).unwrap();
    let mask = build_full_mask(4).unwrap();
    let run = || {
        let mut t = Tape::with_params(&store);
        let h = enc.encode(&mut t, &TokenSequence::from_ids(vec![2, 5, 6, 3]), &mask).unwrap().hidden;
        t.value(h).clone()
    };
    assert_eq!(run(), run());
}
