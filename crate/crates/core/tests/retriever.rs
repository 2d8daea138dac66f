use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2g::corpus::{Paragraph, ParagraphLabel};
use s2g::encoder::EncoderConfig;
use s2g::numerics::{relative_error, ParamStore, Tape, Tensor, DEFAULT_EPSILON};
use s2g::retriever::{
    retriever_loss, select_evidence_paragraphs, target_distribution, RetrievalState, Retriever, RetrieverConfig,
    RetrieverVariant,
};
use s2g::textproc::Vocab;

const QUESTION: &str = "Where was the maker of Bolo born ?";

fn paragraphs() -> Vec<Paragraph> {
    let p = |t: &str, s: &[&str]| Paragraph { title: t.into(), sentences: s.iter().map(|x| x.to_string()).collect() };
    vec![
        p("Kira", &["Kira was born in Tamu ."]),
        p("Zeno", &["Zeno is red .", "Zeno visited Bolo ."]),
        p("Bolo", &["Bolo was made by Kira ."]),
        p("Lumo", &["Lumo was born in Pavi ."]),
    ]
}

fn labels() -> Vec<ParagraphLabel> {
    let l = |is_relevant, has_answer| ParagraphLabel { is_relevant, has_answer };
    vec![l(true, true), l(false, false), l(true, false), l(false, false)]
}

fn toy(variant: RetrieverVariant) -> (ParamStore, Retriever, Vocab) {
    let texts: Vec<String> = paragraphs().iter().flat_map(|p| p.sentences.clone()).chain([QUESTION.into()]).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str), 1);
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        max_len: 64,
        dropout: 0.1,
    };
    let mut store = ParamStore::new();
    let cfg = RetrieverConfig { variant, ..Default::default() };
    let model = Retriever::new(&mut store, &enc, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for p in store.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), 0.3, &mut r);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    (store, model, vocab)
}

#[test]
fn initial_scores_are_permutation_equivariant() {
    let (store, model, vocab) = toy(RetrieverVariant::Full);
    let paras = paragraphs();
    let scores = |ps: &[Paragraph]| {
        let mut t = Tape::with_params(&store);
        let enc = model.encode_paragraphs(&mut t, QUESTION, ps, &vocab).unwrap();
        let s = model.score_paragraphs_initial(&mut t, &enc).unwrap();
        t.value(s).data().to_vec()
    };
    let base = scores(&paras);
    for perm in [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1], [0, 3, 1, 2]] {
        let permuted: Vec<Paragraph> = perm.iter().map(|&i| paras[i].clone()).collect();
        let s = scores(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            assert!((s[k] - base[i]).abs() < 1e-12, "{perm:?}: {} vs {}", s[k], base[i]);
        }
    }
}

#[test]
fn retrieve_is_deterministic() {
    let (store, model, vocab) = toy(RetrieverVariant::Full);
    let a = model.retrieve(&store, QUESTION, &paragraphs(), &vocab).unwrap();
    let b = model.retrieve(&store, QUESTION, &paragraphs(), &vocab).unwrap();
    assert_eq!(a, b);
    let (x, y) = a.selected.unwrap();
    assert_ne!(x, y);
    assert!(a.cascade_indices.contains(&x) && a.cascade_indices.contains(&y));
}

/// Exhaustive: `a` beats `b` when its score is higher, or equal with a lower
/// index.
fn exhaustive_top2(indices: &[usize], scores: &[f64]) -> (usize, usize) {
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && indices[a] < indices[b]);
    let n = scores.len();
    let mut best = None;
    for a in 0..n {
        for b in 0..n {
            if a == b || !beats(a, b) {
                continue;
            }
            let top = (0..n).all(|c| c == a || beats(a, c));
            let second = (0..n).all(|c| c == a || c == b || beats(b, c));
            if top && second {
                assert!(best.is_none(), "two winners");
                best = Some((indices[a], indices[b]));
            }
        }
    }
    best.expect("a winner")
}

proptest! {
    #[test]
    fn selection_matches_exhaustive_top2(
        raw in prop::collection::vec(-3i32..3, 2..=4),
        fine in any::<bool>(),
        cascaded in any::<bool>(),
        offset in 0usize..6,
    ) {
        let scores: Vec<f64> = raw.iter().enumerate().map(|(i, &s)| if fine { s as f64 + i as f64 * 0.01 } else { s as f64 }).collect();
        let n = scores.len();
        let state = if cascaded {
            // cascade order is a rotation of some larger candidate list
            let indices: Vec<usize> = (0..n).map(|i| (i + offset) % (n + offset)).collect();
            RetrievalState {
                initial_logits: vec![0.0; n + offset],
                refined_logits: None,
                cascaded_logits: Some(scores.clone()),
                cascade_indices: indices,
                first_hop_index: None,
                selected: None,
            }
        } else {
            RetrievalState {
                initial_logits: vec![9.0; n],
                refined_logits: Some(scores.clone()),
                cascaded_logits: None,
                cascade_indices: vec![],
                first_hop_index: Some(0),
                selected: None,
            }
        };
        let indices = if cascaded { state.cascade_indices.clone() } else { (0..n).collect() };
        prop_assert_eq!(select_evidence_paragraphs(&state).unwrap(), exhaustive_top2(&indices, &scores));
    }

    #[test]
    fn target_sums_to_one(scores in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let t = target_distribution(&scores).unwrap();
        prop_assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.data().iter().all(|&p| p > 0.0 || scores.iter().any(|&s| s - scores.iter().cloned().fold(f64::MIN, f64::max) < -700.0)));
    }

    #[test]
    fn loss_is_nonnegative(logits in prop::collection::vec(-5.0f64..5.0, 10), raw in prop::collection::vec(0u8..3, 10)) {
        let scores: Vec<f64> = raw.iter().map(|&s| f64::from(s)).collect();
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(logits).unwrap());
        let kl = retriever_loss(&mut t, l, &scores).unwrap();
        prop_assert!(t.value(kl).item() >= 0.0);
    }
}

/// Central differences against backward for every probed entry. An entry
/// passes with relative error below 1e-4 or absolute error below 1e-8: the
/// final layer-norm shift of a stage feeds a shift-invariant softmax, so its
/// true gradient is 0 and only roundoff is left to compare.
#[test]
fn all_stage_gradients() {
    for variant in [RetrieverVariant::Full, RetrieverVariant::NoRefine, RetrieverVariant::NoRefineNoReformulation] {
        let (store, model, vocab) = toy(variant);
        let paras = paragraphs();
        let f = |s: &ParamStore| {
            let mut t = Tape::with_params(s);
            let pass = model.forward(&mut t, QUESTION, &paras, &vocab).unwrap();
            let l = model.loss(&mut t, &pass, &labels()).unwrap();
            let v = t.value(l).item();
            (v, t.backward(l).unwrap())
        };
        let (_, g) = f(&store);
        let mut probe = store.clone();
        for (id, p) in store.iter() {
            let n = p.value.numel();
            for i in (0..n).step_by(n.div_ceil(24)) {
                let analytic = g.param(id).map_or(0.0, |g| g.data()[i]);
                let o = p.value.data()[i];
                probe.get_mut(id).value.data_mut()[i] = o + DEFAULT_EPSILON;
                let up = f(&probe).0;
                probe.get_mut(id).value.data_mut()[i] = o - DEFAULT_EPSILON;
                let down = f(&probe).0;
                probe.get_mut(id).value.data_mut()[i] = o;
                let numeric = (up - down) / (2.0 * DEFAULT_EPSILON);
                let rel = relative_error(analytic, numeric);
                assert!(
                    rel < 1e-4 || (analytic - numeric).abs() < 1e-8,
                    "{variant:?} {}[{i}]: analytic {analytic} numeric {numeric}",
                    p.name
                );
            }
        }
    }
}
