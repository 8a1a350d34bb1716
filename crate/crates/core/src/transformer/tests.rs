use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::sentence::EOS;

fn tiny() -> TransformerConfig {
    TransformerConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 12,
        max_len: 10,
        vocab_size: 9,
        num_styles: 2,
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|k| a.at(i, k) * b.at(k, j)).sum())
                .collect()
        })
        .collect()
}

#[test]
fn config_validation() {
    assert!(tiny().validate().is_ok());
    let mut c = tiny();
    c.num_heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config { .. })));
    let mut c = tiny();
    c.num_layers = 0;
    assert!(c.validate().is_err());
    assert!(TransformerConfig::full_scale(100, 2).validate().is_ok());
}

#[test]
fn single_key_attention_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let q = tape.constant(random_matrix(1, 4, &mut rng));
    let kv = tape.constant(random_matrix(1, 4, &mut rng));
    let out = mha
        .forward(&p, q, kv, Arc::new(AttentionMask::full(1, 1, 1)))
        .unwrap();
    let expected = mha.out.forward(&p, mha.value.forward(&p, kv).unwrap()).unwrap();
    assert!(out.value().max_abs_diff(&expected.value()) < 1e-14);
}

#[test]
fn two_token_attention_matches_hand_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 1, &mut rng);
    let x = random_matrix(2, 4, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let out = mha
        .forward(&p, xv, xv, Arc::new(AttentionMask::full(1, 2, 2)))
        .unwrap()
        .value();

    let proj = |lin: &Linear| -> Vec<Vec<f64>> {
        let w = store.get(lin.w);
        let b = store.get(lin.b);
        naive_matmul(&x, w)
            .into_iter()
            .map(|r| r.iter().zip(b.data()).map(|(a, c)| a + c).collect())
            .collect()
    };
    let (q, k, v) = (proj(&mha.query), proj(&mha.key), proj(&mha.value));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 2.0;
    let wo = store.get(mha.out.w);
    let bo = store.get(mha.out.b);
    for i in 0..2 {
        let s0 = dot(&q[i], &k[0]);
        let s1 = dot(&q[i], &k[1]);
        let w0 = 1.0 / (1.0 + (s1 - s0).exp());
        let w1 = 1.0 - w0;
        let mixed: Vec<f64> = (0..4).map(|c| w0 * v[0][c] + w1 * v[1][c]).collect();
        for j in 0..4 {
            let expected: f64 = bo.data()[j] + (0..4).map(|c| mixed[c] * wo.at(c, j)).sum::<f64>();
            assert!((out.at(i, j) - expected).abs() < 1e-10);
        }
    }
}

fn build(cfg: &TransformerConfig, seed: u64) -> (ParamStore, Encoder, Decoder, ParamId, ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", cfg, &mut rng);
    let dec = Decoder::new(&mut store, "dec", cfg, &mut rng);
    let tok = store.add_uniform("tok", &[cfg.vocab_size, cfg.model_dim], cfg.model_dim, &mut rng);
    let pos = store.add_uniform("pos", &[cfg.max_len, cfg.model_dim], cfg.model_dim, &mut rng);
    (store, enc, dec, tok, pos)
}

fn sentences() -> Vec<Sentence> {
    vec![
        Sentence::from_content(&[4, 5, 6]).unwrap(),
        Sentence::from_content(&[7]).unwrap(),
    ]
}

fn encode<'t>(tape: &'t Tape, p: &Bound<'t>, enc: &Encoder, tok: ParamId, pos: ParamId, s: &[Sentence]) -> Memory<'t> {
    let input = TokenInput::Hard(s);
    let x = embed_tokens(tape, p[tok], p[pos], input).unwrap();
    let lens = input.lens();
    let states = enc.forward(p, x, input.width(), &lens).unwrap();
    Memory { states, width: input.width(), lens }
}

#[test]
fn encoder_ignores_padding() {
    let cfg = tiny();
    let (store, enc, _, tok, pos) = build(&cfg, 3);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let batch = encode(&tape, &p, &enc, tok, pos, &sentences());
    let alone = encode(&tape, &p, &enc, tok, pos, &sentences()[1..]);
    let b = batch.states.value();
    let a = alone.states.value();
    for t in 0..alone.lens[0] {
        for (x, y) in b.row(batch.width + t).iter().zip(a.row(t)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn soft_one_hot_input_matches_hard_input() {
    let cfg = tiny();
    let (store, enc, _, tok, pos) = build(&cfg, 4);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let s = sentences();
    let hard = encode(&tape, &p, &enc, tok, pos, &s);
    let width = hard.width;
    let mut dists = Tensor::zeros([s.len() * width, cfg.vocab_size]);
    for (b, sent) in s.iter().enumerate() {
        for r in 0..width {
            let id = sent.tail().get(r).copied().unwrap_or(PAD);
            dists.data_mut()[(b * width + r) * cfg.vocab_size + id] = 1.0;
        }
    }
    let soft = SoftBatch { dists: tape.constant(dists), width, lens: hard.lens.clone() };
    let x = embed_tokens(&tape, p[tok], p[pos], TokenInput::Soft(&soft)).unwrap();
    let states = enc.forward(&p, x, width, &soft.lens).unwrap();
    assert_eq!(states.value().data(), hard.states.value().data());
}

fn decoder_inputs<'t>(tape: &'t Tape, p: &Bound<'t>, tok: ParamId, pos: ParamId, s: &[Sentence]) -> (Var<'t>, usize, Vec<usize>) {
    let heads: Vec<&[usize]> = s.iter().map(Sentence::head).collect();
    let width = heads.iter().map(|h| h.len()).max().unwrap();
    let ids = pad_ids(&heads, width);
    let positions: Vec<usize> = (0..s.len()).flat_map(|_| 0..width).collect();
    let x = tape
        .embedding_lookup(p[tok], &ids)
        .unwrap()
        .add(tape.embedding_lookup(p[pos], &positions).unwrap())
        .unwrap();
    (x, width, heads.iter().map(|h| h.len()).collect())
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny();
    let (store, enc, dec, tok, pos) = build(&cfg, 5);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let a = vec![Sentence::from_content(&[4, 5, 6, 7]).unwrap()];
    let b = vec![Sentence::from_content(&[4, 5, 8, 8]).unwrap()];
    let mem = encode(&tape, &p, &enc, tok, pos, &a);
    let run = |s: &[Sentence]| {
        let (x, w, lens) = decoder_inputs(&tape, &p, tok, pos, s);
        dec.forward(&p, x, w, &lens, &mem).unwrap().value()
    };
    let (ha, hb) = (run(&a), run(&b));
    for t in 0..3 {
        assert_eq!(ha.row(t), hb.row(t));
    }
    assert_ne!(ha.row(3), hb.row(3));
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let cfg = tiny();
    let (store, enc, dec, tok, pos) = build(&cfg, 6);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let s = sentences();
    let mem = encode(&tape, &p, &enc, tok, pos, &s);
    let (x, width, lens) = decoder_inputs(&tape, &p, tok, pos, &s);
    let full = dec.forward(&p, x, width, &lens, &mem).unwrap().value();

    let mut cache = dec.start(&p, &mem).unwrap();
    for t in 0..width {
        let ids: Vec<usize> = s.iter().map(|x| x.head().get(t).copied().unwrap_or(EOS)).collect();
        let xt = tape
            .embedding_lookup(p[tok], &ids)
            .unwrap()
            .add(tape.embedding_lookup(p[pos], &vec![t; s.len()]).unwrap())
            .unwrap();
        let h = dec.step(&p, &mut cache, xt).unwrap().value();
        for (b, len) in lens.iter().enumerate() {
            if t < *len {
                for (u, v) in h.row(b).iter().zip(full.row(b * width + t)) {
                    assert!((u - v).abs() < 1e-12, "step {t} seq {b}");
                }
            }
        }
    }
    assert_eq!(cache.steps(), width);
}

#[test]
fn encoder_decoder_gradients_match_finite_differences() {
    let cfg = TransformerConfig { num_layers: 1, ..tiny() };
    let (store, enc, dec, tok, pos) = build(&cfg, 7);
    let s = sentences();
    let out_proj = {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        random_matrix(cfg.model_dim, cfg.vocab_size, &mut rng)
    };
    let result = gradcheck::check(&store.values(), 1e-4, 6, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        let mem = encode(tape, &p, &enc, tok, pos, &s);
        let (x, width, lens) = decoder_inputs(tape, &p, tok, pos, &s);
        let h = dec.forward(&p, x, width, &lens, &mem)?;
        let logits = h.matmul(tape.constant(out_proj.clone()))?;
        let targets: Vec<Option<usize>> = s
            .iter()
            .flat_map(|x| (0..width).map(move |t| x.tail().get(t).copied()))
            .collect();
        logits.nll(&targets, 1.0)
    })
    .unwrap();
    assert!(result.checked > 100);
    assert!(result.max_rel_error < 1e-4, "{result:?}");
}

#[test]
fn prepend_rows_places_prefix_first() {
    let tape = Tape::new();
    let prefix = tape.constant(Tensor::from_rows(&[vec![9.0], vec![8.0]]).unwrap());
    let tokens = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap());
    let out = prepend_rows(&tape, &[prefix], tokens, 2, 2).unwrap();
    assert_eq!(out.value().data(), &[9.0, 1.0, 2.0, 8.0, 3.0, 4.0]);
}

#[test]
fn overlong_input_is_rejected() {
    let cfg = TransformerConfig { max_len: 3, ..tiny() };
    let (store, _, _, tok, pos) = build(&cfg, 9);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let s = vec![Sentence::from_content(&[4, 5, 6]).unwrap()];
    assert!(matches!(
        embed_tokens(&tape, p[tok], p[pos], TokenInput::Hard(&s)),
        Err(Error::Overlength { len: 4, max: 3 })
    ));
}
