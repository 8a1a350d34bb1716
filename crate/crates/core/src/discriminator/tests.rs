use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::tensor::Tensor;

fn tiny() -> TransformerConfig {
    TransformerConfig {
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 8,
        max_len: 8,
        vocab_size: 8,
        num_styles: 2,
    }
}

fn build(variant: Variant, seed: u64) -> (ParamStore, Discriminator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = Discriminator::new(&mut store, &tiny(), variant, &mut rng).unwrap();
    (store, d)
}

fn st(v: usize) -> StyleId {
    StyleId::new(v, 2).unwrap()
}

#[test]
fn conditional_score_is_a_probability_and_matches_one_hot() {
    let (store, d) = build(Variant::Conditional, 1);
    let x = Sentence::from_content(&[4, 5, 6]).unwrap();
    let soft = SoftSentence::one_hot(&x, 8).unwrap();
    for s in [st(1), st(2)] {
        let hard = d.score_conditional(&store, Candidate::Hard(&x), s).unwrap();
        let smooth = d.score_conditional(&store, Candidate::Soft(&soft), s).unwrap();
        assert!(hard > 0.0 && hard < 1.0);
        assert!((hard - smooth).abs() < 1e-12);
    }
    let a = d.score_conditional(&store, Candidate::Hard(&x), st(1)).unwrap();
    let b = d.score_conditional(&store, Candidate::Hard(&x), st(2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn multiclass_scores_form_a_distribution() {
    let (store, d) = build(Variant::MultiClass, 2);
    assert_eq!(d.num_classes(), 3);
    let x = Sentence::from_content(&[7, 4]).unwrap();
    let soft = SoftSentence::one_hot(&x, 8).unwrap();
    let hard = d.score_multiclass(&store, Candidate::Hard(&x)).unwrap();
    let smooth = d.score_multiclass(&store, Candidate::Soft(&soft)).unwrap();
    assert_eq!(hard.len(), 3);
    assert!((hard.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for (a, b) in hard.iter().zip(&smooth) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn variant_mismatches_are_rejected() {
    let (cstore, cond) = build(Variant::Conditional, 3);
    let (mstore, multi) = build(Variant::MultiClass, 3);
    let x = Sentence::from_content(&[4]).unwrap();
    assert!(cond.score_multiclass(&cstore, Candidate::Hard(&x)).is_err());
    assert!(multi.score_conditional(&mstore, Candidate::Hard(&x), st(1)).is_err());
    let tape = Tape::new();
    let p = cstore.bind(&tape, false);
    let xs = [x.clone()];
    assert!(cond.logits(&tape, &p, TokenInput::Hard(&xs), None).is_err());
    assert!(matches!(
        cond.logits(&tape, &p, TokenInput::Hard(&xs), Some(&[StyleId::from_index(5)])),
        Err(Error::UnknownStyle { .. })
    ));
    let p = mstore.bind(&tape, false);
    assert!(multi.logits(&tape, &p, TokenInput::Hard(&xs), Some(&[st(1)])).is_err());
    assert_eq!("multiclass".parse::<Variant>().unwrap(), Variant::MultiClass);
    assert!("other".parse::<Variant>().is_err());
}

#[test]
fn padding_never_changes_scores() {
    let (store, d) = build(Variant::Conditional, 4);
    let xs = [
        Sentence::from_content(&[4]).unwrap(),
        Sentence::from_content(&[5, 6, 7, 4]).unwrap(),
    ];
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let batched = d.logits(&tape, &p, TokenInput::Hard(&xs), Some(&[st(1), st(2)])).unwrap().value();
    let alone = d.logits(&tape, &p, TokenInput::Hard(&xs[..1]), Some(&[st(1)])).unwrap().value();
    for (a, b) in batched.row(0).iter().zip(alone.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gradients_through_soft_inputs_match_finite_differences() {
    for (variant, seed) in [(Variant::Conditional, 5), (Variant::MultiClass, 6)] {
        let (store, d) = build(variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let raw = Tensor::matrix(6, 8, (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut inputs = store.values();
        inputs.push(raw);
        let styles = [st(2), st(1)];
        let result = gradcheck::check(&inputs, 1e-5, 5, |tape, vars| {
            let (params, raw) = vars.split_at(vars.len() - 1);
            let p = Bound::from_vars(params.to_vec());
            let soft = SoftBatch { dists: raw[0].softmax(1.0)?, width: 3, lens: vec![3, 2] };
            let logits = d.logits(tape, &p, TokenInput::Soft(&soft), (variant == Variant::Conditional).then_some(&styles[..]))?;
            logits.cross_entropy(&[1, 0])
        })
        .unwrap();
        assert!(result.max_rel_error < 1e-3, "{variant}: {result:?}");
    }
}
