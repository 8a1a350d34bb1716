use super::*;
use crate::discriminator::Variant;
use crate::config::ModelShape;
use crate::sentence::{Sentence, StyleId};

fn s(content: &[usize]) -> Sentence {
    Sentence::from_content(content).unwrap()
}

fn corpora() -> Vec<StyleCorpus> {
    let make = |i: usize, a: usize, b: usize| StyleCorpus {
        style: StyleId::from_index(i),
        name: format!("style{i}"),
        train: vec![s(&[a, b]), s(&[b, a, a]), s(&[a]), s(&[b, b, a, b])],
        dev: vec![s(&[a, b, b])],
        test: vec![s(&[b])],
    };
    vec![make(0, 4, 5), make(1, 6, 7)]
}

fn setup(variant: Variant) -> (RunConfig, Vocabulary) {
    let mut config = RunConfig {
        styles: vec!["style0".into(), "style1".into()],
        variant,
        shape: ModelShape { num_layers: 1, num_heads: 2, model_dim: 8, ff_dim: 8, max_len: 8 },
        ..RunConfig::default()
    };
    config.training.batch_size = 2;
    config.training.max_iterations = 12;
    config.training.pretrain_iterations = 2;
    config.training.eval_every = 4;
    config.training.seed = 9;
    let vocab = Vocabulary::from_tokens(["a1", "a2", "b1", "b2"]).unwrap();
    (config, vocab)
}

/// Deterministic stand-in for a dev evaluation.
fn fake_dev(model: &Model) -> Result<DevMetrics> {
    let sum: f64 = model.gen_params.values().iter().flat_map(|t| t.data()).sum();
    Ok(DevMetrics { accuracy: 50.0 + sum.sin() * 40.0, self_bleu: 50.0 + sum.cos() * 40.0 })
}

fn trainer(config: &RunConfig) -> Trainer {
    let cfg = config.transformer(8);
    Trainer::new(config.training.clone(), &cfg, config.variant, &corpora()).unwrap()
}

fn run_until(t: &mut Trainer, stop: u64) {
    let every = t.config.eval_every;
    while t.iteration < stop {
        t.iterate().unwrap();
        if t.iteration % every == 0 {
            let m = fake_dev(&t.model).unwrap();
            t.record_dev(m);
        }
    }
}

#[test]
fn bytes_round_trip_exactly() {
    for variant in [Variant::Conditional, Variant::MultiClass] {
        let (config, vocab) = setup(variant);
        let mut t = trainer(&config);
        run_until(&mut t, 9);
        let ck = Checkpoint::from_trainer(&config, &vocab, &t);
        assert!(ck.best.is_some());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn save_and_load_through_a_file() {
    let (config, vocab) = setup(Variant::MultiClass);
    let t = trainer(&config);
    let ck = Checkpoint::from_trainer(&config, &vocab, &t);
    assert!(ck.best.is_none());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.stfm");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    for variant in [Variant::Conditional, Variant::MultiClass] {
        let (config, vocab) = setup(variant);
        let mut straight = trainer(&config);
        run_until(&mut straight, 12);

        let mut first = trainer(&config);
        run_until(&mut first, 6);
        let bytes = Checkpoint::from_trainer(&config, &vocab, &first).to_bytes().unwrap();
        drop(first);
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer(&corpora()).unwrap();
        run_until(&mut resumed, 12);

        assert!(resumed.model.gen_params.bitwise_eq(&straight.model.gen_params));
        assert!(resumed.model.disc_params.bitwise_eq(&straight.model.disc_params));
        assert_eq!(resumed.log, straight.log);
        assert_eq!(resumed.gen_opt.steps(), straight.gen_opt.steps());
        let (a, b) = (resumed.best.unwrap(), straight.best.unwrap());
        assert_eq!(a.0, b.0);
        assert!(a.1.bitwise_eq(&b.1));
    }
}

#[test]
fn model_and_best_model_restore_their_parameters() {
    let (config, vocab) = setup(Variant::MultiClass);
    let mut t = trainer(&config);
    run_until(&mut t, 4);
    let best = t.best.clone().unwrap().1;
    run_until(&mut t, 6);
    let ck = Checkpoint::from_trainer(&config, &vocab, &t);
    assert!(ck.model().unwrap().gen_params.bitwise_eq(&t.model.gen_params));
    let bm = ck.best_model().unwrap();
    let expected = t.best.as_ref().unwrap().1.clone();
    assert!(bm.gen_params.bitwise_eq(&expected));
    assert!(best.bitwise_eq(&expected));
    assert!(bm.disc_params.bitwise_eq(&t.model.disc_params));
}

#[test]
fn rng_state_survives_capture() {
    let (config, _) = setup(Variant::MultiClass);
    let mut t = trainer(&config);
    run_until(&mut t, 3);
    let mut copy = RngState::capture(&t.rng).restore();
    use rand::RngCore;
    for _ in 0..10 {
        assert_eq!(copy.next_u64(), t.rng.next_u64());
    }
}

#[test]
fn corrupt_inputs_are_rejected() {
    let (config, vocab) = setup(Variant::MultiClass);
    let t = trainer(&config);
    let bytes = Checkpoint::from_trainer(&config, &vocab, &t).to_bytes().unwrap();
    let msg = |b: &[u8]| Checkpoint::from_bytes(b).unwrap_err().to_string();

    assert!(msg(b"NOPE").contains("magic"));
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(msg(&v2).contains("version 2"));
    assert!(msg(&bytes[..bytes.len() - 3]).contains("end of file"));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(msg(&extra).contains("trailing"));
}

#[test]
fn missing_or_misshapen_tensors_are_reported() {
    let (config, vocab) = setup(Variant::MultiClass);
    let t = trainer(&config);
    let mut ck = Checkpoint::from_trainer(&config, &vocab, &t);
    let name = ck.tensors[0].0.clone();
    ck.tensors[0].1 = Tensor::zeros(vec![1, 1]);
    assert!(ck.model().unwrap_err().to_string().contains(&name));
    ck.tensors.remove(0);
    assert!(ck.model().unwrap_err().to_string().contains("missing"));
}
