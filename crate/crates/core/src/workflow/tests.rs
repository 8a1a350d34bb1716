use super::*;
use crate::config::ModelShape;
use crate::data::{SyntheticSpec, SyntheticTask};
use crate::eval::split_pairs;

fn small_task() -> SyntheticTask {
    let spec = SyntheticSpec { train_size: 30, dev_size: 4, test_size: 4, ..SyntheticSpec::default_with_seed(5) };
    SyntheticTask::generate(&spec).unwrap()
}

fn small_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        data_dir: dir.to_path_buf(),
        out_dir: dir.join("runs"),
        shape: ModelShape { num_layers: 1, num_heads: 2, model_dim: 8, ff_dim: 8, max_len: 12 },
        ..RunConfig::default()
    };
    c.training.batch_size = 2;
    c.training.max_iterations = 5;
    c.training.eval_every = 2;
    c.eval.classifier_epochs = 5;
    c.eval.lm_order = 3;
    c
}

#[test]
fn data_loads_from_written_files() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    task.write(dir.path()).unwrap();
    let config = small_config(dir.path());
    let data = Data::load(&config).unwrap();
    assert_eq!(data.corpora.len(), 2);
    assert_eq!(data.corpora[1].style, StyleId::from_index(1));
    assert_eq!(data.corpora[0].train.len(), 30);
    let first = &task.lines(0, Split::Train)[0];
    assert_eq!(&data.vocab.decode(&data.corpora[0].train[0]), first);

    let mut missing = config.clone();
    missing.styles[1] = "neutral".into();
    assert!(matches!(Data::load(&missing), Err(Error::Io { .. })));
}

#[test]
fn dev_metrics_agree_with_the_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    small_task().write(dir.path()).unwrap();
    let config = small_config(dir.path());
    let data = Data::load(&config).unwrap();
    let suite = EvalSuite::build(&config, &data).unwrap();
    let model = new_trainer(&config, &data).unwrap().model;
    let m = suite.dev_metrics(&model, &data.corpora).unwrap();
    let (xs, targets, _) = split_pairs(&data.corpora, Split::Dev);
    let outputs = model.transfer(&xs, &targets).unwrap();
    let r = suite.evaluator().score(&xs, &targets, &outputs, None).unwrap();
    assert_eq!(m.accuracy, r.accuracy);
    assert_eq!(m.self_bleu, r.self_bleu);
}

#[test]
fn training_writes_checkpoint_and_log_and_resumes_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    small_task().write(dir.path()).unwrap();
    let config = small_config(dir.path());
    let data = Data::load(&config).unwrap();
    let suite = EvalSuite::build(&config, &data).unwrap();
    let files = RunFiles::in_dir(&config.out_dir);
    let mut trainer = new_trainer(&config, &data).unwrap();
    let mut seen = Vec::new();
    train(&config, &data, &suite, &mut trainer, Some(&files), &mut |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, trainer.log);
    let devs: Vec<u64> = trainer
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Dev { iteration, .. } => Some(*iteration),
            _ => None,
        })
        .collect();
    assert_eq!(devs, [2, 4, 5]);

    let text = fs::read_to_string(&files.log).unwrap();
    assert_eq!(text, log_lines(&trainer.log));
    let ck = Checkpoint::load(&files.checkpoint).unwrap();
    assert_eq!(ck.iteration, 5);
    assert_eq!(ck.log, trainer.log);

    let mut resumed = ck.trainer(&data.corpora).unwrap();
    train(&config, &data, &suite, &mut resumed, None, &mut |_| panic!("finished run must not train")).unwrap();
    assert_eq!(resumed.log, trainer.log);
}

#[test]
fn transfer_lines_round_trips_through_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    small_task().write(dir.path()).unwrap();
    let config = small_config(dir.path());
    let data = Data::load(&config).unwrap();
    let model = new_trainer(&config, &data).unwrap().model;
    let lines = vec!["the food was good".to_string(), "zzz unknown".to_string()];
    let out = transfer_lines(&model, &data.vocab, &lines, StyleId::from_index(1)).unwrap();
    let direct = model
        .transfer(
            &lines.iter().map(|l| data.vocab.encode(l, 10)).collect::<Vec<_>>(),
            &[StyleId::from_index(1); 2],
        )
        .unwrap();
    assert_eq!(out, direct.iter().map(|y| data.vocab.decode(y)).collect::<Vec<_>>());
}

#[test]
fn the_grid_has_one_row_per_switch() {
    let labels: Vec<String> = ablation_grid().iter().map(|a| a.label()).collect();
    assert_eq!(
        labels,
        ["full", "disable_self", "disable_cycle", "disable_style", "disc_real_only", "disc_generated_only"]
    );
}

#[test]
fn best_model_uses_the_selected_generator() {
    let dir = tempfile::tempdir().unwrap();
    small_task().write(dir.path()).unwrap();
    let config = small_config(dir.path());
    let data = Data::load(&config).unwrap();
    let mut trainer = new_trainer(&config, &data).unwrap();
    assert!(best_model(&trainer).gen_params.bitwise_eq(&trainer.model.gen_params));
    trainer.record_dev(DevMetrics { accuracy: 100.0, self_bleu: 100.0 });
    let chosen = trainer.model.gen_params.clone();
    trainer.iterate().unwrap();
    assert!(best_model(&trainer).gen_params.bitwise_eq(&chosen));
    assert!(!trainer.model.gen_params.bitwise_eq(&chosen));
}
