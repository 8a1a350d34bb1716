//! End-to-end steps shared by the command-line tool and the acceptance
//! suite: loading data, training with dev selection and checkpoints,
//! transferring files and running the ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{build_vocab, corpus_path, load_corpus, read_lines, Split, StyleCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, split_pairs, transfer_parallel, EvalReport, Evaluator, NgramLM, StyleClassifier};
use crate::sentence::{Sentence, StyleId};
use crate::training::{Ablations, DevMetrics, LogRecord, Model, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.stfm";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.txt";

/// Vocabulary and encoded corpora in style order.
#[derive(Clone, Debug)]
pub struct Data {
    pub vocab: Vocabulary,
    pub corpora: Vec<StyleCorpus>,
}

impl Data {
    /// Reads `<style>.<split>.txt` for every configured style. The
    /// vocabulary comes from the training splits.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let mut lines = Vec::new();
        for name in &config.styles {
            lines.extend(read_lines(&corpus_path(&config.data_dir, name, Split::Train))?);
        }
        let vocab = build_vocab(lines.iter().map(String::as_str), config.vocab_min_freq)?;
        Self::load_with_vocab(config, vocab)
    }

    pub fn load_with_vocab(config: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let corpora = config
            .styles
            .iter()
            .enumerate()
            .map(|(i, name)| load_corpus(&config.data_dir, name, StyleId::from_index(i), &vocab, config.shape.max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Data { vocab, corpora })
    }
}

/// Style classifier and language model trained on the training splits.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub classifier: StyleClassifier,
    pub lm: NgramLM,
}

impl EvalSuite {
    pub fn build(config: &RunConfig, data: &Data) -> Result<Self> {
        let train: Vec<&[Sentence]> = data.corpora.iter().map(|c| c.train.as_slice()).collect();
        let classifier = StyleClassifier::train(&train, config.eval.classifier_epochs, config.eval.classifier_lr)?;
        let pooled: Vec<Sentence> = train.iter().flat_map(|t| t.iter().cloned()).collect();
        let lm = NgramLM::train(&pooled, config.eval.lm_order, config.eval.smoothing(), data.vocab.len())?;
        Ok(EvalSuite { classifier, lm })
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator { classifier: &self.classifier, lm: &self.lm }
    }

    /// Classifier accuracy and self-BLEU of transferring every dev sentence
    /// into each other style.
    pub fn dev_metrics(&self, model: &Model, corpora: &[StyleCorpus]) -> Result<DevMetrics> {
        let (xs, targets, _) = split_pairs(corpora, Split::Dev);
        if xs.is_empty() {
            return Err(Error::invalid("no dev sentences to evaluate"));
        }
        let outputs = transfer_parallel(model, &xs, &targets)?;
        let refs: Vec<Vec<&Sentence>> = xs.iter().map(|x| vec![x]).collect();
        Ok(DevMetrics {
            accuracy: self.classifier.accuracy(&outputs, &targets),
            self_bleu: corpus_bleu(&outputs, &refs)?,
        })
    }
}

/// Where a training run writes its checkpoint and log.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles { checkpoint: dir.join(CHECKPOINT_FILE), log: dir.join(LOG_FILE) }
    }

    fn save(&self, config: &RunConfig, vocab: &Vocabulary, trainer: &Trainer) -> Result<()> {
        for p in [&self.checkpoint, &self.log] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        Checkpoint::from_trainer(config, vocab, trainer).save(&self.checkpoint)?;
        fs::write(&self.log, log_lines(&trainer.log)).map_err(|e| Error::io(&self.log, e))
    }
}

/// One JSON object per record.
pub fn log_lines(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Trains until `max_iterations`, evaluating on dev every `eval_every`
/// iterations and once at the end. The checkpoint and log are rewritten
/// after every dev evaluation. A trainer that already finished is left
/// untouched.
pub fn train(
    config: &RunConfig,
    data: &Data,
    suite: &EvalSuite,
    trainer: &mut Trainer,
    files: Option<&RunFiles>,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<()> {
    let max = trainer.config.max_iterations;
    let every = trainer.config.eval_every;
    let dev = |t: &mut Trainer, progress: &mut dyn FnMut(&LogRecord)| -> Result<()> {
        let m = suite.dev_metrics(&t.model, &data.corpora)?;
        t.record_dev(m);
        progress(t.log.last().expect("dev record"));
        if let Some(f) = files {
            f.save(config, &data.vocab, t)?;
        }
        Ok(())
    };
    while trainer.iteration < max {
        progress(trainer.iterate()?);
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < max {
            dev(trainer, progress)?;
        }
    }
    let finished = matches!(trainer.log.last(), Some(LogRecord::Dev { iteration, .. }) if *iteration == max);
    if !finished {
        dev(trainer, progress)?;
    }
    Ok(())
}

/// Fresh trainer for `config` over `data`.
pub fn new_trainer(config: &RunConfig, data: &Data) -> Result<Trainer> {
    let cfg = config.transformer(data.vocab.len());
    Trainer::new(config.training.clone(), &cfg, config.variant, &data.corpora)
}

/// Transfers whitespace-tokenized `lines` into `target`.
pub fn transfer_lines(model: &Model, vocab: &Vocabulary, lines: &[String], target: StyleId) -> Result<Vec<String>> {
    let max_content = model.transformer.max_len.saturating_sub(2);
    let xs: Vec<Sentence> = lines.iter().map(|l| vocab.encode(l, max_content)).collect();
    let targets = vec![target; xs.len()];
    let out = transfer_parallel(model, &xs, &targets)?;
    Ok(out.iter().map(|y| vocab.decode(y)).collect())
}

/// The full model followed by one run per single switch.
pub fn ablation_grid() -> Vec<Ablations> {
    let one = |f: fn(&mut Ablations)| {
        let mut a = Ablations::default();
        f(&mut a);
        a
    };
    vec![
        Ablations::default(),
        one(|a| a.disable_self = true),
        one(|a| a.disable_cycle = true),
        one(|a| a.disable_style = true),
        one(|a| a.disc_real_only = true),
        one(|a| a.disc_generated_only = true),
    ]
}

/// Result of one ablation row.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub ablations: Ablations,
    pub trainer: Trainer,
    /// Test-set report of the best dev generator.
    pub report: EvalReport,
}

/// Trains and evaluates one configuration, writing its files under
/// `dir` when given.
pub fn train_and_report(
    config: &RunConfig,
    data: &Data,
    suite: &EvalSuite,
    dir: Option<&Path>,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<(Trainer, EvalReport)> {
    let mut trainer = new_trainer(config, data)?;
    let files = dir.map(RunFiles::in_dir);
    train(config, data, suite, &mut trainer, files.as_ref(), progress)?;
    let model = best_model(&trainer);
    let (report, _) = suite.evaluator().evaluate_system(&model, &data.corpora, None)?;
    if let Some(d) = dir {
        let path = d.join(REPORT_FILE);
        fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((trainer, report))
}

/// The trainer's model with the generator of its best dev evaluation.
pub fn best_model(trainer: &Trainer) -> Model {
    let mut model = trainer.model.clone();
    if let Some((_, best)) = &trainer.best {
        model.gen_params = best.clone();
    }
    model
}

/// Runs every row of [`ablation_grid`] with otherwise identical settings;
/// row `r` writes into `<out_dir>/<label>/`.
pub fn ablate(
    config: &RunConfig,
    data: &Data,
    suite: &EvalSuite,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&Ablations, &LogRecord),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for ablations in ablation_grid() {
        let mut c = config.clone();
        c.training.ablations = ablations;
        let dir = out_dir.map(|d| d.join(ablations.label()));
        let (trainer, report) = train_and_report(&c, data, suite, dir.as_deref(), &mut |r| progress(&ablations, r))?;
        runs.push(AblationRun { ablations, trainer, report });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests;
