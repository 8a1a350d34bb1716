//! `stfm`: synthesize corpora, train, transfer, evaluate and ablate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stfm_core::data::{read_lines, write_lines, SyntheticSpec, SyntheticTask};
use stfm_core::training::LogRecord;
use stfm_core::workflow::{self, Data, EvalSuite, RunFiles, REPORT_FILE};
use stfm_core::{Checkpoint, Error, Result, RunConfig, StyleId, Variant};

#[derive(Parser)]
#[command(name = "stfm", version, about = "Unpaired text style transfer with a style-token transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-style corpus and a matching config.
    Synth(SynthArgs),
    /// Train a model; resumes when given a checkpoint.
    Train(TrainArgs),
    /// Transfer a file of sentences into a target style.
    Transfer(TransferArgs),
    /// Score a checkpoint on the test splits, or a file of outputs.
    Eval(EvalArgs),
    /// Train and score the full model and every single ablation.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the corpus files and `stfm.conf`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training sentences per style.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

/// Settings that override the config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    disable_self: bool,
    #[arg(long)]
    disable_cycle: bool,
    #[arg(long)]
    disable_style: bool,
    #[arg(long)]
    disc_real_only: bool,
    #[arg(long)]
    disc_generated_only: bool,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        let t = &mut config.training;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(v) = self.variant {
            config.variant = v;
        }
        if let Some(n) = self.iterations {
            t.max_iterations = n;
        }
        let a = &mut t.ablations;
        a.disable_self |= self.disable_self;
        a.disable_cycle |= self.disable_cycle;
        a.disable_style |= self.disable_style;
        a.disc_real_only |= self.disc_real_only;
        a.disc_generated_only |= self.disc_generated_only;
        config.validate()
    }

    fn changes_model(&self) -> bool {
        self.seed.is_some()
            || self.variant.is_some()
            || self.disable_self
            || self.disable_cycle
            || self.disable_style
            || self.disc_real_only
            || self.disc_generated_only
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// Resume from this checkpoint; its stored config is used.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Run directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target style name.
    #[arg(long)]
    style: String,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the latest parameters instead of the best dev generator.
    #[arg(long)]
    latest: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Config naming the data whose training splits fit the classifier and
    /// language model. Defaults to the checkpoint's stored config.
    #[arg(long, required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate on every test sentence.
    #[arg(long, conflicts_with = "outputs")]
    checkpoint: Option<PathBuf>,
    /// Transferred sentences, line-aligned with `--input`.
    #[arg(long, requires_all = ["input", "style"])]
    outputs: Option<PathBuf>,
    /// Source sentences of `--outputs`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Target style of `--outputs`.
    #[arg(long)]
    style: Option<String>,
    /// Human references, line-aligned with `--input`.
    #[arg(long, requires = "outputs")]
    references: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving one subdirectory per row, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    iterations: Option<u64>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn report_progress(prefix: &str, record: &LogRecord) {
    if let LogRecord::Dev { iteration, metrics, score } = record {
        eprintln!(
            "{prefix}iteration {iteration}: dev accuracy {:.1}, self-BLEU {:.1}, score {score:.1}",
            metrics.accuracy, metrics.self_bleu
        );
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(args.seed);
    spec.train_size = args.train_size.unwrap_or(spec.train_size);
    spec.dev_size = args.dev_size.unwrap_or(spec.dev_size);
    spec.test_size = args.test_size.unwrap_or(spec.test_size);
    let task = SyntheticTask::generate(&spec)?;
    task.write(&args.out)?;
    let mut config = RunConfig {
        data_dir: PathBuf::from("."),
        out_dir: PathBuf::from("runs"),
        styles: spec.style_names.to_vec(),
        ..RunConfig::default()
    };
    config.training.seed = args.seed;
    let path = args.out.join("stfm.conf");
    write_text(&path, &config.to_text())?;
    println!("wrote {} sentences per style and {}", spec.train_size + spec.dev_size + spec.test_size, path.display());
    Ok(())
}

/// Loads a config; a relative `data_dir` or `out_dir` is taken relative to
/// the config file and stored as an absolute path.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let absolute = |p: &Path| std::path::absolute(base.join(p)).map_err(|e| Error::Io { path: p.to_path_buf(), source: e });
    config.data_dir = absolute(&config.data_dir)?;
    config.out_dir = absolute(&config.out_dir)?;
    Ok(config)
}

fn train(args: &TrainArgs) -> Result<()> {
    let (config, data, mut trainer) = match (&args.checkpoint, &args.config) {
        (Some(path), _) => {
            if args.overrides.changes_model() {
                return Err(invalid("only --iterations may change a resumed run"));
            }
            let ck = Checkpoint::load(path)?;
            let mut config = ck.config.clone();
            args.overrides.apply(&mut config)?;
            let data = Data::load_with_vocab(&config, ck.vocab.clone())?;
            let mut trainer = ck.trainer(&data.corpora)?;
            trainer.config.max_iterations = config.training.max_iterations;
            (config, data, trainer)
        }
        (None, Some(path)) => {
            let mut config = load_config(path)?;
            args.overrides.apply(&mut config)?;
            let data = Data::load(&config)?;
            let trainer = workflow::new_trainer(&config, &data)?;
            (config, data, trainer)
        }
        (None, None) => return Err(invalid("train needs --config or --checkpoint")),
    };
    let out = args.out.clone().unwrap_or_else(|| config.out_dir.clone());
    create_dir(&out)?;
    let suite = EvalSuite::build(&config, &data)?;
    let files = RunFiles::in_dir(&out);
    workflow::train(&config, &data, &suite, &mut trainer, Some(&files), &mut |r| report_progress("", r))?;
    match &trainer.best {
        Some((m, _)) => println!(
            "trained {} iterations; best dev accuracy {:.1}, self-BLEU {:.1}; checkpoint {}",
            trainer.iteration,
            m.accuracy,
            m.self_bleu,
            files.checkpoint.display()
        ),
        None => println!("trained {} iterations; checkpoint {}", trainer.iteration, files.checkpoint.display()),
    }
    Ok(())
}

fn transfer(args: &TransferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let target = StyleId::from_index(ck.config.style_index(&args.style)?);
    let model = if args.latest { ck.model()? } else { ck.best_model()? };
    let lines = read_lines(&args.input)?;
    let out = workflow::transfer_lines(&model, &ck.vocab, &lines, target)?;
    write_lines(&args.out, &out)?;
    println!("transferred {} sentences into `{}`", out.len(), args.style);
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let config = match (&args.config, &ck) {
        (Some(path), _) => load_config(path)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => return Err(invalid("eval needs --config or --checkpoint")),
    };
    let report = match (&ck, &args.outputs) {
        (Some(ck), _) => {
            let data = Data::load_with_vocab(&config, ck.vocab.clone())?;
            let suite = EvalSuite::build(&config, &data)?;
            let model = ck.best_model()?;
            suite.evaluator().evaluate_system(&model, &data.corpora, None)?.0
        }
        (None, Some(outputs)) => {
            let (Some(input), Some(style)) = (&args.input, &args.style) else {
                return Err(invalid("--outputs needs --input and --style"));
            };
            let data = Data::load(&config)?;
            let suite = EvalSuite::build(&config, &data)?;
            let max_content = config.shape.max_len.saturating_sub(2);
            let encode = |path: &Path| -> Result<Vec<_>> {
                Ok(read_lines(path)?.iter().map(|l| data.vocab.encode(l, max_content)).collect())
            };
            let xs = encode(input)?;
            let ys = encode(outputs)?;
            if xs.len() != ys.len() {
                return Err(invalid(format!("{} inputs but {} outputs", xs.len(), ys.len())));
            }
            let refs = args.references.as_deref().map(encode).transpose()?;
            let targets = vec![StyleId::from_index(config.style_index(style)?); xs.len()];
            suite.evaluator().score(&xs, &targets, &ys, refs.as_deref())?
        }
        (None, None) => return Err(invalid("eval needs --checkpoint or --outputs")),
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    let overrides = Overrides { seed: args.seed, variant: args.variant, iterations: args.iterations, ..Default::default() };
    overrides.apply(&mut config)?;
    let out = args.out.clone().unwrap_or_else(|| config.out_dir.clone());
    let data = Data::load(&config)?;
    let suite = EvalSuite::build(&config, &data)?;
    let runs = workflow::ablate(&config, &data, &suite, Some(&out), &mut |a, r| {
        report_progress(&format!("[{}] ", a.label()), r)
    })?;
    let mut table = format!("{:<20} {:>8} {:>9} {:>10}\n", "row", "accuracy", "self_bleu", "perplexity");
    for run in &runs {
        let r = &run.report;
        table += &format!("{:<20} {:>8.1} {:>9.1} {:>10.1}\n", run.ablations.label(), r.accuracy, r.self_bleu, r.perplexity);
    }
    print!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    eprintln!("per-row reports are in {}/<row>/{REPORT_FILE}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Transfer(a) => transfer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
