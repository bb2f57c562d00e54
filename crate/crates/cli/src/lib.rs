//! Command-line orchestration of the zero-shot dual-learning experiments.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use dualshot::translator::{DecodeMode, MAX_TRAIN_LEN};
use dualshot::{NumError, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use config::ExperimentConfig;
use pipeline::{ResumeCorpus, Workspace};

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<dualshot::Error> for CliError {
    fn from(e: dualshot::Error) -> Self {
        match e {
            dualshot::Error::Num(n) => n.into(),
            dualshot::Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NumError> for CliError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<dualshot::tokenizer::TokenizerError> for CliError {
    fn from(e: dualshot::tokenizer::TokenizerError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dualshot", version, about = "Zero-shot dual-learning translation experiments")]
#[command(after_help = ExperimentConfig::help())]
pub struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment working directory.
    #[arg(long, global = true, value_name = "PATH", default_value = "run")]
    pub out_dir: PathBuf,
    /// Override one config key (repeatable); applied after --config and --seed.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Suppress progress messages on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusArg {
    Small,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpora into <out-dir>/data.
    GenData,
    /// Learn BPE merges and the vocabulary from the generated training text.
    LearnBpe,
    /// Train the frozen language models of the zero-shot pair.
    TrainLm {
        /// Languages to train (default: both zero-shot languages).
        #[arg(long, value_delimiter = ',')]
        lang: Vec<String>,
    },
    /// Train the pivot-only translator (NMT-0).
    TrainNmt {
        /// Supervised steps (default: nmt_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dual training from an existing regime.
    TrainDual {
        /// Regime to start from.
        #[arg(long, default_value = "NMT-0")]
        init: String,
        /// Name of the trained regime.
        #[arg(long, default_value = "Dual-0")]
        name: String,
        /// Dual steps (default: dual_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Resume supervised training on zero-shot-pair parallel data.
    Resume {
        /// Regime to start from.
        #[arg(long, default_value = "NMT-0")]
        init: String,
        /// Parallel corpus to resume on.
        #[arg(long, value_enum, default_value = "small")]
        corpus: CorpusArg,
        /// Name of the trained regime.
        #[arg(long, default_value = "NMT-S")]
        name: String,
        /// Supervised steps (default: resume_small_steps or resume_full_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Translate standard input line by line.
    Translate {
        /// Regime whose checkpoint translates.
        #[arg(long, default_value = "NMT-0")]
        model: String,
        /// Source language.
        #[arg(long)]
        from: String,
        /// Target language.
        #[arg(long)]
        to: String,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Evaluate regimes on the multi-way test set.
    Evaluate {
        /// Comma-separated regimes to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "NMT-0")]
        models: Vec<String>,
    },
    /// Run the full pipeline and write the evaluation matrix.
    RunExperiment,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.apply_overrides(&cli.set)?;
    Ok(cfg)
}

fn execute(cli: Cli, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli)?;
    let ws = Workspace { root: cli.out_dir.clone(), quiet: cli.quiet };
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    match cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, &ws)?;
        }
        Command::LearnBpe => {
            pipeline::learn_bpe(&cfg, &ws)?;
        }
        Command::TrainLm { lang } => {
            let roles = pipeline::Roles::from_config(&cfg)?;
            let langs = if lang.is_empty() { vec![roles.x, roles.y] } else { lang };
            for l in langs {
                if !roles.all.contains(&l) {
                    return Err(CliError::Usage(format!("unknown language `{l}`")));
                }
                pipeline::train_lm(&cfg, &ws, &l)?;
            }
        }
        Command::TrainNmt { steps } => {
            cfg.nmt_steps = steps.unwrap_or(cfg.nmt_steps);
            pipeline::train_nmt(&cfg, &ws)?;
        }
        Command::TrainDual { init, name, steps } => {
            cfg.dual_steps = steps.unwrap_or(cfg.dual_steps);
            pipeline::train_dual(&cfg, &ws, &init, &name)?;
        }
        Command::Resume { init, corpus, name, steps } => {
            let which = match corpus {
                CorpusArg::Small => {
                    cfg.resume_small_steps = steps.unwrap_or(cfg.resume_small_steps);
                    ResumeCorpus::Small
                }
                CorpusArg::Full => {
                    cfg.resume_full_steps = steps.unwrap_or(cfg.resume_full_steps);
                    ResumeCorpus::Full
                }
            };
            pipeline::resume(&cfg, &ws, &init, which, &name)?;
        }
        Command::Translate { model, from, to, temperature } => {
            let (table, vocab) = pipeline::load_tokenizer(&ws)?;
            check_language(&vocab, &from)?;
            check_language(&vocab, &to)?;
            let m = pipeline::load_model(&ws, &vocab, &pipeline::model_stem(&model))?;
            let mode = match temperature {
                Some(t) => DecodeMode::Sample { temperature: t },
                None => DecodeMode::Greedy,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(pipeline::derive_seed(cfg.seed, "translate"));
            let lines: Vec<String> = input.lines().collect::<Result<_, _>>().map_err(io)?;
            let lines: Vec<String> = lines
                .into_iter()
                .map(|l| if l.split_whitespace().count() > MAX_TRAIN_LEN { String::new() } else { l })
                .collect();
            for chunk in lines.chunks(256) {
                for t in m.translate_batch(&vocab, &table, chunk, &to, mode, &mut rng)? {
                    writeln!(output, "{t}").map_err(io)?;
                }
            }
        }
        Command::Evaluate { models } => {
            let names: Vec<&str> = models.iter().map(String::as_str).collect();
            let matrix = pipeline::evaluate(&cfg, &ws, &names)?;
            write!(output, "{}", matrix.to_table()).map_err(io)?;
        }
        Command::RunExperiment => {
            let matrix = pipeline::run_experiment(&cfg, &ws)?;
            write!(output, "{}", matrix.to_table()).map_err(io)?;
        }
    }
    Ok(())
}

fn check_language(vocab: &Vocab, lang: &str) -> Result<(), CliError> {
    vocab.tag_id(lang).map(|_| ()).map_err(|_| CliError::Usage(format!("unknown language `{lang}`")))
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. Errors are reported on standard error.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, output: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, input, output) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
