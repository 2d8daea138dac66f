//! The `s2g` command line: data generation, training, prediction and
//! evaluation.

pub mod checkpoint;
pub mod config;
pub mod pipeline;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    generate_synthetic, load_distractor_dataset, save_distractor_dataset, MetricReport, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::reader::Reader;
use crate::retriever::Retriever;
pub use checkpoint::{Checkpoint, Task};
pub use config::{DataPaths, RunConfig};
pub use pipeline::{evaluate, predict, train, Loaded, PredictionFile, RetrievalRecord};

#[derive(Debug, Parser)]
#[command(
    name = "s2g",
    version,
    about = "Multi-hop question answering: paragraph retrieval and evidence-guided reading"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train.json and dev.json in the distractor schema.
    GenData(GenDataArgs),
    /// Train the retriever or the reader and write a checkpoint.
    Train(TrainArgs),
    /// Retrieve, read and write the prediction document.
    Predict(PredictArgs),
    /// Score a prediction document against gold data.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub fraction_comparison: f64,
    #[arg(long, default_value_t = 10)]
    pub n_paragraphs: usize,
    #[arg(long, default_value_t = 300)]
    pub entity_vocab_size: usize,
    #[arg(long)]
    pub long_paragraphs: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data; overrides `data.train` of the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dev data scored after every epoch; overrides `data.dev`.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub reader: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selected paragraphs and stage scores, one JSON line
    /// per question.
    #[arg(long)]
    pub retrieval_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Retrieval records written by `predict --retrieval-out`.
    #[arg(long)]
    pub retrieval: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}")?;
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = |seed, n_examples| SyntheticSpec {
        seed,
        n_examples,
        n_paragraphs: args.n_paragraphs,
        entity_vocab_size: args.entity_vocab_size,
        fraction_comparison: args.fraction_comparison,
        long_paragraphs: args.long_paragraphs,
    };
    let train = generate_synthetic(&spec(args.seed, args.n_train))?;
    let dev = generate_synthetic(&spec(args.seed.wrapping_add(1), args.n_dev))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::file(&args.out, e))?;
    save_distractor_dataset(args.out.join("train.json"), &train)?;
    save_distractor_dataset(args.out.join("dev.json"), &dev)
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.data {
        cfg.data.train = Some(p.clone());
    }
    if let Some(p) = &args.dev {
        cfg.data.dev = Some(p.clone());
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}

pub fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let train_path = cfg.data.train.clone().ok_or_else(|| Error::Validation("no training data given".into()))?;
    let train_data = load_distractor_dataset(&train_path)?;
    let dev_data = cfg.data.dev.as_ref().map(load_distractor_dataset).transpose()?;
    let mut log_err = None;
    let mut log = |e: &pipeline::EpochLog| {
        let r = serde_json::to_string(e).map_err(Error::from).and_then(|l| emit(out, &l));
        if let Err(e) = r {
            log_err.get_or_insert(e);
        }
    };
    let ckpt = match args.task {
        Task::Retriever => {
            train::<Retriever>(&cfg, &train_data, dev_data.as_deref(), args.threads, &mut log)?.to_checkpoint()
        }
        Task::Reader => {
            train::<Reader>(&cfg, &train_data, dev_data.as_deref(), args.threads, &mut log)?.to_checkpoint()
        }
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    ckpt.save(&args.out)
}

pub fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let retriever = Loaded::<Retriever>::from_checkpoint(&Checkpoint::load(&args.retriever)?)?;
    let reader = Loaded::<Reader>::from_checkpoint(&Checkpoint::load(&args.reader)?)?;
    let data = load_distractor_dataset(&args.data)?;
    let (file, records) = predict(&retriever, &reader, &data, args.threads)?;
    write_file(&args.out, file.to_json()?.as_bytes())?;
    if let Some(p) = &args.retrieval_out {
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs, out: &mut dyn Write) -> Result<MetricReport> {
    let pred = PredictionFile::load(&args.pred)?;
    let gold = load_distractor_dataset(&args.gold)?;
    let records = match &args.retrieval {
        Some(p) => {
            Some(pipeline::parse_retrieval_records(&std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?)?)
        }
        None => None,
    };
    let report = evaluate(&pred, &gold, records.as_deref())?;
    let json = serde_json::to_string(&report)?;
    if let Some(p) = &args.out {
        write_file(p, format!("{json}\n").as_bytes())?;
    }
    emit(out, &json)?;
    emit(out, &report.to_string())?;
    Ok(report)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, out),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a, out).map(|_| ()),
    }
}

/// 0 on success, 2 when the environment failed (files, disk), 1 otherwise.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}

/// Parses `args` (program name first), runs, reports errors on stderr and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let result = run(&cli, &mut stdout.lock());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}
