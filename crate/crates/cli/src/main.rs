//! `mof`: featurize summaries, pretrain the text encoder, train and evaluate
//! predictors, run the prior-effect ablation, and tabulate results.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use mof_core::models::ModelKind;
use mof_core::Error;

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "mof",
    version,
    about = "Multi-source fusion forecasting experiments"
)]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode summaries into a date-keyed feature CSV.
    Featurize(FeaturizeArgs),
    /// Pretrain the text encoder on a summaries file.
    PretrainEncoder(PretrainArgs),
    /// Train one model and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Re-evaluate a trained run.
    Evaluate(EvaluateArgs),
    /// Train each model with and without the prior effect.
    Ablate(AblateArgs),
    /// Tabulate metrics and loss curves of the runs under a directory.
    Report(ReportArgs),
}

fn model_parser() -> impl TypedValueParser<Value = ModelKind> {
    PossibleValuesParser::new(ModelKind::ALL.map(ModelKind::name)).map(|s| {
        s.parse::<ModelKind>()
            .expect("possible values are valid kinds")
    })
}

#[derive(Args, Debug, Default)]
struct TextArgs {
    /// Summaries JSONL (`{"date": ..., "text": ...}` per line).
    #[arg(long)]
    summaries: Option<PathBuf>,
    /// JSON table of similar words used to corrupt masked tokens.
    #[arg(long)]
    similar: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[command(flatten)]
    text: TextArgs,
    /// Pretrained encoder file.
    #[arg(long, conflicts_with = "pretrain")]
    encoder: Option<PathBuf>,
    /// Pretrain an encoder on the summaries first.
    #[arg(long)]
    pretrain: bool,
    /// Pretraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Feature length L.
    #[arg(long)]
    feature_len: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    text: TextArgs,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Market CSV (Date, Chg, Open, Close, Volume).
    #[arg(long)]
    market: Option<PathBuf>,
    /// Feature CSV, one per text stream.
    #[arg(long)]
    features: Vec<PathBuf>,
    /// Window length n.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    feature_len: Option<usize>,
    /// Training share of the windows.
    #[arg(long)]
    split: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct FitArgs {
    /// Epochs (100, 200, 400 or any positive count).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden width H.
    #[arg(long)]
    hidden: Option<usize>,
    /// Mogrifier rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// SwinLSTM attention window.
    #[arg(long)]
    swin_window: Option<usize>,
    /// SwinLSTM attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// ST-LSTM memory width.
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_parser = model_parser())]
    model: Option<ModelKind>,
    /// Zero the prior-effect vector.
    #[arg(long)]
    no_prior_effect: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Models to ablate (repeatable; default feedforward and lstm).
    #[arg(long, value_parser = model_parser())]
    model: Vec<ModelKind>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    market: Option<PathBuf>,
    #[arg(long)]
    features: Vec<PathBuf>,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding one or more runs.
    runs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl TextArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        set_opt(&mut cfg.summaries, self.summaries);
        set_opt(&mut cfg.similar_words, self.similar);
        set_opt(&mut cfg.out, self.out);
        set(&mut cfg.train.seed, self.seed);
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        set_opt(&mut cfg.market, self.market);
        if !self.features.is_empty() {
            cfg.features = self.features;
        }
        set(&mut cfg.train.window, self.window);
        set(&mut cfg.train.feature_len, self.feature_len);
        set(&mut cfg.split, self.split);
    }
}

impl FitArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.seed, self.seed);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.model.hidden, self.hidden);
        set(&mut t.model.rounds, self.rounds);
        set(&mut t.model.window, self.swin_window);
        set(&mut t.model.heads, self.heads);
        set_opt(&mut t.model.memory, self.memory);
        set_opt(&mut cfg.out, self.out);
    }
}

fn run(cli: Cli) -> mof_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Featurize(a) => {
            a.text.apply(&mut cfg);
            set_opt(&mut cfg.encoder, a.encoder.clone());
            set(&mut cfg.pretrain_epochs, a.epochs);
            set(&mut cfg.train.feature_len, a.feature_len);
            commands::featurize(&cfg, a.pretrain)
        }
        Command::PretrainEncoder(a) => {
            a.text.apply(&mut cfg);
            set(&mut cfg.pretrain_epochs, a.epochs);
            commands::pretrain_encoder(&cfg)
        }
        Command::Train(a) => {
            a.data.apply(&mut cfg);
            a.fit.apply(&mut cfg);
            set(&mut cfg.train.model.kind, a.model);
            if a.no_prior_effect {
                cfg.train.prior_effect = false;
            }
            commands::train(&cfg)
        }
        Command::Ablate(a) => {
            a.data.apply(&mut cfg);
            a.fit.apply(&mut cfg);
            if !a.model.is_empty() {
                cfg.ablate_models = a.model;
            }
            commands::ablate(&cfg)
        }
        Command::Evaluate(a) => commands::evaluate(&a.run, a.market, a.features, a.out),
        Command::Report(a) => commands::report(&a.runs, a.out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence { .. } | Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn error_kind(code: u8) -> &'static str {
    match code {
        1 => "config",
        3 => "divergence",
        _ => "data",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({ "error": error_kind(code), "exit_code": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
