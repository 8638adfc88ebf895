use std::path::{Path, PathBuf};

use log::info;
use mof_core::encoder::{
    load_similar_words, parse_feature_csv, pretrain_mlm, standardize_features, Encoder,
    FeatureTable, Vocabulary,
};
use mof_core::fusion::FusedSample;
use mof_core::ingest::{
    load_summaries, make_windows, parse_market_csv, split_train_test, summarize_or_raw,
    to_binary_labels, ExtractiveSummary, SummaryRecord,
};
use mof_core::models::ModelSpec;
use mof_core::numerics::{AdamConfig, ParameterStore};
use mof_core::train::{
    ablate_prior_effect, evaluate as evaluate_model, loss_csv, read_metrics_json, train_model,
    write_loss_csv, write_metrics_json, write_predictions_csv, EvalReport, TrainConfig,
    TrainedModel,
};
use mof_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, ExperimentConfig};

const RUN_FORMAT: &str = "mof-run";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Summarizes every summary record down to the configured sentence count.
fn condensed_texts(cfg: &ExperimentConfig) -> Result<Vec<SummaryRecord>> {
    let path = ExperimentConfig::require(&cfg.summaries, "--summaries")?;
    let summaries = load_summaries(path)?;
    if summaries.records.is_empty() {
        return Err(Error::File {
            path: path.into(),
            message: "no non-empty summaries".into(),
        });
    }
    if summaries.skipped_empty > 0 {
        log::warn!(
            "{}: skipped {} blank summaries",
            path.display(),
            summaries.skipped_empty
        );
    }
    let provider = ExtractiveSummary {
        sentences: cfg.summary_sentences,
    };
    summaries
        .records
        .into_iter()
        .map(|r| {
            Ok(SummaryRecord {
                text: summarize_or_raw(&r.text, &provider)?,
                ..r
            })
        })
        .collect()
}

fn pretrain(
    cfg: &ExperimentConfig,
    corpus: &[String],
    epochs: usize,
) -> Result<(Encoder, Vec<f64>)> {
    let mut vocab = Vocabulary::from_corpus(corpus);
    if let Some(path) = &cfg.similar_words {
        vocab.set_similar_words(&load_similar_words(path)?);
    }
    info!(
        "pretraining encoder on {} texts, vocabulary {}, {epochs} epochs",
        corpus.len(),
        vocab.len()
    );
    let run = pretrain_mlm(
        corpus,
        &vocab,
        &cfg.encoder_config,
        epochs,
        cfg.train.seed,
        AdamConfig::default(),
    )?;
    Ok((
        Encoder {
            config: cfg.encoder_config.clone(),
            vocab,
            params: run.params,
        },
        run.loss_trace,
    ))
}

fn write_pretraining(out: &Path, encoder: &Encoder, trace: &[f64]) -> Result<()> {
    encoder.save(&out.join("encoder.json"))?;
    write(&out.join("mlm_loss.csv"), loss_csv(trace))
}

pub fn pretrain_encoder(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    prepare_out_dir(out)?;
    let corpus: Vec<String> = condensed_texts(cfg)?.into_iter().map(|r| r.text).collect();
    let (encoder, trace) = pretrain(cfg, &corpus, cfg.pretrain_epochs)?;
    write_pretraining(out, &encoder, &trace)
}

/// Writes `features.csv` with one row per summary date.
pub fn featurize(cfg: &ExperimentConfig, pretrain_first: bool) -> Result<()> {
    cfg.validate()?;
    if cfg.encoder.is_none() && !pretrain_first {
        return Err(Error::Config(
            "featurize needs --encoder or --pretrain".into(),
        ));
    }
    let out = cfg.out_dir()?;
    prepare_out_dir(out)?;
    let texts = condensed_texts(cfg)?;
    let encoder = match &cfg.encoder {
        Some(path) => Encoder::load(path)?,
        None => {
            let corpus: Vec<String> = texts.iter().map(|r| r.text.clone()).collect();
            let (encoder, trace) = pretrain(cfg, &corpus, cfg.pretrain_epochs)?;
            write_pretraining(out, &encoder, &trace)?;
            encoder
        }
    };
    let len = cfg.train.feature_len;
    let mut table = FeatureTable::new(len);
    for r in &texts {
        let (tokens, pooled) = encoder.encode(&r.text)?;
        let mean: Vec<f64> = (0..tokens.cols())
            .map(|c| {
                (0..tokens.rows()).map(|r| tokens.at(r, c)).sum::<f64>() / tokens.rows() as f64
            })
            .collect();
        table.insert(r.date, standardize_features(&pooled, Some(&mean), len)?)?;
    }
    info!("encoded {} summaries into L={len} features", table.len());
    table.save(&out.join("features.csv"))
}

fn load_samples(cfg: &ExperimentConfig) -> Result<Vec<FusedSample>> {
    let market = parse_market_csv(ExperimentConfig::require(&cfg.market, "--market")?)?;
    if cfg.features.is_empty() {
        return Err(Error::Config("--features is required".into()));
    }
    let tables = cfg
        .features
        .iter()
        .map(|p| parse_feature_csv(p, Some(cfg.train.feature_len)))
        .collect::<Result<Vec<_>>>()?;
    make_windows(&to_binary_labels(&market), cfg.train.window, &tables)
}

fn split(cfg: &ExperimentConfig) -> Result<(Vec<FusedSample>, Vec<FusedSample>)> {
    let samples = load_samples(cfg)?;
    let (train, test) = split_train_test(&samples, cfg.split)?;
    info!(
        "{} windows: {} train, {} test",
        samples.len(),
        train.len(),
        test.len()
    );
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    format: String,
    version: u32,
    config: ExperimentConfig,
    model: TrainedModel,
    train_size: usize,
    test_size: usize,
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_loss_csv(&dir.join("loss.csv"), &report.loss_trace)?;
    write_metrics_json(&dir.join("metrics.json"), report)?;
    write_predictions_csv(&dir.join("predictions.csv"), report)
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    prepare_out_dir(out)?;
    let (train, test) = split(cfg)?;
    let model = train_model(&train, &cfg.train)?;
    let report = evaluate_model(&model, &test)?;
    info!(
        "{}: test accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}",
        cfg.train.model.kind, report.accuracy, report.precision, report.recall, report.f1
    );
    model.params.save(&out.join("params.json"))?;
    let run = RunFile {
        format: RUN_FORMAT.into(),
        version: 1,
        config: cfg.clone(),
        model: model.clone(),
        train_size: train.len(),
        test_size: test.len(),
    };
    write(&out.join("run.json"), to_json(&run))?;
    write_report(out, &report)
}

fn read_run(dir: &Path) -> Result<RunFile> {
    let path = dir.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let run: RunFile = serde_json::from_str(&text).map_err(|e| Error::File {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if run.format != RUN_FORMAT || run.version != 1 {
        return Err(Error::File {
            path,
            message: format!("unsupported run file {} v{}", run.format, run.version),
        });
    }
    Ok(run)
}

/// Re-scores a trained run on the test split of its data, or of the data
/// named by `market` / `features` when given.
pub fn evaluate(
    run_dir: &Path,
    market: Option<PathBuf>,
    features: Vec<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let run = read_run(run_dir)?;
    let mut cfg = run.config;
    if market.is_some() {
        cfg.market = market;
    }
    if !features.is_empty() {
        cfg.features = features;
    }
    let out = out.unwrap_or_else(|| run_dir.to_path_buf());
    cfg.out = Some(out.clone());
    cfg.validate()?;
    prepare_out_dir(&out)?;
    let params = ParameterStore::load(&run_dir.join("params.json"))?;
    let model = TrainedModel {
        params,
        ..run.model
    };
    let (_, test) = split(&cfg)?;
    let report = evaluate_model(&model, &test)?;
    write_metrics_json(&out.join("metrics.json"), &report)?;
    write_predictions_csv(&out.join("predictions.csv"), &report)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.ablate_models.is_empty() {
        return Err(Error::Config("ablation needs at least one model".into()));
    }
    let out = cfg.out_dir()?;
    prepare_out_dir(out)?;
    let (train, test) = split(cfg)?;
    let mut table =
        String::from("model,f1_with,f1_without,delta_f1,recall_with,recall_without,delta_recall\n");
    for &kind in &cfg.ablate_models {
        let tc = TrainConfig {
            model: ModelSpec {
                kind,
                ..cfg.train.model
            },
            ..cfg.train.clone()
        };
        let ab = ablate_prior_effect(&train, &test, &tc)?;
        info!(
            "{kind}: f1 {:.4} -> {:.4} without the prior effect",
            ab.with.f1, ab.without.f1
        );
        for (arm, report) in [("with", &ab.with), ("without", &ab.without)] {
            let dir = out.join(kind.name()).join(arm);
            prepare_out_dir(&dir)?;
            write_report(&dir, report)?;
        }
        table.push_str(&format!(
            "{kind},{},{},{},{},{},{}\n",
            ab.with.f1,
            ab.without.f1,
            ab.delta_f1,
            ab.with.recall,
            ab.without.recall,
            ab.delta_recall
        ));
    }
    write(&out.join("ablation.json"), to_json(cfg))?;
    write(&out.join("ablation.csv"), table)
}

struct RunSummary {
    model: String,
    report: EvalReport,
}

/// Finds every directory under `root` (depth ≤ 3) holding a metrics.json.
fn collect_runs(root: &Path, dir: &Path, depth: usize, acc: &mut Vec<RunSummary>) -> Result<()> {
    let metrics = dir.join("metrics.json");
    if metrics.is_file() {
        let model = match read_run(dir) {
            Ok(run) => run.config.train.model.kind.to_string(),
            Err(_) => {
                let rel = dir.strip_prefix(root).unwrap_or(dir);
                let name = rel.to_string_lossy().replace('\\', "/");
                if name.is_empty() {
                    root.file_name()
                        .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
                } else {
                    name
                }
            }
        };
        acc.push(RunSummary {
            model,
            report: read_metrics_json(&metrics)?,
        });
    }
    if depth == 0 {
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        collect_runs(root, &sub, depth - 1, acc)?;
    }
    Ok(())
}

/// Writes `comparison.csv` and `loss_curves.csv` for every run found under
/// `runs`.
pub fn report(runs: &Path, out: Option<PathBuf>) -> Result<()> {
    if !runs.is_dir() {
        return Err(Error::File {
            path: runs.into(),
            message: "not a directory".into(),
        });
    }
    let mut found = Vec::new();
    collect_runs(runs, runs, 3, &mut found)?;
    if found.is_empty() {
        return Err(Error::File {
            path: runs.into(),
            message: "no run with a metrics.json found".into(),
        });
    }
    let out = out.unwrap_or_else(|| runs.to_path_buf());
    prepare_out_dir(&out)?;
    let mut comparison = String::from("model,epochs,accuracy,precision,recall,f1\n");
    let mut curves = String::from("model,epoch,mean_loss\n");
    for r in &found {
        let m = &r.report;
        comparison.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model,
            m.loss_trace.len(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        ));
        for (e, l) in m.loss_trace.iter().enumerate() {
            curves.push_str(&format!("{},{},{l}\n", r.model, e + 1));
        }
    }
    write(&out.join("comparison.csv"), comparison)?;
    write(&out.join("loss_curves.csv"), curves)
}
