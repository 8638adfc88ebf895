//! Loss, training loop, evaluation metrics and the prior-effect ablation.

use std::borrow::Cow;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedSample, FusionConfig};
use crate::ingest::PriorEffectVector;
use crate::models::{label, InputShape, ModelSpec, Predictor};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParameterStore, Tape, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;

fn check_targets(p_len: usize, y: &[u8]) -> Result<()> {
    if p_len != y.len() {
        return Err(Error::contract(format!(
            "{p_len} probabilities but {} targets",
            y.len()
        )));
    }
    if p_len == 0 {
        return Err(Error::contract("loss of an empty batch"));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::contract(format!("target {bad} is not binary")));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    check_targets(p.len(), y)?;
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Tape version of [`bce_loss`] for a `B × 1` probability column.
pub fn bce_loss_var(tape: &mut Tape, p: Var, y: &[u8]) -> Result<Var> {
    check_targets(tape.value(p)?.len(), y)?;
    let t = tape.leaf(Tensor::matrix(
        y.len(),
        1,
        y.iter().map(|&v| f64::from(v)).collect(),
    )?);
    let not_t = tape.affine(t, -1.0, 1.0)?;
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.ln(pc)?;
    let q = tape.affine(pc, -1.0, 1.0)?;
    let log_q = tape.ln(q)?;
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(not_t, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll)?;
    tape.scale(mean, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelSpec,
    pub fusion: FusionConfig,
    pub prior_effect: bool,
    /// Window length `n`; each sample carries `n - 1` history days.
    pub window: usize,
    /// Text feature length `L`.
    pub feature_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            model: ModelSpec::default(),
            fusion: FusionConfig::default(),
            prior_effect: true,
            window: 6,
            feature_len: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.window < 2 {
            return Err(Error::config(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        self.model.validate()?;
        self.fusion.validate()
    }

    fn predictor(&self, samples: &[FusedSample]) -> Result<Predictor> {
        let shape = InputShape::of(samples)?;
        if shape.steps != self.window - 1 {
            return Err(Error::config(format!(
                "samples carry {} history days but window {} implies {}",
                shape.steps,
                self.window,
                self.window - 1
            )));
        }
        if shape.feature_len != self.feature_len {
            return Err(Error::shape(format!(
                "text features have L={}, configured L={}",
                shape.feature_len, self.feature_len
            )));
        }
        Predictor::new(self.model, self.fusion, shape)
    }
}

/// Samples as a model sees them: the prior vector is zeroed when the prior
/// effect is off.
pub fn with_prior_effect(samples: &[FusedSample], enabled: bool) -> Cow<'_, [FusedSample]> {
    if enabled {
        return Cow::Borrowed(samples);
    }
    Cow::Owned(
        samples
            .iter()
            .map(|s| FusedSample {
                prior: PriorEffectVector::zeros(s.prior.len()),
                ..s.clone()
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub predictor: Predictor,
    pub prior_effect: bool,
    #[serde(skip)]
    pub params: ParameterStore,
    pub loss_trace: Vec<f64>,
}

impl TrainedModel {
    pub fn predict(&self, samples: &[FusedSample]) -> Result<Vec<f64>> {
        self.predictor
            .predict(&self.params, &with_prior_effect(samples, self.prior_effect))
    }
}

/// Adam on chronological mini-batches, no shuffling. The trace holds the
/// sample-weighted mean loss of each epoch.
pub fn train_model(train: &[FusedSample], config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let predictor = config.predictor(train)?;
    let samples = with_prior_effect(train, config.prior_effect);
    let mut params = predictor.init_params(config.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let p = match predictor.forward(&mut tape, &bound, batch) {
                Err(Error::Numeric(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b + 1,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            let targets: Vec<u8> = batch.iter().map(|s| s.target).collect();
            let loss = bce_loss_var(&mut tape, p, &targets)?;
            let value = tape.value(loss)?.item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            let grads = bound.gradients(&tape.backward(loss)?, &tape)?;
            adam_step(&mut params, &grads, &mut adam)?;
            total += value * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(TrainedModel {
        predictor,
        prior_effect: config.prior_effect,
        params,
        loss_trace: trace,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn count(labels: &[u8], targets: &[u8]) -> Self {
        let mut c = Self::default();
        for (&l, &t) in labels.iter().zip(targets) {
            match (l, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Ratio with a zero denominator mapped to 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Self {
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub date: NaiveDate,
    pub probability: f64,
    pub label: u8,
    pub target: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub loss_trace: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

/// Test-set metrics of the final parameters.
pub fn evaluate(model: &TrainedModel, test: &[FusedSample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let probs = model.predict(test)?;
    let predictions: Vec<Prediction> = test
        .iter()
        .zip(&probs)
        .map(|(s, &p)| Prediction {
            date: s.date,
            probability: p,
            label: label(p),
            target: s.target,
        })
        .collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let targets: Vec<u8> = predictions.iter().map(|p| p.target).collect();
    let confusion = Confusion::count(&labels, &targets);
    let m = Metrics::from_confusion(&confusion);
    Ok(EvalReport {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        confusion,
        loss_trace: model.loss_trace.clone(),
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub with: EvalReport,
    pub without: EvalReport,
    /// `with - without`.
    pub delta_f1: f64,
    pub delta_recall: f64,
}

/// Trains and evaluates the same configuration with and without the prior
/// effect.
pub fn ablate_prior_effect(
    train: &[FusedSample],
    test: &[FusedSample],
    config: &TrainConfig,
) -> Result<Ablation> {
    let arm = |prior_effect| -> Result<EvalReport> {
        let cfg = TrainConfig {
            prior_effect,
            ..config.clone()
        };
        evaluate(&train_model(train, &cfg)?, test)
    };
    let with = arm(true)?;
    let without = arm(false)?;
    Ok(Ablation {
        delta_f1: with.f1 - without.f1,
        delta_recall: with.recall - without.recall,
        with,
        without,
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `epoch,mean_loss` rows, epochs from 1.
pub fn loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", e + 1));
    }
    out
}

pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    write(path, loss_csv(trace))
}

pub fn write_metrics_json(path: &Path, report: &EvalReport) -> Result<()> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| Error::file(path, e.to_string()))?;
    write(path, json + "\n")
}

pub fn read_metrics_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, format!("metrics: {e}")))
}

pub fn predictions_csv(report: &EvalReport) -> String {
    let mut out = String::from("date,probability,label,target\n");
    for p in &report.predictions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.date, p.probability, p.label, p.target
        ));
    }
    out
}

pub fn write_predictions_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write(path, predictions_csv(report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::models::ModelKind;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0], &[1]).unwrap() < 1e-6);
        assert!((bce_loss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(&[0.5, 0.5], &[1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(bce_loss(&[0.5], &[1, 0]), Err(Error::Contract(_))));
        assert!(bce_loss(&[0.0], &[1]).unwrap().is_finite());
    }

    #[test]
    fn bce_tape_matches_values() {
        let (p, y) = ([0.2, 0.7, 0.999, 0.01], [0u8, 1, 1, 0]);
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::matrix(4, 1, p.to_vec()).unwrap());
        let l = bce_loss_var(&mut tape, pv, &y).unwrap();
        assert!((tape.value(l).unwrap().item().unwrap() - bce_loss(&p, &y).unwrap()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bce_is_nonnegative(pairs in prop::collection::vec((0.0f64..=1.0, 0u8..=1), 1..40)) {
            let (p, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            prop_assert!(bce_loss(&p, &y).unwrap() >= 0.0);
        }

        #[test]
        fn metrics_match_recount(pairs in prop::collection::vec((0u8..=1, 0u8..=1), 1..80)) {
            let (l, t): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let c = Confusion::count(&l, &t);
            prop_assert_eq!(c.total(), l.len());
            let m = Metrics::from_confusion(&c);
            let correct = l.iter().zip(&t).filter(|(a, b)| a == b).count();
            prop_assert_eq!(m.accuracy, (c.tp + c.tn) as f64 / (c.tp + c.fp + c.tn + c.fn_) as f64);
            prop_assert!((m.accuracy - correct as f64 / l.len() as f64).abs() < 1e-15);
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metric_examples() {
        let m = Metrics::from_confusion(&Confusion {
            tp: 3,
            fp: 1,
            tn: 0,
            fn_: 3,
        });
        assert_eq!((m.precision, m.recall), (0.75, 0.5));
        assert!((m.f1 - 0.6).abs() < 1e-15);
        let labels = [1, 1, 0, 0, 1, 0, 1, 0];
        let targets = [1, 1, 0, 0, 1, 0, 0, 1];
        assert_eq!(
            Metrics::from_confusion(&Confusion::count(&labels, &targets)).accuracy,
            0.75
        );
        let none = Metrics::from_confusion(&Confusion {
            tp: 0,
            fp: 0,
            tn: 5,
            fn_: 0,
        });
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    fn tiny_samples(count: usize) -> Vec<FusedSample> {
        (0..count)
            .map(|k| {
                let labels: Vec<u8> = (0..3).map(|i| ((k + i) % 3 == 0) as u8).collect();
                FusedSample {
                    date: NaiveDate::from_ymd_opt(2023, 1, 1).unwrap()
                        + chrono::Days::new(k as u64),
                    prior: PriorEffectVector::from_labels(&labels),
                    price_window: (0..3).map(|i| ((k + i) % 5) as f64 / 4.0).collect(),
                    text: vec![(0..4).map(|i| ((k * i) as f64 * 0.3).sin()).collect()],
                    target: labels[2],
                }
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            window: 4,
            feature_len: 4,
            model: ModelSpec {
                hidden: 4,
                ..ModelSpec::new(ModelKind::Lstm)
            },
            fusion: FusionConfig {
                embed_width: 4,
                kernel: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let data = tiny_samples(10);
        let a = train_model(&data, &tiny_config()).unwrap();
        let b = train_model(&data, &tiny_config()).unwrap();
        assert_eq!(a.loss_trace.len(), 3);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
        assert_eq!(evaluate(&a, &data).unwrap(), evaluate(&b, &data).unwrap());
    }

    #[test]
    fn config_contracts() {
        let data = tiny_samples(4);
        for bad in [
            TrainConfig {
                epochs: 0,
                ..tiny_config()
            },
            TrainConfig {
                batch_size: 0,
                ..tiny_config()
            },
            TrainConfig {
                lr: 0.0,
                ..tiny_config()
            },
            TrainConfig {
                window: 6,
                ..tiny_config()
            },
        ] {
            assert!(matches!(train_model(&data, &bad), Err(Error::Config(_))));
        }
        assert!(matches!(
            train_model(
                &data,
                &TrainConfig {
                    feature_len: 5,
                    ..tiny_config()
                }
            ),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            train_model(&[], &tiny_config()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_samples(6);
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 50,
            ..tiny_config()
        };
        match train_model(&data, &cfg) {
            Err(Error::Divergence { epoch, batch, .. }) => assert!(epoch >= 1 && batch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ablation_arms_differ_only_in_prior() {
        let data = tiny_samples(12);
        let (train, test) = data.split_at(8);
        let ab = ablate_prior_effect(train, test, &tiny_config()).unwrap();
        assert_eq!(ab.delta_f1, ab.with.f1 - ab.without.f1);
        let with = evaluate(&train_model(train, &tiny_config()).unwrap(), test).unwrap();
        assert_eq!(ab.with, with);
        let zeroed = with_prior_effect(train, false);
        assert!(zeroed
            .iter()
            .all(|s| s.prior.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn report_serializes_all_fields() {
        let data = tiny_samples(6);
        let m = train_model(&data, &tiny_config()).unwrap();
        let r = evaluate(&m, &data).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for k in [
            "accuracy",
            "precision",
            "recall",
            "f1",
            "tp",
            "fp",
            "tn",
            "fn",
            "loss_trace",
            "predictions",
        ] {
            assert!(json.get(k).is_some(), "missing {k}");
        }
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
        assert!(predictions_csv(&r).starts_with("date,probability,label,target\n"));
        assert_eq!(loss_csv(&[0.5, 0.25]), "epoch,mean_loss\n1,0.5\n2,0.25\n");
    }
}
