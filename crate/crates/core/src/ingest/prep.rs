use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::market::{MarketRecord, MarketSeries};
use crate::encoder::FeatureTable;
use crate::error::{Error, Result};
use crate::fusion::FusedSample;

/// Market records with their up/down labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub records: Vec<MarketRecord>,
    pub labels: Vec<u8>,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Labels of the preceding `n - 1` days, each 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEffectVector(Vec<f64>);

impl PriorEffectVector {
    pub fn from_labels(labels: &[u8]) -> Self {
        Self(labels.iter().map(|&l| f64::from(l)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Label 1 iff the day's change is strictly positive; flat days are 0.
pub fn to_binary_labels(series: &MarketSeries) -> LabeledSeries {
    let records = series.records().to_vec();
    let labels = records.iter().map(|r| u8::from(r.chg > 0.0)).collect();
    LabeledSeries { records, labels }
}

pub fn minmax_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::Degenerate(format!(
            "min-max needs at least 2 values, got {}",
            v.len()
        )));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min || max.is_nan() {
        return Err(Error::Degenerate("min-max of a constant sequence".into()));
    }
    let range = max - min;
    Ok(v.iter().map(|x| (x - min) / range).collect())
}

/// Standard score with the population standard deviation.
pub fn zscore_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::Degenerate(format!(
            "z-score needs at least 2 values, got {}",
            v.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 0.0 || var.is_nan() {
        return Err(Error::Degenerate(
            "z-score of a zero-variance sequence".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Slides a window of length `n` over the series.
///
/// Sample `i` covers days `i..i + n`: the first `n - 1` days provide the
/// prior-effect labels and min-max normalized closes, day `i + n - 1` is the
/// target. Text features are looked up by target date in every table, with
/// a zero vector for dates a table does not cover.
pub fn make_windows(
    series: &LabeledSeries,
    n: usize,
    features: &[FeatureTable],
) -> Result<Vec<FusedSample>> {
    if n < 2 {
        return Err(Error::contract(format!(
            "window length must be at least 2, got {n}"
        )));
    }
    if series.len() < n {
        return Err(Error::contract(format!(
            "series of length {} is shorter than window {n}",
            series.len()
        )));
    }
    let closes: Vec<f64> = series.records.iter().map(|r| r.close).collect();
    let prices = match minmax_normalize(&closes) {
        Ok(p) => p,
        Err(_) => {
            log::warn!("close prices are constant; price windows are all zero");
            vec![0.0; closes.len()]
        }
    };
    let mut missing = vec![0usize; features.len()];
    let samples = (0..=series.len() - n)
        .map(|i| {
            let target_day = i + n - 1;
            let date = series.records[target_day].date;
            let text = features
                .iter()
                .zip(missing.iter_mut())
                .map(|(table, miss)| match table.get(date) {
                    Some(v) => v.to_vec(),
                    None => {
                        *miss += 1;
                        vec![0.0; table.width()]
                    }
                })
                .collect();
            FusedSample {
                date,
                prior: PriorEffectVector::from_labels(&series.labels[i..target_day]),
                price_window: prices[i..target_day].to_vec(),
                text,
                target: series.labels[target_day],
            }
        })
        .collect::<Vec<_>>();
    for (k, m) in missing.iter().enumerate().filter(|(_, &m)| m > 0) {
        log::info!(
            "feature table {k}: {m} of {} target dates have no features; using zeros",
            samples.len()
        );
    }
    Ok(samples)
}

/// Chronological split with `floor(ratio * T)` samples in the training part.
pub fn split_train_test<T: Clone>(samples: &[T], ratio: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::contract(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    let train = ((ratio * samples.len() as f64) + 1e-9).floor() as usize;
    if train == 0 || train == samples.len() {
        return Err(Error::contract(format!(
            "split of {} samples at ratio {ratio} leaves one side empty",
            samples.len()
        )));
    }
    Ok((samples[..train].to_vec(), samples[train..].to_vec()))
}

/// Dates of a sample list, used to check chronological splits.
pub fn sample_dates(samples: &[FusedSample]) -> Vec<NaiveDate> {
    samples.iter().map(|s| s.date).collect()
}
