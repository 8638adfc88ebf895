//! Shared test support: a central-difference gradient oracle and synthetic
//! market fixtures.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use mof_core::encoder::FeatureTable;
use mof_core::fusion::FusedSample;
use mof_core::ingest::{MarketRecord, MarketSeries, PriorEffectVector};
use mof_core::numerics::{BoundParams, ParameterStore, Tape, Tensor, Var};
use mof_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that two gradients that are
/// both ~0 compare as equal instead of dividing noise by noise.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
    }
}

fn entries(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        sample(rng, len, limit).into_vec()
    }
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences, on up to `limit` entries per input.
pub fn check_inputs(
    inputs: &[Tensor],
    limit: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> GradReport {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v, &tape).unwrap();
        for idx in entries(inputs[k].len(), limit, &mut rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            report.max_rel = report.max_rel.max(rel_error(analytic.data()[idx], numeric));
            report.checked += 1;
        }
    }
    report
}

/// Same check over every tensor of a parameter store.
pub fn check_params(
    store: &ParameterStore,
    limit: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &BoundParams) -> Result<Var>,
) -> GradReport {
    let eval = |s: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let out = f(&mut tape, &bound).unwrap();
        tape.value(out).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound).unwrap();
    let analytic = bound
        .gradients(&tape.backward(out).unwrap(), &tape)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (name, t) in store.iter() {
        for idx in entries(t.len(), limit, &mut rng) {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            report.max_rel = report
                .max_rel
                .max(rel_error(analytic[name].data()[idx], numeric));
            report.checked += 1;
        }
    }
    report
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Entries with magnitude in `[0.1, 1.5]` and random sign, so kinks at zero
/// stay far from the finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(0.1..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap()
}

pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 5).unwrap()
}

/// Daily series whose up/down labels follow a two-state Markov chain that
/// keeps its state with probability `stay`. Closes follow the signed
/// changes; one noise feature table of width `l` accompanies it.
pub fn markov_series(seed: u64, days: usize, stay: f64, l: usize) -> (MarketSeries, FeatureTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut up = rng.gen_bool(0.5);
    let mut close = 3000.0;
    let mut records = Vec::with_capacity(days);
    let mut table = FeatureTable::new(l);
    for d in 0..days {
        if d > 0 && !rng.gen_bool(stay) {
            up = !up;
        }
        let magnitude: f64 = rng.gen_range(0.1..1.5);
        let chg = if up { magnitude } else { -magnitude };
        let open = close;
        close *= 1.0 + chg / 100.0;
        let date = start_date() + Days::new(d as u64);
        records.push(MarketRecord {
            date,
            chg,
            open,
            close,
            volume: rng.gen_range(1e6..5e6_f64).round(),
        });
        table
            .insert(date, (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    }
    (MarketSeries::new(records).unwrap(), table)
}

/// Writes `market.csv` and `features.csv` for a Markov series into `dir`.
pub fn write_fixture(dir: &Path, seed: u64, days: usize, l: usize) -> (PathBuf, PathBuf) {
    let (series, table) = markov_series(seed, days, 0.8, l);
    let market = dir.join("market.csv");
    let features = dir.join("features.csv");
    std::fs::write(&market, series.to_csv_string()).unwrap();
    table.save(&features).unwrap();
    (market, features)
}

/// 64 windows whose target is the most recent prior label, with a price
/// window that moves with the labels and a noise text feature.
pub fn learnability_set(feature_len: usize) -> Vec<FusedSample> {
    (0..64u32)
        .map(|k| {
            let bits: Vec<u8> = (0..5).map(|i| ((k >> i) & 1) as u8).collect();
            let mut close = 0.5;
            let window = bits
                .iter()
                .map(|&b| {
                    close += if b == 1 { 0.08 } else { -0.08 };
                    close
                })
                .collect();
            FusedSample {
                date: start_date() + Days::new(k as u64),
                prior: PriorEffectVector::from_labels(&bits),
                price_window: window,
                text: vec![(0..feature_len)
                    .map(|i| ((k * 7 + i as u32 * 3) as f64).sin() * 0.5)
                    .collect()],
                target: bits[4],
            }
        })
        .collect()
}
