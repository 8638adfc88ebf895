//! The predictor zoo and the end-to-end forward pass.

mod cells;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cells::{
    bilstm_forward, feedforward_net, gru_cell, label, lstm_cell, mogrifier_lstm_cell, output_head,
    stlstm_cell, swin_block, swinlstm_cell, FeedForwardParams, GruParams, HeadParams, LstmParams,
    MogrifierParams, StLstmParams, SwinParams,
};

use crate::error::{Error, Result};
use crate::fusion::{attention_over_features, fuse, FusedSample, FusionConfig, FusionParams};
use crate::numerics::{BoundParams, Initializer, ParameterStore, Tape, Tensor, Var};

/// Width of one recurrent step input: `[price_t, prior_t]`.
pub const STEP_WIDTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    FeedForward,
    Lstm,
    BiLstm,
    Gru,
    Mogrifier,
    StLstm,
    SwinLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::FeedForward,
        ModelKind::Lstm,
        ModelKind::BiLstm,
        ModelKind::Gru,
        ModelKind::Mogrifier,
        ModelKind::StLstm,
        ModelKind::SwinLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FeedForward => "feedforward",
            ModelKind::Lstm => "lstm",
            ModelKind::BiLstm => "bilstm",
            ModelKind::Gru => "gru",
            ModelKind::Mogrifier => "mogrifier",
            ModelKind::StLstm => "stlstm",
            ModelKind::SwinLstm => "swinlstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!(
                    "unknown model '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Mogrifier modulation rounds.
    pub rounds: usize,
    /// SwinLSTM attention window, in tokens.
    pub window: usize,
    pub heads: usize,
    /// ST-LSTM memory width; defaults to `hidden`.
    pub memory: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lstm,
            hidden: 32,
            rounds: 4,
            window: 2,
            heads: 1,
            memory: None,
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be at least 1"));
        }
        match self.kind {
            ModelKind::SwinLstm if self.window == 0 => {
                Err(Error::config("swin window must be at least 1"))
            }
            ModelKind::SwinLstm if self.heads == 0 || !STEP_WIDTH.is_multiple_of(self.heads) => {
                Err(Error::config(format!(
                    "{} heads do not divide the step width {STEP_WIDTH}",
                    self.heads
                )))
            }
            ModelKind::StLstm if self.memory == Some(0) => {
                Err(Error::config("memory width must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn memory_width(&self) -> usize {
        self.memory.unwrap_or(self.hidden)
    }

    /// Width of the recurrent output `O`.
    pub fn output_width(&self) -> usize {
        match self.kind {
            ModelKind::BiLstm => 2 * self.hidden,
            _ => self.hidden,
        }
    }
}

/// Sizes every sample fed to one predictor must share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    /// History days, `n - 1`.
    pub steps: usize,
    /// Number of text streams `m`.
    pub streams: usize,
    /// Text feature length `L`.
    pub feature_len: usize,
}

impl InputShape {
    pub fn of(samples: &[FusedSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("no samples"))?;
        let shape = Self {
            steps: first.price_window.len(),
            streams: first.text.len(),
            feature_len: first.text.first().map_or(0, Vec::len),
        };
        for s in samples {
            shape.check(s)?;
        }
        Ok(shape)
    }

    pub fn check(&self, s: &FusedSample) -> Result<()> {
        s.validate()?;
        if s.price_window.len() != self.steps || s.text.len() != self.streams {
            return Err(Error::shape(format!(
                "sample {} has {} steps and {} text streams, expected {} and {}",
                s.date,
                s.price_window.len(),
                s.text.len(),
                self.steps,
                self.streams
            )));
        }
        if let Some(f) = s.text.iter().find(|f| f.len() != self.feature_len) {
            return Err(Error::shape(format!(
                "sample {} has a text feature of length {}, expected {}",
                s.date,
                f.len(),
                self.feature_len
            )));
        }
        Ok(())
    }
}

/// A model spec bound to its input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub spec: ModelSpec,
    pub fusion: FusionConfig,
    pub shape: InputShape,
}

impl Predictor {
    pub fn new(spec: ModelSpec, fusion: FusionConfig, shape: InputShape) -> Result<Self> {
        spec.validate()?;
        fusion.validate()?;
        if shape.steps == 0 {
            return Err(Error::config("window must leave at least one history day"));
        }
        if shape.streams == 0 {
            return Err(Error::config("at least one text stream is required"));
        }
        if shape.feature_len < fusion.kernel {
            return Err(Error::config(format!(
                "feature length {} is shorter than the convolution kernel {}",
                shape.feature_len, fusion.kernel
            )));
        }
        Ok(Self {
            spec,
            fusion,
            shape,
        })
    }

    fn is_recurrent(&self) -> bool {
        self.spec.kind != ModelKind::FeedForward
    }

    /// Fresh parameters. Each tensor's values depend only on `seed` and its
    /// name.
    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let init = Initializer::new(seed);
        let (h, s) = (self.spec.hidden, &mut store);
        self.fusion.init_text(s, &init, self.shape.feature_len);
        match self.spec.kind {
            ModelKind::FeedForward => {
                let input = 2 * self.shape.steps + self.shape.streams * self.fusion.conv_width();
                FeedForwardParams::init(s, &init, input, h);
            }
            ModelKind::Lstm => LstmParams::init(s, &init, "cell", STEP_WIDTH, h),
            ModelKind::BiLstm => {
                LstmParams::init(s, &init, "cell.fwd", STEP_WIDTH, h);
                LstmParams::init(s, &init, "cell.bwd", STEP_WIDTH, h);
            }
            ModelKind::Gru => GruParams::init(s, &init, "cell", STEP_WIDTH, h),
            ModelKind::Mogrifier => MogrifierParams::init(s, &init, "cell", STEP_WIDTH, h),
            ModelKind::StLstm => {
                StLstmParams::init(s, &init, "cell", STEP_WIDTH, h, self.spec.memory_width())
            }
            ModelKind::SwinLstm => SwinParams::init(s, &init, "cell", STEP_WIDTH, h),
        }
        if self.is_recurrent() {
            self.fusion.init_gate(s, &init, self.spec.output_width());
            HeadParams::init(s, &init, self.spec.output_width());
        }
        store
    }

    /// Probabilities for `samples`, one row each.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        samples: &[FusedSample],
    ) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        for s in samples {
            self.shape.check(s)?;
        }
        let rows = samples.len();
        let fp = FusionParams::from_bound(bound, self.is_recurrent())?;
        let mut streams = Vec::with_capacity(self.shape.streams);
        for j in 0..self.shape.streams {
            let f = Tensor::matrix(
                rows,
                self.shape.feature_len,
                samples.iter().flat_map(|s| s.text[j].clone()).collect(),
            )?;
            let f = tape.leaf(f);
            streams.push(fp.text_stream(tape, f)?);
        }

        if !self.is_recurrent() {
            let steps = self.shape.steps;
            let prices = Tensor::matrix(
                rows,
                steps,
                samples
                    .iter()
                    .flat_map(|s| s.price_window.clone())
                    .collect(),
            )?;
            let prior = Tensor::matrix(
                rows,
                steps,
                samples
                    .iter()
                    .flat_map(|s| s.prior.values().to_vec())
                    .collect(),
            )?;
            let mut parts = vec![tape.leaf(prices), tape.leaf(prior)];
            parts.extend(&streams);
            let input = tape.concat_cols(&parts)?;
            let logit = feedforward_net(tape, input, &FeedForwardParams::from_bound(bound)?)?;
            return tape.sigmoid(logit);
        }

        let xs = (0..self.shape.steps)
            .map(|t| {
                let data = samples
                    .iter()
                    .flat_map(|s| [s.price_window[t], s.prior.values()[t]])
                    .collect();
                Ok(tape.leaf(Tensor::matrix(rows, STEP_WIDTH, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let o = self.recurrent_output(tape, bound, &xs)?;

        let gate = fp.gate.expect("recurrent models bind the gate");
        let projected = streams
            .iter()
            .map(|&c| {
                let p = tape.matmul(c, gate.w_p)?;
                tape.add(p, gate.b_p)
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, ctx) = attention_over_features(tape, o, &projected)?;
        let z = fuse(tape, o, ctx, gate.gamma_raw, None)?;
        output_head(tape, z, &HeadParams::from_bound(bound)?)
    }

    fn recurrent_output(&self, tape: &mut Tape, bound: &BoundParams, xs: &[Var]) -> Result<Var> {
        let rows = tape.value(xs[0])?.rows();
        let h = self.spec.hidden;
        let zeros = |tape: &mut Tape, w: usize| tape.leaf(Tensor::zeros(rows, w));
        let (mut hs, mut cs) = (zeros(tape, h), zeros(tape, h));
        match self.spec.kind {
            ModelKind::FeedForward => unreachable!("feedforward has no recurrent core"),
            ModelKind::Lstm => {
                let p = LstmParams::from_bound(bound, "cell")?;
                for &x in xs {
                    (hs, cs) = lstm_cell(tape, x, hs, cs, &p)?;
                }
            }
            ModelKind::BiLstm => {
                let f = LstmParams::from_bound(bound, "cell.fwd")?;
                let b = LstmParams::from_bound(bound, "cell.bwd")?;
                return bilstm_forward(tape, xs, &f, &b);
            }
            ModelKind::Gru => {
                let p = GruParams::from_bound(bound, "cell")?;
                for &x in xs {
                    hs = gru_cell(tape, x, hs, &p)?;
                }
            }
            ModelKind::Mogrifier => {
                let p = MogrifierParams::from_bound(bound, "cell")?;
                for &x in xs {
                    (hs, cs) = mogrifier_lstm_cell(tape, x, hs, cs, &p, self.spec.rounds)?;
                }
            }
            ModelKind::StLstm => {
                let p = StLstmParams::from_bound(bound, "cell")?;
                let mut ms = zeros(tape, self.spec.memory_width());
                for &x in xs {
                    (hs, cs, ms) = stlstm_cell(tape, x, hs, cs, ms, &p)?;
                }
            }
            ModelKind::SwinLstm => {
                let p = SwinParams::from_bound(bound, "cell")?;
                for &x in xs {
                    (hs, cs) =
                        swinlstm_cell(tape, x, hs, cs, &p, self.spec.window, self.spec.heads)?;
                }
            }
        }
        Ok(hs)
    }

    /// Probabilities for `samples` under frozen `params`.
    pub fn predict(&self, params: &ParameterStore, samples: &[FusedSample]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = self.forward(&mut tape, &bound, samples)?;
        Ok(tape.value(p)?.data().to_vec())
    }
}
