//! The feature stack between raw inputs and the recurrent core: text
//! embedding, 1-D convolution, attention over text streams, and the
//! learnable convex fusion gate.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PriorEffectVector;
use crate::numerics::{BoundParams, Initializer, ParameterStore, Tape, Var};

/// One training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample {
    /// Date of the target day.
    pub date: NaiveDate,
    pub prior: PriorEffectVector,
    /// Min-max normalized closes of the `n - 1` history days.
    pub price_window: Vec<f64>,
    /// One feature vector per text stream, each of length `L`.
    pub text: Vec<Vec<f64>>,
    pub target: u8,
}

impl FusedSample {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .prior
            .values()
            .iter()
            .chain(&self.price_window)
            .chain(self.text.iter().flatten());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sample {} has non-finite inputs",
                self.date
            )));
        }
        if self.target > 1 {
            return Err(Error::contract(format!(
                "sample {} has target {}",
                self.date, self.target
            )));
        }
        if self.prior.len() != self.price_window.len() {
            return Err(Error::shape(format!(
                "sample {}: prior has {} days, price window {}",
                self.date,
                self.prior.len(),
                self.price_window.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Width of the embedded text vector `E`.
    pub embed_width: usize,
    /// Convolution kernel length.
    pub kernel: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            embed_width: 16,
            kernel: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_width == 0 || self.kernel == 0 || self.kernel > self.embed_width {
            return Err(Error::config(format!(
                "fusion needs 1 <= kernel ({}) <= embed_width ({})",
                self.kernel, self.embed_width
            )));
        }
        Ok(())
    }

    pub fn conv_width(&self) -> usize {
        self.embed_width - self.kernel + 1
    }

    /// Adds the embedding and convolution parameters for text of width
    /// `feature_len`.
    pub fn init_text(&self, store: &mut ParameterStore, init: &Initializer, feature_len: usize) {
        init.insert_weight(store, "fusion.W_e", feature_len, self.embed_width);
        init.insert_zeros(store, "fusion.b_e", 1, self.embed_width);
        init.insert_weight(store, "fusion.W_c", 1, self.kernel);
        init.insert_zeros(store, "fusion.b_c", 1, 1);
    }

    /// Adds the projection and gate parameters for a recurrent output of
    /// width `out_width`.
    pub fn init_gate(&self, store: &mut ParameterStore, init: &Initializer, out_width: usize) {
        init.insert_weight(store, "fusion.W_p", self.conv_width(), out_width);
        init.insert_zeros(store, "fusion.b_p", 1, out_width);
        init.insert_zeros(store, "fusion.gamma_raw", 1, 1);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub w_e: Var,
    pub b_e: Var,
    pub w_c: Var,
    pub b_c: Var,
    /// Absent for the feedforward baseline, which consumes `C` directly.
    pub gate: Option<GateParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_p: Var,
    pub b_p: Var,
    /// `gamma = sigmoid(gamma_raw)`.
    pub gamma_raw: Var,
}

impl FusionParams {
    pub fn from_bound(b: &BoundParams, with_gate: bool) -> Result<Self> {
        let gate = if with_gate {
            Some(GateParams {
                w_p: b.var("fusion.W_p")?,
                b_p: b.var("fusion.b_p")?,
                gamma_raw: b.var("fusion.gamma_raw")?,
            })
        } else {
            None
        };
        Ok(Self {
            w_e: b.var("fusion.W_e")?,
            b_e: b.var("fusion.b_e")?,
            w_c: b.var("fusion.W_c")?,
            b_c: b.var("fusion.b_c")?,
            gate,
        })
    }

    /// `C` for one text stream, `B × conv_width`.
    pub fn text_stream(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let e = embed(tape, features, self.w_e, self.b_e)?;
        conv_text(tape, e, self.w_c, self.b_c)
    }
}

/// `E = F W_e + b_e`, one row per sample.
pub fn embed(tape: &mut Tape, features: Var, w_e: Var, b_e: Var) -> Result<Var> {
    let (fw, ew) = (tape.value(features)?.cols(), tape.value(w_e)?.rows());
    if fw != ew {
        return Err(Error::shape(format!(
            "embedding expects features of width {ew}, got {fw}"
        )));
    }
    let e = tape.matmul(features, w_e)?;
    tape.add(e, b_e)
}

/// `C = ReLU(W_c ⋆ E + b_c)`: valid cross-correlation, stride 1.
pub fn conv_text(tape: &mut Tape, embedded: Var, w_c: Var, b_c: Var) -> Result<Var> {
    let c = tape.conv1d(embedded, w_c)?;
    let c = tape.add(c, b_c)?;
    tape.relu(c)
}

/// Dot-product attention of `h` over candidate vectors, row by row.
///
/// Returns the `B × m` weights and the `B × d` context.
pub fn attention_over_features(tape: &mut Tape, h: Var, candidates: &[Var]) -> Result<(Var, Var)> {
    let Some(&first) = candidates.first() else {
        return Err(Error::contract("attention needs at least one candidate"));
    };
    let hd = tape.value(h)?.dims();
    for &c in candidates {
        let cd = tape.value(c)?.dims();
        if cd.1 != hd.1 {
            return Err(Error::shape(format!(
                "attention: state width {} but candidate width {}",
                hd.1, cd.1
            )));
        }
    }
    if candidates.len() == 1 {
        let rows = tape.value(h)?.rows().max(tape.value(first)?.rows());
        let ones = tape.leaf(crate::numerics::Tensor::filled(rows, 1, 1.0));
        let ctx = tape.mul(ones, first)?;
        return Ok((ones, ctx));
    }
    let scores = candidates
        .iter()
        .map(|&c| {
            let prod = tape.mul(h, c)?;
            tape.row_sums(prod)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = tape.concat_cols(&scores)?;
    let alpha = tape.softmax_rows(scores)?;
    let mut ctx = None;
    for (j, &c) in candidates.iter().enumerate() {
        let a = tape.slice_cols(alpha, j, 1)?;
        let term = tape.mul(a, c)?;
        ctx = Some(match ctx {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((alpha, ctx.expect("non-empty")))
}

/// `Z = gamma * O + (1 - gamma) * C` with `gamma = sigmoid(gamma_raw)`.
///
/// `projection` maps `C` to the width of `O` and is required when they
/// differ.
pub fn fuse(
    tape: &mut Tape,
    o: Var,
    c: Var,
    gamma_raw: Var,
    projection: Option<(Var, Var)>,
) -> Result<Var> {
    if !tape.value(o)?.is_finite() || !tape.value(c)?.is_finite() {
        return Err(Error::Numeric("fusion inputs are not finite".into()));
    }
    let c = match projection {
        Some((w, b)) => {
            let p = tape.matmul(c, w)?;
            tape.add(p, b)?
        }
        None => c,
    };
    let (ow, cw) = (tape.value(o)?.cols(), tape.value(c)?.cols());
    if ow != cw {
        return Err(Error::shape(format!(
            "fusion of widths {ow} and {cw} needs a projection"
        )));
    }
    let gamma = tape.sigmoid(gamma_raw)?;
    let one_minus = tape.affine(gamma, -1.0, 1.0)?;
    let a = tape.mul(gamma, o)?;
    let b = tape.mul(one_minus, c)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn row(t: &mut Tape, v: &[f64]) -> Var {
        t.leaf(Tensor::row(v.to_vec()).unwrap())
    }

    #[test]
    fn embed_examples() {
        let mut t = Tape::new();
        let f = row(&mut t, &[1.0, -2.0, 3.0]);
        let id = t.leaf(Tensor::identity(3));
        let zero_b = row(&mut t, &[0.0; 3]);
        let e = embed(&mut t, f, id, zero_b).unwrap();
        assert_eq!(t.value(e).unwrap().data(), &[1.0, -2.0, 3.0]);

        let zf = row(&mut t, &[0.0; 3]);
        let w = t.leaf(Initializer::new(1).weight("w", 3, 5));
        let b = row(&mut t, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let e = embed(&mut t, zf, w, b).unwrap();
        assert_eq!(t.value(e).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let fv = [0.5, -1.5, 2.0];
        let f = row(&mut t, &fv);
        let e = embed(&mut t, f, w, b).unwrap();
        let wt = t.value(w).unwrap().clone();
        for j in 0..5 {
            let oracle: f64 = (0..3).map(|i| fv[i] * wt.at(i, j)).sum::<f64>() + (j + 1) as f64;
            assert!((t.value(e).unwrap().data()[j] - oracle).abs() < 1e-12);
        }
        let bad = row(&mut t, &[1.0, 2.0]);
        assert!(matches!(embed(&mut t, bad, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let e = row(&mut t, &[-1.0, 2.0, 0.5]);
        let k = row(&mut t, &[1.0]);
        let b0 = t.scalar(0.0);
        let c = conv_text(&mut t, e, k, b0).unwrap();
        assert_eq!(t.value(c).unwrap().data(), &[0.0, 2.0, 0.5]);

        let e = row(&mut t, &[2.0, 4.0]);
        let k = row(&mut t, &[0.5, 0.5]);
        let c = conv_text(&mut t, e, k, b0).unwrap();
        assert_eq!(t.value(c).unwrap().data(), &[3.0]);

        let e = row(&mut t, &[2.0, -4.0, 7.0]);
        let k = row(&mut t, &[0.0, 0.0]);
        let bneg = t.scalar(-1.0);
        let c = conv_text(&mut t, e, k, bneg).unwrap();
        assert_eq!(t.value(c).unwrap().data(), &[0.0, 0.0]);

        let long = row(&mut t, &[1.0; 4]);
        assert!(matches!(
            conv_text(&mut t, e, long, b0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_length_law() {
        let mut t = Tape::new();
        for len in 1..10 {
            for k in 1..=len {
                let e = row(&mut t, &vec![1.0; len]);
                let w = row(&mut t, &vec![1.0; k]);
                let b = t.scalar(0.0);
                let c = conv_text(&mut t, e, w, b).unwrap();
                assert_eq!(t.value(c).unwrap().cols(), len - k + 1);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let mut t = Tape::new();
        let h = row(&mut t, &[0.3, -0.2]);
        let f1 = row(&mut t, &[1.0, 2.0]);
        let (a, ctx) = attention_over_features(&mut t, h, &[f1]).unwrap();
        assert_eq!(t.value(a).unwrap().data(), &[1.0]);
        assert_eq!(t.value(ctx).unwrap().data(), &[1.0, 2.0]);

        let zero = row(&mut t, &[0.0, 0.0]);
        let f2 = row(&mut t, &[5.0, -1.0]);
        let f3 = row(&mut t, &[0.0, 3.0]);
        let (a, _) = attention_over_features(&mut t, zero, &[f1, f2, f3]).unwrap();
        assert!(t
            .value(a)
            .unwrap()
            .data()
            .iter()
            .all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));

        let (hv, f1v, f2v) = ([0.3, -0.2], [1.0, 2.0], [5.0, -1.0]);
        let (a, ctx) = attention_over_features(&mut t, h, &[f1, f2]).unwrap();
        let s1: f64 = hv.iter().zip(f1v).map(|(a, b)| a * b).sum();
        let s2: f64 = hv.iter().zip(f2v).map(|(a, b)| a * b).sum();
        let (e1, e2) = (s1.exp(), s2.exp());
        let (w1, w2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let a = t.value(a).unwrap().data().to_vec();
        assert!((a[0] - w1).abs() < 1e-12 && (a[1] - w2).abs() < 1e-12);
        let ctx = t.value(ctx).unwrap().data().to_vec();
        for d in 0..2 {
            assert!((ctx[d] - (w1 * f1v[d] + w2 * f2v[d])).abs() < 1e-12);
        }

        let wide = row(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            attention_over_features(&mut t, h, &[wide]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fuse_examples() {
        let mut t = Tape::new();
        let o = row(&mut t, &[2.0, -1.0]);
        let c = row(&mut t, &[4.0, 3.0]);
        let big = t.scalar(40.0);
        let z = fuse(&mut t, o, c, big, None).unwrap();
        assert!(t
            .value(z)
            .unwrap()
            .data()
            .iter()
            .zip([2.0, -1.0])
            .all(|(a, b)| (a - b).abs() < 1e-6));
        let small = t.scalar(-40.0);
        let z = fuse(&mut t, o, c, small, None).unwrap();
        assert!(t
            .value(z)
            .unwrap()
            .data()
            .iter()
            .zip([4.0, 3.0])
            .all(|(a, b)| (a - b).abs() < 1e-6));

        let o1 = row(&mut t, &[2.0]);
        let c1 = row(&mut t, &[4.0]);
        let half = t.scalar(0.0);
        let id = t.leaf(Tensor::identity(1));
        let zb = t.scalar(0.0);
        let z = fuse(&mut t, o1, c1, half, Some((id, zb))).unwrap();
        assert_eq!(t.value(z).unwrap().data(), &[3.0]);

        let wide = row(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            fuse(&mut t, o, wide, half, None),
            Err(Error::Shape(_))
        ));
        let nan = row(&mut t, &[f64::NAN, 0.0]);
        assert!(matches!(
            fuse(&mut t, o, nan, half, None),
            Err(Error::Numeric(_))
        ));
    }
}
