//! Recurrent cells, the feedforward baseline and the output head.
//!
//! Every function works on batches: each `Var` holds one row per sample.

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Initializer, ParameterStore, Tape, Tensor, Var};

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn gate(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = linear(tape, x, w, b)?;
    tape.sigmoid(y)
}

fn candidate(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = linear(tape, x, w, b)?;
    tape.tanh(y)
}

/// `2 * sigmoid(x W) ∘ target`.
fn modulate(tape: &mut Tape, by: Var, w: Var, target: Var) -> Result<Var> {
    let s = tape.matmul(by, w)?;
    let s = tape.sigmoid(s)?;
    let s = tape.scale(s, 2.0)?;
    tape.mul(s, target)
}

fn check_rows(tape: &Tape, vars: &[Var]) -> Result<()> {
    let rows = tape.value(vars[0])?.rows();
    for &v in &vars[1..] {
        let r = tape.value(v)?.rows();
        if r != rows {
            return Err(Error::shape(format!("batch rows disagree: {rows} vs {r}")));
        }
    }
    Ok(())
}

fn check_width(tape: &Tape, v: Var, width: usize, what: &str) -> Result<()> {
    let c = tape.value(v)?.cols();
    if c != width {
        return Err(Error::shape(format!(
            "{what} has width {c}, expected {width}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_i: Var,
    pub b_i: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl LstmParams {
    /// Gate matrices are `(H + input) × H`, acting on `[h_prev, x_t]`.
    pub fn init(
        store: &mut ParameterStore,
        init: &Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        for g in ["i", "f", "C", "o"] {
            init.insert_weight(store, &format!("{prefix}.W_{g}"), hidden + input, hidden);
            init.insert_zeros(store, &format!("{prefix}.b_{g}"), 1, hidden);
        }
    }

    pub fn from_bound(b: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        Ok(Self {
            w_i: v("W_i")?,
            b_i: v("b_i")?,
            w_f: v("W_f")?,
            b_f: v("b_f")?,
            w_c: v("W_C")?,
            b_c: v("b_C")?,
            w_o: v("W_o")?,
            b_o: v("b_o")?,
        })
    }
}

/// One LSTM step. Returns `(h_t, C_t)`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    check_rows(tape, &[x, h, c])?;
    let hidden = tape.value(p.b_i)?.cols();
    check_width(tape, h, hidden, "h_prev")?;
    check_width(tape, c, hidden, "C_prev")?;
    let hx = tape.concat_cols(&[h, x])?;
    let i = gate(tape, hx, p.w_i, p.b_i)?;
    let f = gate(tape, hx, p.w_f, p.b_f)?;
    let o = gate(tape, hx, p.w_o, p.b_o)?;
    let cand = candidate(tape, hx, p.w_c, p.b_c)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_t = tape.add(keep, write)?;
    let squashed = tape.tanh(c_t)?;
    let h_t = tape.mul(o, squashed)?;
    Ok((h_t, c_t))
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn init(
        store: &mut ParameterStore,
        init: &Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        for g in ["z", "r", "h"] {
            init.insert_weight(store, &format!("{prefix}.W_{g}"), hidden + input, hidden);
            init.insert_zeros(store, &format!("{prefix}.b_{g}"), 1, hidden);
        }
    }

    pub fn from_bound(b: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        Ok(Self {
            w_z: v("W_z")?,
            b_z: v("b_z")?,
            w_r: v("W_r")?,
            b_r: v("b_r")?,
            w_h: v("W_h")?,
            b_h: v("b_h")?,
        })
    }
}

/// `h_t = (1 - z) ∘ h_prev + z ∘ tanh([r ∘ h_prev, x] W_h + b_h)`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    check_rows(tape, &[x, h])?;
    check_width(tape, h, tape.value(p.b_z)?.cols(), "h_prev")?;
    let hx = tape.concat_cols(&[h, x])?;
    let z = gate(tape, hx, p.w_z, p.b_z)?;
    let r = gate(tape, hx, p.w_r, p.b_r)?;
    let rh = tape.mul(r, h)?;
    let rhx = tape.concat_cols(&[rh, x])?;
    let cand = candidate(tape, rhx, p.w_h, p.b_h)?;
    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
    let keep = tape.mul(one_minus_z, h)?;
    let write = tape.mul(z, cand)?;
    tape.add(keep, write)
}

/// Final hidden states of a forward and a backward LSTM pass, concatenated.
pub fn bilstm_forward(
    tape: &mut Tape,
    xs: &[Var],
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::contract("bilstm needs at least one step"));
    }
    let rows = tape.value(xs[0])?.rows();
    let run =
        |tape: &mut Tape, p: &LstmParams, order: &mut dyn Iterator<Item = &Var>| -> Result<Var> {
            let hidden = tape.value(p.b_i)?.cols();
            let mut h = tape.leaf(Tensor::zeros(rows, hidden));
            let mut c = tape.leaf(Tensor::zeros(rows, hidden));
            for &x in order {
                (h, c) = lstm_cell(tape, x, h, c, p)?;
            }
            Ok(h)
        };
    let hf = run(tape, fwd, &mut xs.iter())?;
    let hb = run(tape, bwd, &mut xs.iter().rev())?;
    tape.concat_cols(&[hf, hb])
}

#[derive(Clone, Copy, Debug)]
pub struct MogrifierParams {
    pub lstm: LstmParams,
    /// `H × input`: modulates `x` from `h`.
    pub q: Var,
    /// `input × H`: modulates `h` from `x`.
    pub r: Var,
}

impl MogrifierParams {
    pub fn init(
        store: &mut ParameterStore,
        init: &Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        LstmParams::init(store, init, prefix, input, hidden);
        init.insert_weight(store, &format!("{prefix}.Q"), hidden, input);
        init.insert_weight(store, &format!("{prefix}.R"), input, hidden);
    }

    pub fn from_bound(b: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            lstm: LstmParams::from_bound(b, prefix)?,
            q: b.var(&format!("{prefix}.Q"))?,
            r: b.var(&format!("{prefix}.R"))?,
        })
    }
}

/// `rounds` alternating modulations (odd rounds rescale `x`, even rounds
/// rescale `h`), then an ordinary LSTM step.
pub fn mogrifier_lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    p: &MogrifierParams,
    rounds: usize,
) -> Result<(Var, Var)> {
    let (mut x, mut h) = (x, h);
    for k in 1..=rounds {
        if k % 2 == 1 {
            x = modulate(tape, h, p.q, x)?;
        } else {
            h = modulate(tape, x, p.r, h)?;
        }
    }
    lstm_cell(tape, x, h, c, &p.lstm)
}

#[derive(Clone, Copy, Debug)]
pub struct StLstmParams {
    pub lstm: LstmParams,
    pub w_mi: Var,
    pub b_mi: Var,
    pub w_mf: Var,
    pub b_mf: Var,
    pub w_mg: Var,
    pub b_mg: Var,
    /// `(H + M) × H`, mixing `[C_t, M_t]` before the output gate.
    pub w_mix: Var,
}

impl StLstmParams {
    pub fn init(
        store: &mut ParameterStore,
        init: &Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
        memory: usize,
    ) {
        LstmParams::init(store, init, prefix, input, hidden);
        for g in ["i", "f", "g"] {
            init.insert_weight(store, &format!("{prefix}.M.W_{g}"), input + memory, memory);
            init.insert_zeros(store, &format!("{prefix}.M.b_{g}"), 1, memory);
        }
        init.insert_weight(store, &format!("{prefix}.W_mix"), hidden + memory, hidden);
    }

    pub fn from_bound(b: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        Ok(Self {
            lstm: LstmParams::from_bound(b, prefix)?,
            w_mi: v("M.W_i")?,
            b_mi: v("M.b_i")?,
            w_mf: v("M.W_f")?,
            b_mf: v("M.b_f")?,
            w_mg: v("M.W_g")?,
            b_mg: v("M.b_g")?,
            w_mix: v("W_mix")?,
        })
    }
}

/// Dual-memory step. Returns `(h_t, C_t, M_t)`.
pub fn stlstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    m: Var,
    p: &StLstmParams,
) -> Result<(Var, Var, Var)> {
    check_rows(tape, &[x, h, c, m])?;
    let lp = &p.lstm;
    let hidden = tape.value(lp.b_i)?.cols();
    check_width(tape, h, hidden, "h_prev")?;
    check_width(tape, c, hidden, "C_prev")?;
    check_width(tape, m, tape.value(p.b_mi)?.cols(), "M_prev")?;
    let hx = tape.concat_cols(&[h, x])?;
    let i = gate(tape, hx, lp.w_i, lp.b_i)?;
    let f = gate(tape, hx, lp.w_f, lp.b_f)?;
    let o = gate(tape, hx, lp.w_o, lp.b_o)?;
    let cand = candidate(tape, hx, lp.w_c, lp.b_c)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_t = tape.add(keep, write)?;

    let xm = tape.concat_cols(&[x, m])?;
    let mi = gate(tape, xm, p.w_mi, p.b_mi)?;
    let mf = gate(tape, xm, p.w_mf, p.b_mf)?;
    let mg = candidate(tape, xm, p.w_mg, p.b_mg)?;
    let keep = tape.mul(mf, m)?;
    let write = tape.mul(mi, mg)?;
    let m_t = tape.add(keep, write)?;

    let cm = tape.concat_cols(&[c_t, m_t])?;
    let mixed = tape.matmul(cm, p.w_mix)?;
    let mixed = tape.tanh(mixed)?;
    let h_t = tape.mul(o, mixed)?;
    Ok((h_t, c_t, m_t))
}

#[derive(Clone, Copy, Debug)]
pub struct SwinParams {
    pub lstm: LstmParams,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl SwinParams {
    /// Tokens have width `input`, so the attention matrices are square.
    pub fn init(
        store: &mut ParameterStore,
        init: &Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        LstmParams::init(store, init, prefix, input, hidden);
        for w in ["W_q", "W_k", "W_v", "W_o"] {
            init.insert_weight(store, &format!("{prefix}.swin.{w}"), input, input);
        }
    }

    pub fn from_bound(b: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.swin.{n}"));
        Ok(Self {
            lstm: LstmParams::from_bound(b, prefix)?,
            w_q: v("W_q")?,
            w_k: v("W_k")?,
            w_v: v("W_v")?,
            w_o: v("W_o")?,
        })
    }
}

/// Windowed self-attention over the tokens of `x` with a residual
/// connection, mean-pooled over the real tokens.
///
/// Token `j` of a `d`-wide input is `x_j e_j`. Tokens are grouped into
/// consecutive windows of `window` (at most `d`); the last window is padded
/// with zero tokens, which take part in attention but not in pooling.
pub fn swin_block(
    tape: &mut Tape,
    x: Var,
    p: &SwinParams,
    window: usize,
    heads: usize,
) -> Result<Var> {
    if window == 0 {
        return Err(Error::config("swin window must be at least 1"));
    }
    let (rows, d) = tape.value(x)?.dims();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide token width {d}"
        )));
    }
    check_width(tape, p.w_q, d, "swin W_q")?;
    let window = window.min(d);
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let padded = d.div_ceil(window) * window;
    let mut tokens = Vec::with_capacity(padded);
    for j in 0..padded {
        if j < d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let e = tape.leaf(Tensor::row(e)?);
            tokens.push(tape.mul(x, e)?);
        } else {
            tokens.push(tape.leaf(Tensor::zeros(rows, d)));
        }
    }
    let project = |tape: &mut Tape, w: Var| {
        tokens
            .iter()
            .map(|&t| tape.matmul(t, w))
            .collect::<Result<Vec<_>>>()
    };
    let q = project(tape, p.w_q)?;
    let k = project(tape, p.w_k)?;
    let v = project(tape, p.w_v)?;

    let mut pooled: Option<Var> = None;
    for start in (0..padded).step_by(window) {
        let win = start..start + window;
        for j in win.clone().filter(|&j| j < d) {
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qj = tape.slice_cols(q[j], hd * dk, dk)?;
                let mut scores = Vec::with_capacity(window);
                let mut values = Vec::with_capacity(window);
                for kk in win.clone() {
                    let kh = tape.slice_cols(k[kk], hd * dk, dk)?;
                    let prod = tape.mul(qj, kh)?;
                    let s = tape.row_sums(prod)?;
                    scores.push(tape.scale(s, scale)?);
                    values.push(tape.slice_cols(v[kk], hd * dk, dk)?);
                }
                let scores = tape.concat_cols(&scores)?;
                let alpha = tape.softmax_rows(scores)?;
                let mut out: Option<Var> = None;
                for (n, &val) in values.iter().enumerate() {
                    let a = tape.slice_cols(alpha, n, 1)?;
                    let term = tape.mul(a, val)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                head_outs.push(out.expect("window is non-empty"));
            }
            let heads_cat = tape.concat_cols(&head_outs)?;
            let projected = tape.matmul(heads_cat, p.w_o)?;
            let y = tape.add(tokens[j], projected)?;
            pooled = Some(match pooled {
                None => y,
                Some(acc) => tape.add(acc, y)?,
            });
        }
    }
    tape.scale(pooled.expect("at least one token"), 1.0 / d as f64)
}

/// Attention block on the step input, then an LSTM step on the pooled vector.
pub fn swinlstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    p: &SwinParams,
    window: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let pooled = swin_block(tape, x, p, window, heads)?;
    lstm_cell(tape, pooled, h, c, &p.lstm)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl FeedForwardParams {
    pub fn init(store: &mut ParameterStore, init: &Initializer, input: usize, hidden: usize) {
        init.insert_weight(store, "ff.W1", input, hidden);
        init.insert_zeros(store, "ff.b1", 1, hidden);
        init.insert_weight(store, "ff.W2", hidden, hidden);
        init.insert_zeros(store, "ff.b2", 1, hidden);
        init.insert_weight(store, "ff.W3", hidden, 1);
        init.insert_zeros(store, "ff.b3", 1, 1);
    }

    pub fn from_bound(b: &BoundParams) -> Result<Self> {
        Ok(Self {
            w1: b.var("ff.W1")?,
            b1: b.var("ff.b1")?,
            w2: b.var("ff.W2")?,
            b2: b.var("ff.b2")?,
            w3: b.var("ff.W3")?,
            b3: b.var("ff.b3")?,
        })
    }
}

/// Affine, ReLU, affine, ReLU, affine: one logit per row.
pub fn feedforward_net(tape: &mut Tape, input: Var, p: &FeedForwardParams) -> Result<Var> {
    check_width(tape, input, tape.value(p.w1)?.rows(), "feedforward input")?;
    let a = linear(tape, input, p.w1, p.b1)?;
    let a = tape.relu(a)?;
    let a = linear(tape, a, p.w2, p.b2)?;
    let a = tape.relu(a)?;
    linear(tape, a, p.w3, p.b3)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w_f: Var,
    pub b_f: Var,
}

impl HeadParams {
    pub fn init(store: &mut ParameterStore, init: &Initializer, input: usize) {
        init.insert_weight(store, "head.W_f", input, 1);
        init.insert_zeros(store, "head.b_f", 1, 1);
    }

    pub fn from_bound(b: &BoundParams) -> Result<Self> {
        Ok(Self {
            w_f: b.var("head.W_f")?,
            b_f: b.var("head.b_f")?,
        })
    }
}

/// `P = sigmoid(Z W_f + b_f)`, one probability per row.
pub fn output_head(tape: &mut Tape, z: Var, p: &HeadParams) -> Result<Var> {
    check_width(tape, z, tape.value(p.w_f)?.rows(), "head input")?;
    let y = linear(tape, z, p.w_f, p.b_f)?;
    tape.sigmoid(y)
}

/// Class decision; ties go to 1.
pub fn label(probability: f64) -> u8 {
    u8::from(probability >= 0.5)
}
