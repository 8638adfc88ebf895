use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Initializer, ParameterStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final representation at the START position.
    Start,
    /// Mean over all token positions.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 2,
            d_ff: 64,
            max_len: 64,
            mask_rate: 0.15,
            pooling: Pooling::Start,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.heads,
            self.layers,
            self.d_ff,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::config(format!(
                "encoder dimensions must be at least 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!(
                "d_model must be even for positional encoding, got {}",
                self.d_model
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Sinusoidal table: `sin` on even columns, `cos` on odd columns.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::config("positional encoding needs max_len >= 1"));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for col in 0..d_model {
            let i = (col / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            data.push(if col % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            });
        }
    }
    Tensor::matrix(max_len, d_model, data)
}

/// Scaled dot-product attention. Returns the output and the weight matrix.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qd, kd, vd) = (
        tape.value(q)?.dims(),
        tape.value(k)?.dims(),
        tape.value(v)?.dims(),
    );
    if qd.1 != kd.1 {
        return Err(Error::shape(format!(
            "attention: query width {} differs from key width {}",
            qd.1, kd.1
        )));
    }
    if kd.0 != vd.0 {
        return Err(Error::shape(format!(
            "attention: {} keys but {} values",
            kd.0, vd.0
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (qd.1 as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    Ok((tape.matmul(weights, v)?, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionParams {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: bound.var(&format!("{prefix}.W_q"))?,
            w_k: bound.var(&format!("{prefix}.W_k"))?,
            w_v: bound.var(&format!("{prefix}.W_v"))?,
            w_o: bound.var(&format!("{prefix}.W_o"))?,
        })
    }
}

/// Per-head projections of `x` to width `d_model / heads`, attention in each
/// head, concatenation, and the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let d_model = tape.value(x)?.cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::config(format!(
            "width {d_model} is not divisible by {heads} heads"
        )));
    }
    let d_k = d_model / heads;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        outs.push(self_attention(tape, qh, kh, vh)?.0);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(cat, p.w_o)
}

/// Row-wise layer normalization followed by the learned affine map.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.normalize_rows(x, LAYER_NORM_EPS)?;
    let scaled = tape.mul(n, gamma)?;
    tape.add(scaled, beta)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `max(0, x W1 + b1) W2 + b2`.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.w2)?;
    tape.add(o, p.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub ln1: (Var, Var),
    pub ffn: FeedForwardParams,
    pub ln2: (Var, Var),
}

impl LayerParams {
    pub fn from_bound(bound: &BoundParams, layer: usize) -> Result<Self> {
        let p = |s: &str| bound.var(&format!("enc.l{layer}.{s}"));
        Ok(Self {
            attention: AttentionParams::from_bound(bound, &format!("enc.l{layer}.attn"))?,
            ln1: (p("ln1.gamma")?, p("ln1.beta")?),
            ffn: FeedForwardParams {
                w1: p("ffn.W1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.W2")?,
                b2: p("ffn.b2")?,
            },
            ln2: (p("ln2.gamma")?, p("ln2.beta")?),
        })
    }
}

/// Post-norm encoder block: `LN(x + MHA(x))`, then `LN(y + FFN(y))`.
pub fn encoder_layer(tape: &mut Tape, x: Var, p: &LayerParams, heads: usize) -> Result<Var> {
    let attn = multi_head_attention(tape, x, &p.attention, heads)?;
    let res = tape.add(x, attn)?;
    let y = layer_norm(tape, res, p.ln1.0, p.ln1.1)?;
    let ff = feed_forward(tape, y, &p.ffn)?;
    let res = tape.add(y, ff)?;
    layer_norm(tape, res, p.ln2.0, p.ln2.1)
}

/// Fresh encoder parameters for `vocab_size` tokens, including the MLM
/// output head.
pub fn init_encoder_params(
    config: &EncoderConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<ParameterStore> {
    config.validate()?;
    let init = Initializer::new(seed);
    let (d, ff) = (config.d_model, config.d_ff);
    let mut store = ParameterStore::new();
    init.insert_weight(&mut store, "enc.tok_emb", vocab_size, d);
    for l in 0..config.layers {
        for w in ["W_q", "W_k", "W_v", "W_o"] {
            init.insert_weight(&mut store, &format!("enc.l{l}.attn.{w}"), d, d);
        }
        for ln in ["ln1", "ln2"] {
            store.insert(format!("enc.l{l}.{ln}.gamma"), Tensor::filled(1, d, 1.0));
            init.insert_zeros(&mut store, &format!("enc.l{l}.{ln}.beta"), 1, d);
        }
        init.insert_weight(&mut store, &format!("enc.l{l}.ffn.W1"), d, ff);
        init.insert_zeros(&mut store, &format!("enc.l{l}.ffn.b1"), 1, ff);
        init.insert_weight(&mut store, &format!("enc.l{l}.ffn.W2"), ff, d);
        init.insert_zeros(&mut store, &format!("enc.l{l}.ffn.b2"), 1, d);
    }
    init.insert_weight(&mut store, "mlm.W", d, vocab_size);
    init.insert_zeros(&mut store, "mlm.b", 1, vocab_size);
    Ok(store)
}

pub struct EncodedVars {
    /// `n × d_model` per-token representations.
    pub tokens: Var,
    /// `1 × d_model` sentence vector.
    pub pooled: Var,
}

/// Embeds `ids`, adds positional encodings, and runs every encoder layer.
pub fn encode_text(
    tape: &mut Tape,
    ids: &[usize],
    config: &EncoderConfig,
    bound: &BoundParams,
) -> Result<EncodedVars> {
    if ids.is_empty() {
        return Err(Error::contract("cannot encode an empty token sequence"));
    }
    if ids.len() > config.max_len {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    let emb = bound.var("enc.tok_emb")?;
    let vocab = tape.value(emb)?.rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::contract(format!(
            "token id {bad} outside a vocabulary of {vocab}"
        )));
    }
    let pe_all = positional_encoding(ids.len(), config.d_model)?;
    let pe = tape.leaf(pe_all);
    let x = tape.gather_rows(emb, ids.to_vec())?;
    let mut h = tape.add(x, pe)?;
    for l in 0..config.layers {
        let p = LayerParams::from_bound(bound, l)?;
        h = encoder_layer(tape, h, &p, config.heads)?;
    }
    let pooled = match config.pooling {
        Pooling::Start => tape.slice_rows(h, 0, 1)?,
        Pooling::Mean => tape.col_means(h)?,
    };
    Ok(EncodedVars { tokens: h, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::vocab::START;

    fn brute_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn close(a: &Tensor, b: &[Vec<f64>], tol: f64) -> bool {
        a.data()
            .iter()
            .zip(b.concat())
            .all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 8).unwrap();
        for c in 0..8 {
            assert_eq!(pe.at(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(1, 0) - 0.84147).abs() < 1e-5);
        assert_eq!(pe.at(1, 0), 1f64.sin());
        assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
    }

    #[test]
    fn attention_single_row_returns_v() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::row(vec![0.3, -2.0]).unwrap());
        let v = t.leaf(Tensor::row(vec![5.0, 7.0]).unwrap());
        let (out, _) = self_attention(&mut t, q, q, v).unwrap();
        assert_eq!(t.value(out).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = Tape::new();
        let q =
            t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]]).unwrap());
        let k =
            t.leaf(Tensor::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap());
        let v =
            t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, -3.0]]).unwrap());
        let (out, _) = self_attention(&mut t, q, k, v).unwrap();
        let out = t.value(out).unwrap();
        for r in 0..3 {
            assert!((out.at(r, 0) - 3.0).abs() < 1e-12 && out.at(r, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_evaluation() {
        let q = vec![vec![0.5, -1.0], vec![1.5, 0.25]];
        let k = vec![vec![1.0, 0.3], vec![-0.7, 2.0]];
        let v = vec![vec![2.0, -1.0], vec![0.5, 4.0]];
        let mut t = Tape::new();
        let (qv, kv, vv) = (
            t.leaf(Tensor::from_rows(&q).unwrap()),
            t.leaf(Tensor::from_rows(&k).unwrap()),
            t.leaf(Tensor::from_rows(&v).unwrap()),
        );
        let (out, w) = self_attention(&mut t, qv, kv, vv).unwrap();
        assert!(close(
            t.value(out).unwrap(),
            &brute_attention(&q, &k, &v),
            1e-12
        ));
        let w = t.value(w).unwrap();
        for r in 0..2 {
            assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_width_mismatch() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::zeros(2, 3));
        let k = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            self_attention(&mut t, q, k, k),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_head_with_identity_projections_is_plain_attention() {
        let x = vec![vec![0.1, 0.9, -0.4], vec![1.2, -0.3, 0.8]];
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::from_rows(&x).unwrap());
        let id: Vec<Var> = (0..4).map(|_| t.leaf(Tensor::identity(3))).collect();
        let p = AttentionParams {
            w_q: id[0],
            w_k: id[1],
            w_v: id[2],
            w_o: id[3],
        };
        let mha = multi_head_attention(&mut t, xv, &p, 1).unwrap();
        let (plain, _) = self_attention(&mut t, xv, xv, xv).unwrap();
        assert_eq!(t.value(mha).unwrap(), t.value(plain).unwrap());
    }

    #[test]
    fn two_heads_match_head_by_head_oracle() {
        let init = Initializer::new(11);
        let x = init.weight("x", 3, 4);
        let ws: Vec<Tensor> = ["q", "k", "v", "o"]
            .iter()
            .map(|n| init.weight(n, 4, 4))
            .collect();
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let vars: Vec<Var> = ws.iter().map(|w| t.leaf(w.clone())).collect();
        let p = AttentionParams {
            w_q: vars[0],
            w_k: vars[1],
            w_v: vars[2],
            w_o: vars[3],
        };
        let out = multi_head_attention(&mut t, xv, &p, 2).unwrap();
        assert_eq!(t.value(out).unwrap().dims(), (3, 4));

        // oracle: triple loops only
        let rows = |m: &Tensor| {
            (0..m.rows())
                .map(|r| m.row_slice(r).to_vec())
                .collect::<Vec<_>>()
        };
        let mm = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .map(|ar| {
                    (0..b[0].len())
                        .map(|j| ar.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                        .collect()
                })
                .collect()
        };
        let xr = rows(&x);
        let (q, k, v) = (
            mm(&xr, &rows(&ws[0])),
            mm(&xr, &rows(&ws[1])),
            mm(&xr, &rows(&ws[2])),
        );
        let cols =
            |m: &[Vec<f64>], s: usize| m.iter().map(|r| r[s..s + 2].to_vec()).collect::<Vec<_>>();
        let h0 = brute_attention(&cols(&q, 0), &cols(&k, 0), &cols(&v, 0));
        let h1 = brute_attention(&cols(&q, 2), &cols(&k, 2), &cols(&v, 2));
        let cat: Vec<Vec<f64>> = h0
            .iter()
            .zip(&h1)
            .map(|(a, b)| [a.as_slice(), b.as_slice()].concat())
            .collect();
        let expected = mm(&cat, &rows(&ws[3]));
        assert!(close(t.value(out).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 3));
        let id = t.leaf(Tensor::identity(3));
        let p = AttentionParams {
            w_q: id,
            w_k: id,
            w_v: id,
            w_o: id,
        };
        assert!(matches!(
            multi_head_attention(&mut t, x, &p, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![4.0; 3], vec![1.0, 3.0, 2.0]]).unwrap());
        let n = t.normalize_rows(x, LAYER_NORM_EPS).unwrap();
        let n = t.value(n).unwrap();
        assert!(n.row_slice(0).iter().all(|&v| v == 0.0));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 3.0]).unwrap());
        let g = t.leaf(Tensor::filled(1, 2, 1.0));
        let b = t.leaf(Tensor::zeros(1, 2));
        let y = layer_norm(&mut t, x, g, b).unwrap();
        let y = t.value(y).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.3, -1.2, 2.5, 0.0, 0.7]).unwrap());
        let n = t.normalize_rows(x, LAYER_NORM_EPS).unwrap();
        let v = t.value(n).unwrap().data().to_vec();
        let mean = v.iter().sum::<f64>() / 5.0;
        let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ffn_with_zero_weights_returns_bias() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap());
        let p = FeedForwardParams {
            w1: t.leaf(Tensor::zeros(2, 5)),
            b1: t.leaf(Tensor::row(vec![1.0, -1.0, 2.0, 0.0, 3.0]).unwrap()),
            w2: t.leaf(Tensor::zeros(5, 2)),
            b2: t.leaf(Tensor::row(vec![0.25, -0.5]).unwrap()),
        };
        let y = feed_forward(&mut t, x, &p).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[0.25, -0.5, 0.25, -0.5]);
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            max_len: 12,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn pooled_vector_shape_and_determinism() {
        let cfg = small_config();
        let store = init_encoder_params(&cfg, 10, 5).unwrap();
        let run = |ids: &[usize]| {
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let e = encode_text(&mut t, ids, &cfg, &b).unwrap();
            t.value(e.pooled).unwrap().clone()
        };
        let a = run(&[START, 4, 5, 6]);
        assert_eq!(a.len(), 8);
        assert_eq!(a, run(&[START, 4, 5, 6]));
        let swapped = run(&[START, 5, 4, 6]);
        let diff = a
            .data()
            .iter()
            .zip(swapped.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "max diff {diff}");
    }

    #[test]
    fn overlong_input_rejected() {
        let cfg = small_config();
        let store = init_encoder_params(&cfg, 10, 5).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        assert!(matches!(
            encode_text(&mut t, &[START; 13], &cfg, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig {
            heads: 3,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            mask_rate: 1.0,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            layers: 0,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(small_config().validate().is_ok());
    }
}
