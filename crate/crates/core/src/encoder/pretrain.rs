use std::path::Path;

use serde::{Deserialize, Serialize};

use super::masking::mac_mask;
use super::transformer::{encode_text, init_encoder_params, EncoderConfig};
use super::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParameterStore, Tape, Tensor, Var};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-Σ ln p(t_i)` over the masked positions.
pub fn mlm_loss(distributions: &[Vec<f64>], positions: &[usize], targets: &[usize]) -> Result<f64> {
    if distributions.len() != positions.len() || positions.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} distributions, {} positions, {} targets",
            distributions.len(),
            positions.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    for (dist, &t) in distributions.iter().zip(targets) {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        let p = *dist
            .get(t)
            .ok_or_else(|| Error::contract(format!("target {t} outside distribution")))?;
        loss -= p.max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

/// Differentiable form of [`mlm_loss`] over the MLM head logits.
pub fn mlm_loss_var(
    tape: &mut Tape,
    logits: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<Var> {
    if positions.len() != targets.len() || positions.is_empty() {
        return Err(Error::contract(format!(
            "{} positions but {} targets",
            positions.len(),
            targets.len()
        )));
    }
    let picked = tape.gather_rows(logits, positions.to_vec())?;
    let probs = tape.softmax_rows(picked)?;
    let cells = targets.iter().enumerate().map(|(r, &t)| (r, t)).collect();
    let p = tape.gather(probs, cells)?;
    let p = tape.clamp(p, PROB_FLOOR, f64::INFINITY)?;
    let logp = tape.ln(p)?;
    let total = tape.sum(logp)?;
    tape.scale(total, -1.0)
}

/// Loss of one masked sentence, recorded on `tape`.
pub fn masked_sentence_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &EncoderConfig,
    corrupted: &[usize],
    positions: &[usize],
    targets: &[usize],
) -> Result<(Var, crate::numerics::BoundParams)> {
    let bound = store.bind(tape);
    let enc = encode_text(tape, corrupted, config, &bound)?;
    let logits = tape.matmul(enc.tokens, bound.var("mlm.W")?)?;
    let logits = tape.add(logits, bound.var("mlm.b")?)?;
    Ok((mlm_loss_var(tape, logits, positions, targets)?, bound))
}

fn mask_seed(seed: u64, epoch: usize, sentence: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (sentence as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParameterStore,
    /// Mean per-sentence MLM loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains the encoder and MLM head from scratch with one Adam step per
/// sentence, re-masking every sentence each epoch.
pub fn pretrain_mlm(
    corpus: &[String],
    vocab: &Vocabulary,
    config: &EncoderConfig,
    epochs: usize,
    seed: u64,
    adam: AdamConfig,
) -> Result<Pretrained> {
    if corpus.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    let mut params = init_encoder_params(config, vocab.len(), seed)?;
    let sequences: Vec<_> = corpus
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| tokenize(s, vocab, config.max_len))
        .collect::<Result<_>>()?;
    if sequences.is_empty() {
        return Err(Error::contract(
            "pretraining corpus has no non-empty sentences",
        ));
    }
    let mut state = AdamState::new(adam)?;
    let mut loss_trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (i, seq) in sequences.iter().enumerate() {
            let m = mac_mask(seq, vocab, config.mask_rate, mask_seed(seed, epoch, i));
            if m.positions.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let (loss, bound) = masked_sentence_loss(
                &mut tape,
                &params,
                config,
                &m.tokens,
                &m.positions,
                &m.targets,
            )?;
            let value = tape.value(loss)?.item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: i,
                    loss: value,
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            adam_step(&mut params, &bound.gradients(&grads, &tape)?, &mut state)?;
        }
        loss_trace.push(total / sequences.len() as f64);
    }
    Ok(Pretrained { params, loss_trace })
}

const ENCODER_FORMAT: &str = "mof-encoder";

/// A trained encoder with its vocabulary, saved as one JSON document.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    format: String,
    version: u32,
    config: EncoderConfig,
    tokens: Vec<String>,
    similar: std::collections::BTreeMap<String, Vec<String>>,
    params: serde_json::Value,
}

impl Encoder {
    /// Per-token representations (`n × d_model`) and the pooled vector.
    pub fn encode(&self, text: &str) -> Result<(Tensor, Vec<f64>)> {
        let seq = tokenize(text, &self.vocab, self.config.max_len)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc = encode_text(&mut tape, &seq.ids, &self.config, &bound)?;
        Ok((
            tape.value(enc.tokens)?.clone(),
            tape.value(enc.pooled)?.data().to_vec(),
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        let params: serde_json::Value = serde_json::from_str(&self.params.to_json()?)
            .map_err(|e| Error::contract(e.to_string()))?;
        let file = EncoderFile {
            format: ENCODER_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            tokens: self.vocab.regular_tokens().to_vec(),
            similar: self.vocab.similar_words(),
            params,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EncoderFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != ENCODER_FORMAT || file.version != 1 {
            return Err(Error::Schema(format!(
                "unsupported encoder file {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let mut vocab = Vocabulary::new(&file.tokens);
        vocab.set_similar_words(&file.similar);
        let params = ParameterStore::from_json(&file.params.to_string())?;
        let emb = params.get("enc.tok_emb")?;
        if emb.rows() != vocab.len() {
            return Err(Error::Schema(format!(
                "embedding has {} rows but the vocabulary has {} tokens",
                emb.rows(),
                vocab.len()
            )));
        }
        Ok(Self {
            config: file.config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::file(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlm_loss_examples() {
        assert_eq!(
            mlm_loss(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 2], &[1, 0]).unwrap(),
            0.0
        );
        let one = mlm_loss(&[vec![0.25; 4]], &[1], &[2]).unwrap();
        assert!((one - 4f64.ln()).abs() < 1e-12);
        assert!((one - 1.3863).abs() < 1e-4);
        let v = 7;
        let n = 5;
        let uniform = vec![vec![1.0 / v as f64; v]; n];
        let loss = mlm_loss(&uniform, &[1, 2, 3, 4, 5], &[0, 1, 2, 3, 6]).unwrap();
        assert!((loss - n as f64 * (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn mlm_loss_contract_errors() {
        assert!(matches!(
            mlm_loss(&[vec![1.0]], &[1, 2], &[0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            mlm_loss(&[vec![0.5, 0.6]], &[1], &[0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_probability_is_floored() {
        let loss = mlm_loss(&[vec![1.0, 0.0]], &[1], &[1]).unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_agrees_with_value_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap(),
        );
        let loss = mlm_loss_var(&mut tape, logits, &[1, 2], &[0, 2]).unwrap();
        let dists: Vec<Vec<f64>> = [1, 2]
            .iter()
            .map(|&r| {
                crate::numerics::softmax(
                    &Tensor::row(tape.value(logits).unwrap().row_slice(r).to_vec()).unwrap(),
                )
                .unwrap()
                .into_data()
            })
            .collect();
        let expected = mlm_loss(&dists, &[1, 2], &[0, 2]).unwrap();
        assert!((tape.value(loss).unwrap().item().unwrap() - expected).abs() < 1e-12);
    }

    fn toy_corpus() -> Vec<String> {
        let subjects = [
            "the bank",
            "the central bank",
            "the market",
            "investors",
            "the index",
        ];
        let verbs = [
            "cuts rates",
            "adds liquidity",
            "rises",
            "falls",
            "holds steady",
        ];
        (0..20)
            .map(|i| format!("{} {} today .", subjects[i % 5], verbs[(i * 3 + i / 5) % 5]))
            .collect()
    }

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            d_ff: 32,
            max_len: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let corpus = toy_corpus();
        let vocab = Vocabulary::from_corpus(&corpus);
        let cfg = toy_config();
        let out = pretrain_mlm(&corpus, &vocab, &cfg, 0, 3, AdamConfig::default()).unwrap();
        assert!(out.loss_trace.is_empty());
        assert_eq!(
            out.params,
            init_encoder_params(&cfg, vocab.len(), 3).unwrap()
        );
    }

    #[test]
    fn empty_corpus_rejected() {
        let vocab = Vocabulary::new(["a"]);
        assert!(matches!(
            pretrain_mlm(&[], &vocab, &toy_config(), 1, 0, AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let corpus = toy_corpus();
        let vocab = Vocabulary::from_corpus(&corpus);
        let a = pretrain_mlm(&corpus, &vocab, &toy_config(), 3, 9, AdamConfig::default()).unwrap();
        let b = pretrain_mlm(&corpus, &vocab, &toy_config(), 3, 9, AdamConfig::default()).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn encoder_file_round_trips() {
        let corpus = toy_corpus();
        let mut vocab = Vocabulary::from_corpus(&corpus);
        vocab.set_similar_words(
            &[("rises".to_string(), vec!["falls".to_string()])]
                .into_iter()
                .collect(),
        );
        let cfg = toy_config();
        let enc = Encoder {
            params: init_encoder_params(&cfg, vocab.len(), 1).unwrap(),
            vocab,
            config: cfg,
        };
        let back = Encoder::from_json(&enc.to_json().unwrap()).unwrap();
        assert_eq!(back.params, enc.params);
        assert_eq!(back.vocab, enc.vocab);
        assert_eq!(
            back.encode("the market rises").unwrap(),
            enc.encode("the market rises").unwrap()
        );
    }
}
