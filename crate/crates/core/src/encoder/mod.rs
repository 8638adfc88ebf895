//! Transformer text encoder trained from scratch with correction-style
//! masked language modelling, and the fixed-length text features it emits.

mod features;
mod masking;
mod pretrain;
mod transformer;
mod vocab;

pub use features::{
    parse_feature_csv, parse_feature_str, standardize_features, FeatureTable, TextFeature,
};
pub use masking::{mac_mask, mask_count, MaskedTokens, KEEP_PROB, SPAN_PROBS};
pub use pretrain::{
    masked_sentence_loss, mlm_loss, mlm_loss_var, pretrain_mlm, Encoder, Pretrained, PROB_FLOOR,
};
pub use transformer::{
    encode_text, encoder_layer, feed_forward, init_encoder_params, layer_norm,
    multi_head_attention, positional_encoding, self_attention, AttentionParams, EncodedVars,
    EncoderConfig, FeedForwardParams, LayerParams, Pooling, LAYER_NORM_EPS,
};
pub use vocab::{
    load_similar_words, segment, tokenize, TokenSequence, Vocabulary, MASK, PAD, START, UNK,
};
