//! Market data and summary ingestion, labelling, windowing, and splitting.

mod market;
mod prep;
mod summaries;

pub use market::{parse_market_csv, parse_market_str, MarketRecord, MarketSeries};
pub use prep::{
    make_windows, minmax_normalize, sample_dates, split_train_test, to_binary_labels,
    zscore_normalize, LabeledSeries, PriorEffectVector,
};
pub use summaries::{
    load_summaries, parse_summaries, summarize, summarize_or_raw, ExtractiveSummary, Summaries,
    SummaryProvider, SummaryRecord,
};
