use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::error::{Error, Result};

const JOIN_SEPARATOR: &str = "\n";

/// Summary text attached to a date.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRecord {
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Summaries {
    /// One record per date, ascending.
    pub records: Vec<SummaryRecord>,
    /// Lines skipped because their text was blank.
    pub skipped_empty: usize,
}

#[derive(Deserialize)]
struct Line {
    date: String,
    text: String,
}

pub fn load_summaries(path: &Path) -> Result<Summaries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_summaries(&text)
}

/// Parses JSON lines with `date` and `text` fields.
///
/// Repeated dates are merged by joining their texts in file order.
pub fn parse_summaries(text: &str) -> Result<Summaries> {
    let mut by_date: BTreeMap<NaiveDate, String> = BTreeMap::new();
    let mut skipped_empty = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(parsed.date.trim(), "%Y-%m-%d").map_err(|_| {
            Error::Parse {
                line,
                message: format!("cannot parse date {:?} as YYYY-MM-DD", parsed.date),
            }
        })?;
        let body = parsed.text.trim();
        if body.is_empty() {
            log::warn!("summary line {line} ({date}) has empty text; skipped");
            skipped_empty += 1;
            continue;
        }
        by_date
            .entry(date)
            .and_modify(|t| {
                t.push_str(JOIN_SEPARATOR);
                t.push_str(body);
            })
            .or_insert_with(|| body.to_string());
    }
    let records = by_date
        .into_iter()
        .map(|(date, text)| SummaryRecord { date, text })
        .collect();
    Ok(Summaries {
        records,
        skipped_empty,
    })
}

/// A source of summaries. Implementations must be deterministic for a
/// fixed input.
pub trait SummaryProvider {
    fn summarize(&self, text: &str) -> Result<String>;
}

/// Keeps the first `sentences` sentences of the input.
#[derive(Clone, Copy, Debug)]
pub struct ExtractiveSummary {
    pub sentences: usize,
}

impl Default for ExtractiveSummary {
    fn default() -> Self {
        Self { sentences: 3 }
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '；')
}

impl SummaryProvider for ExtractiveSummary {
    fn summarize(&self, text: &str) -> Result<String> {
        let mut seen = 0;
        let mut chars = text.char_indices().peekable();
        while let Some((_, c)) = chars.next() {
            if !is_terminator(c) {
                continue;
            }
            // runs like "?!" or "..." end one sentence
            while chars.peek().is_some_and(|&(_, n)| is_terminator(n)) {
                chars.next();
            }
            let end = chars.peek().map_or(text.len(), |&(j, _)| j);
            let boundary = chars
                .peek()
                .is_none_or(|&(_, n)| n.is_whitespace() || !c.is_ascii());
            if boundary {
                seen += 1;
                if seen == self.sentences {
                    return Ok(text[..end].trim().to_string());
                }
            }
        }
        Ok(text.trim().to_string())
    }
}

pub fn summarize(text: &str, provider: &dyn SummaryProvider) -> Result<String> {
    if text.trim().is_empty() {
        return Err(Error::contract("cannot summarize empty text"));
    }
    provider.summarize(text)
}

/// Like [`summarize`], but falls back to the raw text if the provider fails.
pub fn summarize_or_raw(text: &str, provider: &dyn SummaryProvider) -> Result<String> {
    match summarize(text, provider) {
        Err(Error::Provider(cause)) => {
            log::warn!("summary provider failed ({cause}); using raw text");
            Ok(text.trim().to_string())
        }
        other => other,
    }
}
