use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// A date-keyed text feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    pub date: NaiveDate,
    pub values: Vec<f64>,
}

/// Flattens the pooled vector (then, if given, the token mean) and pads
/// with zeros or truncates to `len`.
pub fn standardize_features(
    pooled: &[f64],
    token_mean: Option<&[f64]>,
    len: usize,
) -> Result<Vec<f64>> {
    if len < 1 {
        return Err(Error::config("feature length must be at least 1"));
    }
    if pooled.is_empty() {
        return Err(Error::contract("no representation to standardize"));
    }
    let mut out: Vec<f64> = pooled
        .iter()
        .chain(token_mean.unwrap_or(&[]))
        .copied()
        .take(len)
        .collect();
    out.resize(len, 0.0);
    Ok(out)
}

/// Feature vectors of one text stream, all of the same width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    width: usize,
    rows: BTreeMap<NaiveDate, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, date: NaiveDate, values: Vec<f64>) -> Result<()> {
        if values.len() != self.width {
            return Err(Error::Schema(format!(
                "feature row for {date} has length {}, expected L={}",
                values.len(),
                self.width
            )));
        }
        self.rows.insert(date, values);
        Ok(())
    }

    pub fn get(&self, date: NaiveDate) -> Option<&[f64]> {
        self.rows.get(&date).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = TextFeature> + '_ {
        self.rows.iter().map(|(&date, v)| TextFeature {
            date,
            values: v.clone(),
        })
    }

    /// `date,f0,...,f{L-1}` with shortest round-trip number formatting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("date");
        for i in 0..self.width {
            out.push_str(&format!(",f{i}"));
        }
        out.push('\n');
        for (date, row) in &self.rows {
            out.push_str(&date.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_feature_csv(path: &Path, expected_len: Option<usize>) -> Result<FeatureTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_str(&text, expected_len).map_err(|e| Error::file(path, e.to_string()))
}

/// Parses a feature CSV; `expected_len` checks the header width.
pub fn parse_feature_str(text: &str, expected_len: Option<usize>) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0).map(|h| h.eq_ignore_ascii_case("date")) != Some(true) {
        return Err(Error::Schema(
            "feature file must start with a date column".into(),
        ));
    }
    let width = headers.len() - 1;
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Schema(format!(
                "feature column {} is named {h:?}, expected \"f{i}\"",
                i + 1
            )));
        }
    }
    if let Some(expected) = expected_len {
        if expected != width {
            return Err(Error::Schema(format!(
                "feature file has L={width}, expected L={expected}"
            )));
        }
    }
    if width == 0 {
        return Err(Error::Schema("feature file has no feature columns".into()));
    }
    let mut table = FeatureTable::new(width);
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|_| Error::Parse {
            line,
            message: format!("cannot parse date {:?}", &row[0]),
        })?;
        let values = row
            .iter()
            .skip(1)
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Parse {
                    line,
                    message: format!("cannot parse feature value {v:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if table.get(date).is_some() {
            return Err(Error::DuplicateDate(date));
        }
        table.insert(date, values)?;
    }
    Ok(table)
}
