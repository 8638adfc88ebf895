use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REQUIRED: [&str; 5] = ["Date", "Chg", "Open", "Close", "Volume"];

/// One trading day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketRecord {
    pub date: NaiveDate,
    /// Percent change, sign only matters for labels.
    pub chg: f64,
    pub open: f64,
    pub close: f64,
    pub volume: f64,
}

/// Records in strictly increasing date order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarketSeries {
    records: Vec<MarketRecord>,
}

impl MarketSeries {
    /// Sorts by date and rejects duplicates.
    pub fn new(mut records: Vec<MarketRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.date);
        if let Some(w) = records.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(Error::DuplicateDate(w[0].date));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[MarketRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serializes with the canonical `Date,Chg,Open,Close,Volume` header.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("Date,Chg,Open,Close,Volume\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.date, r.chg, r.open, r.close, r.volume
            ));
        }
        out
    }
}

pub fn parse_market_csv(path: &Path) -> Result<MarketSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_market_reader(file)
}

pub fn parse_market_str(text: &str) -> Result<MarketSeries> {
    parse_market_reader(text.as_bytes())
}

fn parse_market_reader(reader: impl Read) -> Result<MarketSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Schema(format!("missing required column {name}")))?;
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize| row.get(idx[i]).unwrap_or("");
        let number = |i: usize, raw: &str| -> Result<f64> {
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {}: cannot parse {raw:?} as a number", REQUIRED[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {}: non-finite value", REQUIRED[i]),
                });
            }
            Ok(v)
        };
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|_| Error::Parse {
            line,
            message: format!("column Date: cannot parse {:?} as YYYY-MM-DD", field(0)),
        })?;
        let chg = number(1, field(1).trim_end_matches('%').trim_end())?;
        let volume = number(4, field(4))?;
        if volume < 0.0 {
            return Err(Error::Parse {
                line,
                message: "column Volume: negative volume".into(),
            });
        }
        records.push(MarketRecord {
            date,
            chg,
            open: number(2, field(2))?,
            close: number(3, field(3))?,
            volume,
        });
    }
    MarketSeries::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn well_formed_file_is_sorted() {
        let s = parse_market_str(
            "Date,Chg,Open,Close,Volume\n2024-01-03,0.5,10,10.1,100\n2024-01-01,-1,10,9.9,90\n2024-01-02,1.2%,9.9,10,95\n",
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        let dates: Vec<_> = s.records().iter().map(|r| r.date.to_string()).collect();
        assert_eq!(dates, ["2024-01-01", "2024-01-02", "2024-01-03"]);
        assert_eq!(s.records()[1].chg, 1.2);
    }

    #[test]
    fn extra_columns_and_case_are_tolerated() {
        let ok =
            parse_market_str("Extra,date,CHG,open,close,volume,High\nx,2024-02-01,0,1,1,5,3\n")
                .unwrap();
        assert_eq!(ok.records()[0].volume, 5.0);
        assert_eq!(ok.records()[0].chg, 0.0);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse_market_str("Date,Chg,Open,Close\n2024-01-01,1,1,1\n").unwrap_err();
        assert!(err.to_string().contains("Volume"), "{err}");
    }

    #[test]
    fn bad_values_report_line_numbers() {
        let err = parse_market_str(
            "Date,Chg,Open,Close,Volume\n2024-01-01,1,1,1,1\n2024-13-01,1,1,1,1\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err =
            parse_market_str("Date,Chg,Open,Close,Volume\n2024-01-01,abc,1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_dates_are_rejected() {
        let err = parse_market_str(
            "Date,Chg,Open,Close,Volume\n2024-01-01,1,1,1,1\n2024-01-01,2,1,1,1\n",
        )
        .unwrap_err();
        match err {
            Error::DuplicateDate(d) => assert_eq!(d.to_string(), "2024-01-01"),
            other => panic!("unexpected {other}"),
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_a_fixed_point(
            rows in proptest::collection::vec((-20.0f64..20.0, 1.0f64..5000.0, 1.0f64..5000.0, 0.0f64..1e9), 1..40)
        ) {
            let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
            let records = rows.iter().enumerate().map(|(i, &(chg, open, close, volume))| MarketRecord {
                date: start + chrono::Days::new(i as u64), chg, open, close, volume,
            }).collect();
            let series = MarketSeries::new(records).unwrap();
            let once = parse_market_str(&series.to_csv_string()).unwrap();
            prop_assert_eq!(&once, &series);
            let twice = parse_market_str(&once.to_csv_string()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
