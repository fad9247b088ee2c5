use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::NormStats;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frequency {
    Hourly,
    #[serde(rename = "15-min")]
    FifteenMin,
    #[serde(rename = "10-min")]
    TenMin,
    Yearly,
    Quarterly,
    Monthly,
}

impl Frequency {
    pub const ALL: [Frequency; 6] = [
        Frequency::Hourly,
        Frequency::FifteenMin,
        Frequency::TenMin,
        Frequency::Yearly,
        Frequency::Quarterly,
        Frequency::Monthly,
    ];

    /// Seasonal period used by MASE and the seasonal-naive baseline.
    pub fn seasonal_period(self) -> usize {
        match self {
            Frequency::Yearly => 1,
            Frequency::Quarterly => 4,
            Frequency::Monthly => 12,
            Frequency::Hourly => 24,
            Frequency::FifteenMin => 96,
            Frequency::TenMin => 144,
        }
    }

    /// Prediction length of the M-style competitions, where defined.
    pub fn m_horizon(self) -> Option<usize> {
        match self {
            Frequency::Yearly => Some(6),
            Frequency::Quarterly => Some(8),
            Frequency::Monthly => Some(18),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Hourly => "hourly",
            Frequency::FifteenMin => "15-min",
            Frequency::TenMin => "10-min",
            Frequency::Yearly => "yearly",
            Frequency::Quarterly => "quarterly",
            Frequency::Monthly => "monthly",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Frequency::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown frequency {s:?}")))
    }
}

/// A `T×d` multivariate series, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub name: String,
    pub frequency: Frequency,
    values: Arc<[f64]>,
    n_vars: usize,
    pub timestamps: Option<Vec<String>>,
}

impl SeriesTable {
    pub fn new(name: &str, frequency: Frequency, n_vars: usize, values: Vec<f64>) -> Result<Self> {
        if n_vars == 0 || values.len() % n_vars != 0 {
            return Err(Error::dim("series_table", &[values.len()], &[n_vars]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: name.into(),
                row: (i / n_vars) as u64,
                col: i % n_vars,
            });
        }
        Ok(SeriesTable {
            name: name.to_string(),
            frequency,
            values: values.into(),
            n_vars,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_vars
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> Arc<[f64]> {
        Arc::clone(&self.values)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.chunks(self.n_vars).map(|r| r[j]).collect()
    }

    /// Population statistics of the first `rows` rows.
    pub fn stats(&self, rows: usize) -> Result<NormStats> {
        let rows = rows.min(self.len());
        crate::backbone::norm::zscore_slice(
            &self.values[..rows * self.n_vars],
            self.n_vars,
            crate::backbone::norm::DEFAULT_EPS,
        )
        .map(|(_, s)| s)
    }

    /// Returns a copy standardized with `stats`.
    pub fn standardized(&self, stats: &NormStats) -> Result<SeriesTable> {
        if stats.mean.len() != self.n_vars {
            return Err(Error::dim("standardize", &[self.n_vars], &[stats.mean.len()]));
        }
        let values = self
            .values
            .chunks(self.n_vars)
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - stats.mean[j]) / stats.divisor(j))
            })
            .collect::<Vec<_>>();
        Ok(SeriesTable {
            values: values.into(),
            ..self.clone()
        })
    }
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub has_header: bool,
    /// Index of a non-numeric timestamp column, kept as text.
    #[serde(default)]
    pub timestamp_column: Option<usize>,
    /// Expected number of numeric columns.
    pub n_vars: usize,
}

/// Loads a numeric CSV. Rows with a non-finite cell are rejected with their
/// 1-based line and 0-based column.
pub fn load_csv(path: &Path, schema: &CsvSchema, name: &str, frequency: Frequency) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_path(path)?;
    let expected = schema.n_vars + usize::from(schema.timestamp_column.is_some());
    let mut values = Vec::new();
    let mut stamps = schema.timestamp_column.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: format!("expected {expected} columns, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == schema.timestamp_column {
                if let Some(s) = stamps.as_mut() {
                    s.push(cell.to_string());
                }
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                message: format!("column {c}: cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.into(),
                    row: line,
                    col: c,
                });
            }
            values.push(v);
        }
    }
    let mut t = SeriesTable::new(name, frequency, schema.n_vars, values)?;
    t.timestamps = stamps;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_by_two() {
        let f = file("1,2\n3,4\n5,6\n");
        let schema = CsvSchema {
            n_vars: 2,
            ..Default::default()
        };
        let t = load_csv(f.path(), &schema, "t", Frequency::Hourly).unwrap();
        assert_eq!((t.len(), t.n_vars()), (3, 2));
        assert_eq!(t.column(1), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn nan_cell_rejected_with_coordinates() {
        let f = file("a,b\n1,2\n3,NaN\n");
        let schema = CsvSchema {
            has_header: true,
            n_vars: 2,
            ..Default::default()
        };
        match load_csv(f.path(), &schema, "t", Frequency::Hourly) {
            Err(Error::NonFinite { row, col, .. }) => assert_eq!((row, col), (3, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let f = file("1,2\nx,4\n");
        let schema = CsvSchema {
            n_vars: 2,
            ..Default::default()
        };
        match load_csv(f.path(), &schema, "t", Frequency::Hourly) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ett_shaped_with_timestamps() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for i in 0..5 {
            text.push_str(&format!("2016-07-01 0{i}:00:00,1,2,3,4,5,6,{i}\n"));
        }
        let f = file(&text);
        let schema = CsvSchema {
            has_header: true,
            timestamp_column: Some(0),
            n_vars: 7,
        };
        let t = load_csv(f.path(), &schema, "etth", Frequency::Hourly).unwrap();
        assert_eq!(t.n_vars(), 7);
        assert_eq!(t.timestamps.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn frequency_tables() {
        assert_eq!(Frequency::Monthly.m_horizon(), Some(18));
        assert_eq!(Frequency::Hourly.m_horizon(), None);
        assert_eq!(Frequency::Quarterly.seasonal_period(), 4);
        assert_eq!("15-min".parse::<Frequency>().unwrap(), Frequency::FifteenMin);
    }
}
