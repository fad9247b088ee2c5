//! Row-per-series collections in the style of the M3/M4 competition files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataRole, Frequency};
use crate::backbone::train::{Examples, TargetRef};
use crate::error::{Error, Result};

/// Many univariate series of varying length sharing one frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesCollection {
    pub name: String,
    pub frequency: Frequency,
    pub series: Vec<Vec<f64>>,
}

impl SeriesCollection {
    /// Writes one row per series, `id,v1,v2,…`, with a header. Shorter
    /// series leave trailing cells empty, as [`load_collection`] expects.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let width = self.series.iter().map(Vec::len).max().unwrap_or(0);
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        w.write_record(std::iter::once("id".to_string()).chain((1..=width).map(|i| format!("v{i}"))))?;
        for (k, s) in self.series.iter().enumerate() {
            let cells = s.iter().map(|v| v.to_string()).chain(std::iter::repeat_n(String::new(), width - s.len()));
            w.write_record(std::iter::once(format!("S{k}")).chain(cells))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads one series per CSV row. Trailing empty cells end a row; `id_column`
/// skips a leading label.
pub fn load_collection(
    path: &Path,
    name: &str,
    frequency: Frequency,
    has_header: bool,
    id_column: bool,
) -> Result<SeriesCollection> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)?;
    let mut series = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut s = Vec::new();
        for (c, cell) in rec.iter().enumerate().skip(usize::from(id_column)) {
            let cell = cell.trim();
            if cell.is_empty() {
                break;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
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
            s.push(v);
        }
        series.push(s);
    }
    Ok(SeriesCollection {
        name: name.to_string(),
        frequency,
        series,
    })
}

/// Train on the source collection, evaluate on the target without updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotPlan {
    pub frequency: Frequency,
    pub horizon: usize,
    pub seasonal_period: usize,
    pub source: String,
    pub target: String,
}

pub fn zero_shot_pair(
    sources: &[SeriesCollection],
    targets: &[SeriesCollection],
    frequency: Frequency,
) -> Result<ZeroShotPlan> {
    let horizon = frequency.m_horizon().ok_or_else(|| {
        Error::Pairing(format!("{frequency} has no competition prediction length"))
    })?;
    let find = |side: &[SeriesCollection], what: &str| -> Result<String> {
        side.iter()
            .find(|c| c.frequency == frequency)
            .map(|c| c.name.clone())
            .ok_or_else(|| Error::Pairing(format!("no {frequency} collection on the {what} side")))
    };
    let source = find(sources, "source")?;
    let target = find(targets, "target")?;
    Ok(ZeroShotPlan {
        frequency,
        horizon,
        seasonal_period: frequency.seasonal_period(),
        source,
        target,
    })
}

/// Fixed-length univariate examples cut from a collection.
#[derive(Clone, Debug)]
pub struct CollectionWindows {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    histories: Vec<Vec<f64>>,
    input_len: usize,
    horizon: usize,
    role: DataRole,
    /// Series too short to yield a single window.
    pub skipped: usize,
}

impl CollectionWindows {
    fn empty(input_len: usize, horizon: usize, role: DataRole) -> Self {
        CollectionWindows {
            inputs: Vec::new(),
            targets: Vec::new(),
            histories: Vec::new(),
            input_len,
            horizon,
            role,
            skipped: 0,
        }
    }

    /// Sliding windows over each series with its last `horizon` values held out.
    pub fn training(coll: &SeriesCollection, input_len: usize, horizon: usize, stride: usize) -> Self {
        let mut w = Self::empty(input_len, horizon, DataRole::Train);
        let span = input_len + horizon;
        for s in &coll.series {
            let usable = s.len().saturating_sub(horizon);
            if usable < span {
                w.skipped += 1;
                continue;
            }
            for start in (0..=usable - span).step_by(stride.max(1)) {
                w.inputs.extend_from_slice(&s[start..start + input_len]);
                w.targets.extend_from_slice(&s[start + input_len..start + span]);
                w.histories.push(Vec::new());
            }
        }
        w
    }

    /// The final `horizon` of each series as target, preceded by `input_len` inputs.
    pub fn final_horizon(coll: &SeriesCollection, input_len: usize, horizon: usize, role: DataRole) -> Self {
        let mut w = Self::empty(input_len, horizon, role);
        for s in &coll.series {
            if s.len() < input_len + horizon {
                w.skipped += 1;
                continue;
            }
            let cut = s.len() - horizon;
            w.inputs.extend_from_slice(&s[cut - input_len..cut]);
            w.targets.extend_from_slice(&s[cut..]);
            w.histories.push(s[..cut].to_vec());
        }
        w
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn target_slice(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    /// In-sample values preceding the target (empty for training windows).
    pub fn history(&self, i: usize) -> &[f64] {
        &self.histories[i]
    }
}

impl Examples for CollectionWindows {
    fn len(&self) -> usize {
        self.histories.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    fn target(&self, i: usize) -> TargetRef<'_> {
        TargetRef::Series(self.target_slice(i))
    }

    fn role(&self) -> DataRole {
        self.role
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn coll(name: &str, f: Frequency) -> SeriesCollection {
        SeriesCollection {
            name: name.into(),
            frequency: f,
            series: vec![(0..20).map(f64::from).collect(), vec![1.0; 5]],
        }
    }

    #[test]
    fn pairing_horizons() {
        let src = [coll("m3y", Frequency::Yearly), coll("m3m", Frequency::Monthly)];
        let tgt = [coll("m4y", Frequency::Yearly), coll("m4m", Frequency::Monthly)];
        assert_eq!(zero_shot_pair(&src, &tgt, Frequency::Yearly).unwrap().horizon, 6);
        assert_eq!(zero_shot_pair(&src, &tgt, Frequency::Monthly).unwrap().horizon, 18);
        let only_q = [coll("q", Frequency::Quarterly)];
        assert!(matches!(
            zero_shot_pair(&src, &only_q, Frequency::Yearly),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn final_horizon_windows() {
        let c = coll("c", Frequency::Yearly);
        let w = CollectionWindows::final_horizon(&c, 4, 6, DataRole::Target);
        assert_eq!(w.len(), 1);
        assert_eq!(w.skipped, 1);
        assert_eq!(w.input(0), &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(w.target_slice(0), &[14.0, 15.0, 16.0, 17.0, 18.0, 19.0]);
        assert_eq!(w.history(0).len(), 14);
        assert_eq!(w.role(), DataRole::Target);
    }

    #[test]
    fn training_never_sees_held_out_tail() {
        let c = coll("c", Frequency::Yearly);
        let w = CollectionWindows::training(&c, 4, 6, 1);
        // 20 − 6 held out = 14 usable rows, span 10 → 5 windows.
        assert_eq!(w.len(), 5);
        assert!(w.target_slice(4).iter().all(|&v| v < 14.0));
    }

    #[test]
    fn write_then_load() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let c = coll("c", Frequency::Yearly);
        c.write_csv(f.path()).unwrap();
        let back = load_collection(f.path(), "c", Frequency::Yearly, true, true).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn loads_ragged_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "id,v1,v2,v3").unwrap();
        writeln!(f, "Y1,1,2,3").unwrap();
        writeln!(f, "Y2,4,5,").unwrap();
        let c = load_collection(f.path(), "m", Frequency::Yearly, true, true).unwrap();
        assert_eq!(c.series, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0]]);
    }
}
