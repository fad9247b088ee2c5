use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DataRole, SeriesTable};
use crate::backbone::train::{Examples, TargetRef};
use crate::error::{Error, Result};

fn default_train() -> f64 {
    0.7
}
fn default_val() -> f64 {
    0.1
}

/// Chronological train/val/test split. Explicit `boundaries` win over fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_train")]
    pub train: f64,
    #[serde(default = "default_val")]
    pub val: f64,
    /// First row of the validation and test segments.
    #[serde(default)]
    pub boundaries: Option<[usize; 2]>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: default_train(),
            val: default_val(),
            boundaries: None,
        }
    }
}

impl SplitSpec {
    /// Everything in the training segment.
    pub fn whole() -> Self {
        SplitSpec {
            train: 1.0,
            val: 0.0,
            boundaries: None,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Some([a, b]) = self.boundaries {
            if a > b {
                p.push(format!("split boundaries out of order: {a} > {b}"));
            }
        } else if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0) {
            p.push(format!(
                "split fractions must satisfy train > 0, val >= 0, train + val <= 1 (got {}, {})",
                self.train, self.val
            ));
        }
        p
    }

    /// `(val_start, test_start)` for a series of `t` rows.
    pub fn bounds(&self, t: usize) -> Result<(usize, usize)> {
        let p = self.problems();
        if !p.is_empty() {
            return Err(Error::Config(p.join("; ")));
        }
        let (a, b) = match self.boundaries {
            Some([a, b]) => (a, b),
            None => {
                // The slack absorbs products like 1000 · 0.8 = 799.999….
                let cut = |f: f64| ((t as f64 * f) + 1e-9).floor() as usize;
                (cut(self.train), cut(self.train + self.val).min(t))
            }
        };
        if b > t {
            return Err(Error::Config(format!("split boundary {b} beyond series length {t}")));
        }
        Ok((a, b))
    }
}

/// Sliding `(input, target)` windows over one contiguous segment of a series.
#[derive(Clone, Debug)]
pub struct WindowSet {
    values: Arc<[f64]>,
    n_vars: usize,
    input_len: usize,
    horizon: usize,
    starts: Vec<usize>,
    role: DataRole,
}

impl WindowSet {
    fn over(
        table: &SeriesTable,
        segment: (usize, usize),
        input_len: usize,
        horizon: usize,
        stride: usize,
        role: DataRole,
    ) -> Self {
        let span = input_len + horizon;
        let starts = if segment.1 >= segment.0 + span {
            (segment.0..=segment.1 - span).step_by(stride).collect()
        } else {
            Vec::new()
        };
        WindowSet {
            values: table.shared_values(),
            n_vars: table.n_vars(),
            input_len,
            horizon,
            starts,
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// First row of each window, in chronological order.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Rows `[start, start + L + horizon)` covered by window `i`.
    pub fn span(&self, i: usize) -> (usize, usize) {
        let s = self.starts[i];
        (s, s + self.input_len + self.horizon)
    }

    pub fn input_slice(&self, i: usize) -> &[f64] {
        let s = self.starts[i] * self.n_vars;
        &self.values[s..s + self.input_len * self.n_vars]
    }

    pub fn target_slice(&self, i: usize) -> &[f64] {
        let s = (self.starts[i] + self.input_len) * self.n_vars;
        &self.values[s..s + self.horizon * self.n_vars]
    }

    pub fn with_role(mut self, role: DataRole) -> Self {
        self.role = role;
        self
    }

    /// The chronologically first `fraction` of windows, at least one.
    pub fn few_shot(&self, fraction: f64) -> Result<WindowSet> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "few-shot fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = self.starts.len();
        let keep = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(n.min(1), n);
        Ok(WindowSet {
            starts: self.starts[..keep].to_vec(),
            ..self.clone()
        })
    }
}

impl Examples for WindowSet {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        self.input_slice(i)
    }

    fn target(&self, i: usize) -> TargetRef<'_> {
        TargetRef::Series(self.target_slice(i))
    }

    fn role(&self) -> DataRole {
        self.role
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    /// `(val_start, test_start)` rows.
    pub bounds: (usize, usize),
}

/// Windows per split; no window crosses a split boundary.
pub fn make_windows(
    table: &SeriesTable,
    input_len: usize,
    horizon: usize,
    split: &SplitSpec,
    stride: usize,
) -> Result<Splits> {
    let t = table.len();
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Window(
            "input length, horizon and stride must be positive".into(),
        ));
    }
    if t < input_len + horizon {
        return Err(Error::Window(format!(
            "series has {t} rows; needs at least L + horizon = {}",
            input_len + horizon
        )));
    }
    let (a, b) = split.bounds(t)?;
    let mk = |seg, role| WindowSet::over(table, seg, input_len, horizon, stride, role);
    Ok(Splits {
        train: mk((0, a), DataRole::Train),
        val: mk((a, b), DataRole::Validation),
        test: mk((b, t), DataRole::Test),
        bounds: (a, b),
    })
}
