use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{synth, SynthKind, SynthParams};
use super::{load_collection, load_csv, CsvSchema, Frequency, SeriesCollection, SeriesTable, SplitSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// One `T×d` table, one row per time step.
    #[default]
    Table,
    /// One univariate series per row.
    Collection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub kind: SynthKind,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

/// Describes where a dataset lives and how to read and split it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub frequency: Frequency,
    #[serde(default)]
    pub kind: DatasetKind,
    /// Relative paths resolve against the manifest's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSource>,
    pub n_vars: usize,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub timestamp_column: Option<usize>,
    #[serde(default)]
    pub id_column: bool,
    #[serde(default)]
    pub split: SplitSpec,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
        if let (Some(p), Some(dir)) = (&m.path, path.parent()) {
            if p.is_relative() {
                m.path = Some(dir.join(p));
            }
        }
        Ok(m)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.path, &self.synth) {
            (None, None) => p.push(format!("dataset {}: needs a path or a synth source", self.name)),
            (Some(_), Some(_)) => {
                p.push(format!("dataset {}: path and synth are exclusive", self.name))
            }
            (Some(path), None) if !path.exists() => {
                p.push(format!("dataset {}: file {} does not exist", self.name, path.display()))
            }
            (None, Some(s)) => {
                p.extend(s.params.problems());
                if self.kind == DatasetKind::Collection {
                    p.push(format!("dataset {}: synth sources produce tables", self.name));
                }
            }
            _ => {}
        }
        if self.n_vars == 0 {
            p.push(format!("dataset {}: n_vars must be positive", self.name));
        }
        if self.kind == DatasetKind::Collection && self.n_vars != 1 {
            p.push(format!("dataset {}: collections are univariate", self.name));
        }
        p.extend(self.split.problems());
        p
    }

    pub fn load_table(&self) -> Result<SeriesTable> {
        if self.kind != DatasetKind::Table {
            return Err(Error::Config(format!("dataset {} is not a table", self.name)));
        }
        let mut t = match (&self.path, &self.synth) {
            (_, Some(s)) => synth(s.kind, s.length, self.n_vars, s.seed, &s.params)?,
            (Some(p), None) => {
                let schema = CsvSchema {
                    has_header: self.has_header,
                    timestamp_column: self.timestamp_column,
                    n_vars: self.n_vars,
                };
                load_csv(p, &schema, &self.name, self.frequency)?
            }
            (None, None) => return Err(Error::Config(self.problems().join("; "))),
        };
        t.name = self.name.clone();
        t.frequency = self.frequency;
        Ok(t)
    }

    pub fn load_collection(&self) -> Result<SeriesCollection> {
        match (&self.path, self.kind) {
            (Some(p), DatasetKind::Collection) => {
                load_collection(p, &self.name, self.frequency, self.has_header, self.id_column)
            }
            _ => Err(Error::Config(format!("dataset {} is not a collection file", self.name))),
        }
    }
}
