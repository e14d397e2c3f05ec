//! Domain types for task datasets, their on-disk formats, and the synthetic
//! multi-task feature generator.
//!
//! Features arrive precomputed (one frozen-backbone vector per sample) and are
//! stored as `f32`; everything downstream widens them to `f64`.

mod format;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_feature_file, read_manifest, write_feature_file, FEATURE_MAGIC, LABEL_MAGIC};
pub use synth::{generate_synthetic, SynthConfig};

/// Per-finding annotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelCode {
    Negative,
    Positive,
    Uncertain,
    Missing,
}

impl LabelCode {
    pub fn code(self) -> i8 {
        match self {
            LabelCode::Negative => 0,
            LabelCode::Positive => 1,
            LabelCode::Uncertain => -1,
            LabelCode::Missing => -2,
        }
    }

    pub fn from_code(code: i8) -> Result<Self> {
        match code {
            0 => Ok(LabelCode::Negative),
            1 => Ok(LabelCode::Positive),
            -1 => Ok(LabelCode::Uncertain),
            -2 => Ok(LabelCode::Missing),
            other => Err(Error::UnknownLabelCode(other)),
        }
    }

    /// `Some(0.0 | 1.0)` for definite labels.
    pub fn definite(self) -> Option<f64> {
        match self {
            LabelCode::Negative => Some(0.0),
            LabelCode::Positive => Some(1.0),
            _ => None,
        }
    }
}

pub type LabelMatrix = Array2<LabelCode>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One split of one task: `N × d` features and `N × C` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub name: String,
    pub class_names: Vec<String>,
    pub features: Array2<f32>,
    pub labels: LabelMatrix,
    pub split: Split,
    /// Free-form manifest keys (e.g. the exporter's encoder id), kept verbatim.
    pub metadata: BTreeMap<String, String>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.nrows() {
            return Err(Error::Dataset(format!(
                "{}: {} feature rows but {} label rows",
                self.name,
                self.features.nrows(),
                self.labels.nrows()
            )));
        }
        if self.labels.ncols() != self.class_names.len() {
            return Err(Error::Dataset(format!(
                "{}: {} label columns but {} class names",
                self.name,
                self.labels.ncols(),
                self.class_names.len()
            )));
        }
        for name in std::iter::once(&self.name).chain(&self.class_names) {
            if name.is_empty() || name.contains([',', '\n', '=']) || name.trim() != name {
                return Err(Error::Dataset(format!("unusable name {name:?}")));
            }
        }
        for ((row, col), v) in self.features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature { row, col });
            }
        }
        if self.split == Split::Train {
            for (i, row) in self.labels.axis_iter(Axis(0)).enumerate() {
                if row.iter().all(|&l| l == LabelCode::Missing) {
                    return Err(Error::Dataset(format!(
                        "{}: training sample {i} has no non-missing label",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows `indices` widened to `f64`.
    pub fn gather_features(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.feature_dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (dst, &src) in out.axis_iter_mut(Axis(0)).zip(indices) {
            for (o, &v) in dst.into_iter().zip(self.features.row(src)) {
                *o = v as f64;
            }
        }
        out
    }

    pub fn gather_labels(&self, indices: &[usize]) -> LabelMatrix {
        self.labels.select(Axis(0), indices)
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(|v| v as f64)
    }
}

/// The splits of one task as used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub val: Option<TaskDataset>,
    pub test: TaskDataset,
}

impl TaskSplits {
    pub fn name(&self) -> &str {
        &self.train.name
    }

    pub fn class_names(&self) -> &[String] {
        &self.train.class_names
    }

    pub fn validate(&self) -> Result<()> {
        for ds in std::iter::once(&self.train)
            .chain(self.val.as_ref())
            .chain(std::iter::once(&self.test))
        {
            ds.validate()?;
            if ds.class_names != self.train.class_names || ds.name != self.train.name {
                return Err(Error::Dataset(format!(
                    "{} split of `{}` disagrees with its train split on name or classes",
                    ds.split, self.train.name
                )));
            }
            if ds.feature_dim() != self.train.feature_dim() {
                return Err(Error::dims(
                    format!("{} split of `{}`", ds.split, ds.name),
                    self.train.feature_dim(),
                    ds.feature_dim(),
                ));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Dataset(format!(
                "task `{}` has an empty train or test split",
                self.name()
            )));
        }
        Ok(())
    }

    /// Renumbers every split to `task_id` (run order decides task ids).
    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.train.task_id = task_id;
        if let Some(v) = self.val.as_mut() {
            v.task_id = task_id;
        }
        self.test.task_id = task_id;
        self
    }
}

/// `<base>.<split>.manifest`, where `base` is a directory plus task name.
pub fn split_manifest_path(base: &Path, split: Split) -> PathBuf {
    let name = base
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.with_file_name(format!("{name}.{split}.manifest"))
}

/// Writes every split of a task under `dir`; returns the manifest paths.
pub fn write_task_splits(dir: &Path, splits: &TaskSplits) -> Result<Vec<PathBuf>> {
    let base = dir.join(splits.name());
    let mut written = Vec::new();
    for ds in std::iter::once(&splits.train)
        .chain(splits.val.as_ref())
        .chain(std::iter::once(&splits.test))
    {
        let path = split_manifest_path(&base, ds.split);
        write_feature_file(ds, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads `<base>.train`, `<base>.test` and, if present, `<base>.val`.
pub fn load_task_splits(base: &Path, task_id: usize) -> Result<TaskSplits> {
    let load = |split: Split| -> Result<TaskDataset> {
        let ds = read_feature_file(&split_manifest_path(base, split))?;
        if ds.split != split {
            return Err(Error::Dataset(format!(
                "{} declares split `{}`",
                split_manifest_path(base, split).display(),
                ds.split
            )));
        }
        Ok(ds)
    };
    let val_path = split_manifest_path(base, Split::Val);
    let splits = TaskSplits {
        train: load(Split::Train)?,
        val: if val_path.exists() {
            Some(load(Split::Val)?)
        } else {
            None
        },
        test: load(Split::Test)?,
    }
    .with_task_id(task_id);
    splits.validate()?;
    Ok(splits)
}
