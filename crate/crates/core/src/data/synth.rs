//! Synthetic stand-in for frozen-backbone features.
//!
//! Task centres sit on scaled orthonormal directions so every pair is exactly
//! `task_center_separation` apart. Class `c` of every task is offset from its
//! task centre by `class_separation` along a shared direction `u_c`, so two
//! tasks with zero centre separation are the same distribution. Samples are
//! isotropic Gaussians around their class mean.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabelCode, Split, TaskDataset, TaskSplits};
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub d: usize,
    pub num_tasks: usize,
    /// One entry per task, or a single entry shared by all tasks.
    pub classes_per_task: Vec<usize>,
    /// `[train, val, test]` per task, or a single triple shared by all tasks.
    pub samples_per_split: Vec<[usize; 3]>,
    pub task_center_separation: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub uncertain_fraction: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 32,
            num_tasks: 2,
            classes_per_task: vec![5],
            samples_per_split: vec![[2000, 0, 500]],
            task_center_separation: 10.0,
            class_separation: 4.0,
            noise_sigma: 1.0,
            uncertain_fraction: 0.05,
            missing_fraction: 0.05,
            seed: 1337,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 10] = [
        "d",
        "num_tasks",
        "classes_per_task",
        "samples_per_split",
        "task_center_separation",
        "class_separation",
        "noise_sigma",
        "uncertain_fraction",
        "missing_fraction",
        "seed",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let base = SynthConfig::default();
        let classes = match kv.get("classes_per_task") {
            Some(v) => parse_list(v, "classes_per_task", |s| s.parse::<usize>().ok())?,
            None => base.classes_per_task.clone(),
        };
        let samples = match kv.get("samples_per_split") {
            Some(v) => v
                .split(';')
                .map(|triple| {
                    let parts = parse_list(triple, "samples_per_split", |s| s.parse::<usize>().ok())?;
                    <[usize; 3]>::try_from(parts).map_err(|_| {
                        Error::config("samples_per_split", "expected train,val,test triples separated by ';'")
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => base.samples_per_split.clone(),
        };
        let cfg = SynthConfig {
            d: kv.parsed_or("d", base.d)?,
            num_tasks: kv.parsed_or("num_tasks", base.num_tasks)?,
            classes_per_task: classes,
            samples_per_split: samples,
            task_center_separation: kv.parsed_or("task_center_separation", base.task_center_separation)?,
            class_separation: kv.parsed_or("class_separation", base.class_separation)?,
            noise_sigma: kv.parsed_or("noise_sigma", base.noise_sigma)?,
            uncertain_fraction: kv.parsed_or("uncertain_fraction", base.uncertain_fraction)?,
            missing_fraction: kv.parsed_or("missing_fraction", base.missing_fraction)?,
            seed: kv.parsed_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("d".into(), self.d.to_string()),
            ("num_tasks".into(), self.num_tasks.to_string()),
            ("classes_per_task".into(), list(&self.classes_per_task)),
            (
                "samples_per_split".into(),
                self.samples_per_split
                    .iter()
                    .map(|t| list(t))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("task_center_separation".into(), self.task_center_separation.to_string()),
            ("class_separation".into(), self.class_separation.to_string()),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("uncertain_fraction".into(), self.uncertain_fraction.to_string()),
            ("missing_fraction".into(), self.missing_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
        ])
    }

    pub fn classes_for(&self, task: usize) -> usize {
        *self.classes_per_task.get(task).unwrap_or(&self.classes_per_task[0])
    }

    pub fn samples_for(&self, task: usize) -> [usize; 3] {
        *self.samples_per_split.get(task).unwrap_or(&self.samples_per_split[0])
    }

    pub fn validate(&self) -> Result<()> {
        let fraction = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{v} is not in [0, 1]")))
            }
        };
        fraction("uncertain_fraction", self.uncertain_fraction)?;
        fraction("missing_fraction", self.missing_fraction)?;
        if self.uncertain_fraction + self.missing_fraction > 1.0 {
            return Err(Error::config(
                "missing_fraction",
                "uncertain_fraction + missing_fraction exceeds 1",
            ));
        }
        if self.d < 2 {
            return Err(Error::config("d", "feature dimension must be at least 2"));
        }
        if self.num_tasks == 0 {
            return Err(Error::config("num_tasks", "need at least one task"));
        }
        for (key, len) in [
            ("classes_per_task", self.classes_per_task.len()),
            ("samples_per_split", self.samples_per_split.len()),
        ] {
            if len != 1 && len != self.num_tasks {
                return Err(Error::config(
                    key,
                    format!("expected 1 or {} entries, got {len}", self.num_tasks),
                ));
            }
        }
        if self.classes_per_task.contains(&0) {
            return Err(Error::config("classes_per_task", "every task needs at least one class"));
        }
        let max_classes = self.classes_per_task.iter().copied().max().unwrap_or(1);
        if self.num_tasks + max_classes > self.d {
            return Err(Error::config(
                "d",
                format!(
                    "d = {} cannot hold {} task directions plus {} class directions",
                    self.d, self.num_tasks, max_classes
                ),
            ));
        }
        for task in 0..self.num_tasks {
            let [train, _, test] = self.samples_for(task);
            if train == 0 || test == 0 {
                return Err(Error::config(
                    "samples_per_split",
                    "zero samples in a train or test split",
                ));
            }
            if self.classes_for(task) == 1 && self.missing_fraction > 0.0 {
                return Err(Error::config(
                    "missing_fraction",
                    "single-class tasks cannot have missing labels (rows would be empty)",
                ));
            }
        }
        for (key, v) in [
            ("task_center_separation", self.task_center_separation),
            ("class_separation", self.class_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::config("noise_sigma", "must be positive"));
        }
        Ok(())
    }

    /// Task centres as rows; exposed for nearest-centre checks.
    pub fn task_centers(&self) -> Array2<f64> {
        layout(self).0
    }
}

fn parse_list<T>(raw: &str, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| Error::config(key, format!("cannot parse `{}`", s.trim()))))
        .collect()
}

/// `(task centres K×d, class directions Cmax×d, generator positioned after layout draws)`.
fn layout(cfg: &SynthConfig) -> (Array2<f64>, Array2<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_classes = cfg.classes_per_task.iter().copied().max().unwrap_or(1);
    let basis = random_orthonormal(cfg.d, cfg.num_tasks + max_classes, &mut rng);
    let scale = cfg.task_center_separation / std::f64::consts::SQRT_2;
    let centers = basis.slice(ndarray::s![..cfg.num_tasks, ..]).mapv(|v| v * scale);
    let classes = basis.slice(ndarray::s![cfg.num_tasks.., ..]).to_owned();
    (centers, classes, rng)
}

/// Gram-Schmidt over Gaussian draws; `count <= d`.
fn random_orthonormal(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((count, d));
    let mut filled = 0;
    while filled < count {
        let mut v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..filled {
            let b = basis.row(j);
            let proj = v.dot(&b);
            v.scaled_add(-proj, &b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.row_mut(filled).assign(&(v / norm));
            filled += 1;
        }
    }
    basis
}

pub fn class_names(count: usize) -> Vec<String> {
    (0..count).map(|c| format!("finding_{c}")).collect()
}

pub fn task_name(task: usize) -> String {
    format!("task_{}", task + 1)
}

/// Draws every task's splits from one seeded stream, in task then split order.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<TaskSplits>> {
    cfg.validate()?;
    let (centers, class_dirs, mut rng) = layout(cfg);
    let mut out = Vec::with_capacity(cfg.num_tasks);
    for task in 0..cfg.num_tasks {
        let classes = cfg.classes_for(task);
        let sizes = cfg.samples_for(task);
        let mut splits = Vec::with_capacity(3);
        for (split, n) in [Split::Train, Split::Val, Split::Test].into_iter().zip(sizes) {
            if n == 0 {
                splits.push(None);
                continue;
            }
            let mut features = Array2::<f32>::zeros((n, cfg.d));
            let mut labels = Array2::from_elem((n, classes), LabelCode::Negative);
            for i in 0..n {
                let class = rng.random_range(0..classes);
                labels[[i, class]] = LabelCode::Positive;
                for j in 0..cfg.d {
                    let mean = centers[[task, j]] + cfg.class_separation * class_dirs[[class, j]];
                    let noise: f64 = rng.sample(StandardNormal);
                    features[[i, j]] = (mean + cfg.noise_sigma * noise) as f32;
                }
            }
            corrupt_labels(&mut labels, cfg.uncertain_fraction, cfg.missing_fraction, &mut rng)?;
            splits.push(Some(TaskDataset {
                task_id: task,
                name: task_name(task),
                class_names: class_names(classes),
                features,
                labels,
                split,
                metadata: BTreeMap::new(),
            }));
        }
        let mut it = splits.into_iter();
        let (train, val, test) = (it.next().flatten(), it.next().flatten(), it.next().flatten());
        out.push(TaskSplits {
            train: train.expect("train size validated"),
            val,
            test: test.expect("test size validated"),
        });
    }
    Ok(out)
}

/// Recodes exactly `round(f·N·C)` cells to Missing, then Uncertain, never
/// leaving a row without a non-missing entry.
fn corrupt_labels(labels: &mut Array2<LabelCode>, uncertain: f64, missing: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c) = labels.dim();
    let total = n * c;
    let n_missing = (missing * total as f64).round() as usize;
    let n_uncertain = (uncertain * total as f64).round() as usize;
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(rng);

    let mut remaining = vec![c; n];
    let mut assigned = 0;
    for &cell in &cells {
        if assigned == n_missing {
            break;
        }
        let (row, col) = (cell / c, cell % c);
        if remaining[row] > 1 {
            labels[[row, col]] = LabelCode::Missing;
            remaining[row] -= 1;
            assigned += 1;
        }
    }
    if assigned < n_missing {
        return Err(Error::config(
            "missing_fraction",
            format!("cannot place {n_missing} missing labels without emptying a row"),
        ));
    }
    let mut assigned = 0;
    for &cell in &cells {
        if assigned == n_uncertain {
            break;
        }
        let (row, col) = (cell / c, cell % c);
        if labels[[row, col]] != LabelCode::Missing {
            labels[[row, col]] = LabelCode::Uncertain;
            assigned += 1;
        }
    }
    Ok(())
}
