//! Task-unknown inference and oracle evaluation.
//!
//! Every strategy scores all `K` task modules on adapter-conditioned features
//! and picks one task per sample; equal scores resolve to the lowest index.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapters::TaskModule;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::losses::{sigmoid, softmax_rows};
use crate::metrics::{auroc_masked, macro_f1, routing_accuracy, RoutingAccuracy};
use crate::selector::{PrototypeMemory, SelectorNet, SelectorState};

/// Rows per inference chunk; bounds the `K × chunk × d` working set.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Selector,
    Memory,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Selector, Strategy::Memory, Strategy::Entropy];

    fn needs_selector(self) -> bool {
        matches!(self, Strategy::Selector | Strategy::Memory)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Selector => "selector",
            Strategy::Memory => "memory",
            Strategy::Entropy => "entropy",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selector" => Ok(Strategy::Selector),
            "memory" => Ok(Strategy::Memory),
            "entropy" => Ok(Strategy::Entropy),
            other => Err(Error::config("strategy", format!("unknown routing strategy `{other}`"))),
        }
    }
}

/// Adapted features and head logits of every module for one chunk.
#[derive(Debug, Clone)]
pub struct ModuleOutputs {
    pub adapted: Vec<Array2<f64>>,
    pub logits: Vec<Array2<f64>>,
}

impl ModuleOutputs {
    pub fn compute(modules: &[TaskModule], z: &Array2<f64>) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::NoTasks);
        }
        let mut adapted = Vec::with_capacity(modules.len());
        let mut logits = Vec::with_capacity(modules.len());
        for m in modules {
            let a = m.adapt(z)?;
            logits.push(m.predict_logits(&a)?);
            adapted.push(a);
        }
        Ok(ModuleOutputs { adapted, logits })
    }

    pub fn num_tasks(&self) -> usize {
        self.adapted.len()
    }
}

/// `score_j = softmax(s(z̃_j))_j`
pub fn selector_scores(net: &SelectorNet, outputs: &ModuleOutputs) -> Result<Array2<f64>> {
    let k = outputs.num_tasks();
    if net.num_tasks() != k {
        return Err(Error::SelectorUntrained {
            selector_tasks: net.num_tasks(),
            modules: k,
        });
    }
    let n = outputs.adapted[0].nrows();
    let mut scores = Array2::zeros((n, k));
    for (j, a) in outputs.adapted.iter().enumerate() {
        let probs = softmax_rows(&net.infer(a)?);
        scores.column_mut(j).assign(&probs.column(j));
    }
    Ok(scores)
}

/// `score_j = cos(z̃_j, M_j)`; untrained (zero) prototypes score `−∞`.
pub fn memory_scores(memory: &PrototypeMemory, outputs: &ModuleOutputs) -> Result<Array2<f64>> {
    let k = outputs.num_tasks();
    if memory.num_tasks() != k {
        return Err(Error::SelectorUntrained {
            selector_tasks: memory.num_tasks(),
            modules: k,
        });
    }
    let norms: Vec<f64> = memory.rows().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().all(|&n| n == 0.0) {
        return Err(Error::AllPrototypesZero);
    }
    let n = outputs.adapted[0].nrows();
    let mut scores = Array2::from_elem((n, k), f64::NEG_INFINITY);
    for (j, a) in outputs.adapted.iter().enumerate() {
        if norms[j] == 0.0 {
            continue;
        }
        let proto = memory.row(j)?;
        for (i, row) in a.rows().into_iter().enumerate() {
            let rn = row.dot(&row).sqrt();
            scores[[i, j]] = cosine(row.dot(&proto), rn, norms[j]);
        }
    }
    Ok(scores)
}

fn cosine(dot: f64, a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        dot / (a * b)
    }
}

/// Natural-log entropy of a Bernoulli with the given logit.
pub fn binary_entropy_from_logit(x: f64) -> f64 {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    let term = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    term(p) + term(q)
}

/// `score_j = mean_c H(sigmoid(H_j(z̃_j))_c)`; lower is more confident.
pub fn entropy_scores(outputs: &ModuleOutputs) -> Array2<f64> {
    let k = outputs.num_tasks();
    let n = outputs.logits[0].nrows();
    let mut scores = Array2::zeros((n, k));
    for (j, logits) in outputs.logits.iter().enumerate() {
        let c = logits.ncols().max(1) as f64;
        for (i, row) in logits.rows().into_iter().enumerate() {
            scores[[i, j]] = row.iter().map(|&x| binary_entropy_from_logit(x)).sum::<f64>() / c;
        }
    }
    scores
}

/// Arg-max (arg-min when `minimize`) per row with lowest-index ties; NaN never wins.
pub fn choose(scores: &Array2<f64>, minimize: bool) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let key = |v: f64| {
                let v = if minimize { -v } else { v };
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            };
            let mut best = 0;
            for j in 1..row.len() {
                if key(row[j]) > key(row[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RoutedBatch {
    pub strategy: Strategy,
    /// `N × K` strategy scores.
    pub scores: Array2<f64>,
    pub chosen: Vec<usize>,
    /// Logits of the chosen head per sample.
    pub logits: Vec<Array1<f64>>,
}

pub fn scores_for(strategy: Strategy, state: Option<&SelectorState>, outputs: &ModuleOutputs) -> Result<Array2<f64>> {
    let need = || {
        state.ok_or(Error::SelectorUntrained {
            selector_tasks: 0,
            modules: outputs.num_tasks(),
        })
    };
    match strategy {
        Strategy::Selector => selector_scores(&need()?.net, outputs),
        Strategy::Memory => memory_scores(&need()?.memory, outputs),
        Strategy::Entropy => Ok(entropy_scores(outputs)),
    }
}

/// Routes every row of `z` with `strategy`.
pub fn route(
    modules: &[TaskModule],
    state: Option<&SelectorState>,
    z: &Array2<f64>,
    strategy: Strategy,
) -> Result<RoutedBatch> {
    let outputs = ModuleOutputs::compute(modules, z)?;
    route_outputs(&outputs, state, strategy)
}

pub fn route_outputs(
    outputs: &ModuleOutputs,
    state: Option<&SelectorState>,
    strategy: Strategy,
) -> Result<RoutedBatch> {
    let scores = scores_for(strategy, state, outputs)?;
    let chosen = choose(&scores, strategy == Strategy::Entropy);
    let logits = chosen
        .iter()
        .enumerate()
        .map(|(i, &j)| outputs.logits[j].row(i).to_owned())
        .collect();
    Ok(RoutedBatch {
        strategy,
        scores,
        chosen,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub name: String,
    pub samples: usize,
    pub auroc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub skipped_classes: usize,
    pub excluded_uncertain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// `"oracle"` or the routing strategy.
    pub mode: String,
    pub tasks: Vec<TaskEval>,
    pub mean_auroc: Option<f64>,
    pub mean_f1: Option<f64>,
    pub routing: Option<RoutingAccuracy>,
}

/// One row per routed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub task_id: usize,
    pub sample: usize,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

fn score_task(task_id: usize, ds: &TaskDataset, logits: &Array2<f64>) -> TaskEval {
    let auc = auroc_masked(logits, &ds.labels).ok();
    let f1 = macro_f1(logits, &ds.labels, 0.5).ok();
    TaskEval {
        task_id,
        name: ds.name.clone(),
        samples: ds.len(),
        skipped_classes: auc.as_ref().map_or(ds.num_classes(), |a| a.skipped_classes),
        excluded_uncertain: auc.as_ref().map_or(0, |a| a.excluded_uncertain),
        auroc: auc.map(|a| a.macro_value),
        macro_f1: f1.map(|f| f.macro_value),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn check_alignment(modules: &[TaskModule], datasets: &[&TaskDataset]) -> Result<()> {
    if modules.is_empty() {
        return Err(Error::NoTasks);
    }
    if datasets.len() > modules.len() {
        return Err(Error::LengthMismatch(format!(
            "{} evaluation sets for {} task modules",
            datasets.len(),
            modules.len()
        )));
    }
    for (k, ds) in datasets.iter().enumerate() {
        if ds.num_classes() != modules[k].num_classes() {
            return Err(Error::dims(
                format!("classes of task {}", k + 1),
                modules[k].num_classes(),
                ds.num_classes(),
            ));
        }
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| s..(s + EVAL_CHUNK).min(n))
}

/// Task-known evaluation: dataset `k` is scored by module `k` only.
pub fn evaluate_oracle(modules: &[TaskModule], datasets: &[&TaskDataset]) -> Result<EvalSection> {
    check_alignment(modules, datasets)?;
    let mut tasks = Vec::with_capacity(datasets.len());
    for (k, ds) in datasets.iter().enumerate() {
        let mut logits = Array2::zeros((ds.len(), ds.num_classes()));
        for range in chunks(ds.len()) {
            let z = ds.features.slice(s![range.clone(), ..]).mapv(f64::from);
            let a = modules[k].adapt(&z)?;
            logits.slice_mut(s![range, ..]).assign(&modules[k].predict_logits(&a)?);
        }
        tasks.push(score_task(k, ds, &logits));
    }
    Ok(EvalSection {
        mode: "oracle".into(),
        mean_auroc: mean_of(tasks.iter().map(|t| t.auroc)),
        mean_f1: mean_of(tasks.iter().map(|t| t.macro_f1)),
        tasks,
        routing: None,
    })
}

/// For each source task `j`, the column in `j`'s head matching each class of `target`.
fn class_maps(modules: &[TaskModule], target: &TaskDataset) -> Vec<Vec<Option<usize>>> {
    modules
        .iter()
        .map(|m| {
            target
                .class_names
                .iter()
                .map(|c| m.class_names.iter().position(|x| x == c))
                .collect()
        })
        .collect()
}

/// Task-unknown evaluation. A sample routed to a head lacking one of its
/// classes receives logit 0 for that class.
pub fn evaluate_routed(
    modules: &[TaskModule],
    state: Option<&SelectorState>,
    datasets: &[&TaskDataset],
    strategy: Strategy,
) -> Result<(EvalSection, Vec<RoutingTrace>)> {
    check_alignment(modules, datasets)?;
    if strategy.needs_selector() {
        let covered = state.map_or(0, SelectorState::num_tasks);
        if covered != modules.len() {
            return Err(Error::SelectorUntrained {
                selector_tasks: covered,
                modules: modules.len(),
            });
        }
    }
    let mut tasks = Vec::with_capacity(datasets.len());
    let mut decisions = Vec::new();
    let mut truth = Vec::new();
    let mut traces = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        let maps = class_maps(modules, ds);
        let mut logits = Array2::zeros((ds.len(), ds.num_classes()));
        for range in chunks(ds.len()) {
            let z = ds.features.slice(s![range.clone(), ..]).mapv(f64::from);
            let routed = route(modules, state, &z, strategy)?;
            for (offset, (&j, head_logits)) in routed.chosen.iter().zip(&routed.logits).enumerate() {
                let i = range.start + offset;
                for (c, src) in maps[j].iter().enumerate() {
                    logits[[i, c]] = src.map_or(0.0, |col| head_logits[col]);
                }
                decisions.push(j);
                truth.push(k);
                traces.push(RoutingTrace {
                    task_id: k,
                    sample: i,
                    scores: routed.scores.row(offset).to_vec(),
                    chosen: j,
                });
            }
        }
        tasks.push(score_task(k, ds, &logits));
    }
    let routing = routing_accuracy(&decisions, &truth, modules.len())?;
    Ok((
        EvalSection {
            mode: strategy.to_string(),
            mean_auroc: mean_of(tasks.iter().map(|t| t.auroc)),
            mean_f1: mean_of(tasks.iter().map(|t| t.macro_f1)),
            tasks,
            routing: Some(routing),
        },
        traces,
    ))
}

/// Stacks per-task adapted features, used by diagnostics that inspect task separability.
pub fn stack_rows(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterKind, AdapterVariant};
    use crate::data::{LabelCode, Split};
    use crate::diffnet::Rng;
    use crate::selector::SelectorConfig;
    use ndarray::array;
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn outputs_from_logits(logits: Vec<Array2<f64>>) -> ModuleOutputs {
        let n = logits[0].nrows();
        ModuleOutputs {
            adapted: logits.iter().map(|_| Array2::zeros((n, 2))).collect(),
            logits,
        }
    }

    #[test]
    fn argmax_with_lowest_index_ties() {
        let s = array![[0.9, 0.3], [0.5, 0.5], [0.1, 0.7], [f64::NAN, 0.2]];
        assert_eq!(choose(&s, false), vec![0, 0, 1, 1]);
        assert_eq!(choose(&array![[0.4, 0.4, 0.1]], true), vec![2]);
        assert_eq!(choose(&array![[0.2, 0.2]], true), vec![0]);
    }

    #[test]
    fn entropy_prefers_confident_head() {
        let p9 = (0.9f64 / 0.1).ln();
        let out = outputs_from_logits(vec![Array2::zeros((1, 3)), Array2::from_elem((1, 3), p9)]);
        let scores = entropy_scores(&out);
        assert!((scores[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((scores[[0, 1]] - 0.3251).abs() < 1e-4);
        assert_eq!(choose(&scores, true), vec![1]);
        let same = outputs_from_logits(vec![Array2::from_elem((1, 2), 0.7); 2]);
        assert_eq!(choose(&entropy_scores(&same), true), vec![0]);
    }

    #[test]
    fn entropy_is_bounded() {
        for x in [-800.0, -5.0, -0.1, 0.0, 0.3, 12.0, 900.0] {
            let h = binary_entropy_from_logit(x);
            assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&h));
        }
    }

    #[test]
    fn memory_cosine_scores() {
        let mut mem = PrototypeMemory::new(2, 1.0).unwrap();
        mem.expand(1).unwrap();
        mem.expand(2).unwrap();
        mem.ema_update(0, &array![[1.0, 1.0]]).unwrap();
        mem.ema_update(1, &array![[1.0, 0.0]]).unwrap();
        let out = ModuleOutputs {
            adapted: vec![array![[2.0, 2.0]], array![[0.0, 3.0]]],
            logits: vec![Array2::zeros((1, 1)); 2],
        };
        let s = memory_scores(&mem, &out).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(s[[0, 1]].abs() < 1e-12);
        let scaled = ModuleOutputs {
            adapted: out.adapted.iter().map(|a| a * 7.5).collect(),
            logits: out.logits.clone(),
        };
        let again = memory_scores(&mem, &scaled).unwrap();
        assert!(again.iter().zip(s.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_prototypes_never_win() {
        let mut mem = PrototypeMemory::new(2, 1.0).unwrap();
        mem.expand(1).unwrap();
        mem.expand(2).unwrap();
        mem.ema_update(1, &array![[0.0, 1.0]]).unwrap();
        let out = ModuleOutputs {
            adapted: vec![array![[3.0, 0.0]], array![[1.0, -5.0]]],
            logits: vec![Array2::zeros((1, 1)); 2],
        };
        let s = memory_scores(&mem, &out).unwrap();
        assert_eq!(s[[0, 0]], f64::NEG_INFINITY);
        assert_eq!(choose(&s, false), vec![1]);
        let mut zero = PrototypeMemory::new(2, 1.0).unwrap();
        zero.expand(1).unwrap();
        assert!(matches!(
            memory_scores(&zero, &outputs_from_logits(vec![Array2::zeros((1, 1))])),
            Err(Error::AllPrototypesZero)
        ));
    }

    fn toy_dataset(task_id: usize, rows: Array2<f32>, labels: Vec<i8>) -> TaskDataset {
        let n = rows.nrows();
        TaskDataset {
            task_id,
            name: format!("task_{}", task_id + 1),
            class_names: vec!["a".into(), "b".into()],
            features: rows,
            labels: Array2::from_shape_fn((n, 2), |(i, c)| {
                LabelCode::from_code(labels[(i * 2 + c) % labels.len()]).unwrap()
            }),
            split: Split::Test,
            metadata: BTreeMap::new(),
        }
    }

    fn toy_modules(rng: &mut Rng) -> Vec<TaskModule> {
        (0..2)
            .map(|k| {
                let mut m = TaskModule::new(
                    k,
                    &format!("task_{}", k + 1),
                    AdapterVariant::new(AdapterKind::Simple).with_bottleneck(2),
                    4,
                    vec!["a".into(), "b".into()],
                    rng,
                )
                .unwrap();
                m.head_mut().randomize(1.0, rng);
                m.freeze();
                m
            })
            .collect()
    }

    #[test]
    fn routing_to_the_true_task_reproduces_oracle_metrics() {
        let mut rng = Rng::seed_from_u64(3);
        let modules = toy_modules(&mut rng);
        let d0 = toy_dataset(
            0,
            Array2::from_shape_fn((6, 4), |(i, j)| (i as f32 - j as f32) * 0.5),
            vec![1, 0, 0, 1, 1, 1, 0, 0],
        );
        let d1 = toy_dataset(
            1,
            Array2::from_shape_fn((5, 4), |(i, j)| (i * j) as f32 * 0.2),
            vec![0, 1, 1, 0, 1, 0],
        );
        let sets = [&d0, &d1];
        let oracle = evaluate_oracle(&modules, &sets).unwrap();

        let mut state = SelectorState::new(4, SelectorConfig::default(), 1.0, 0, &mut rng).unwrap();
        state.expand(1).unwrap();
        state.expand(2).unwrap();
        // With identical class names and a zero-weight selector, every sample ties and routes to
        // task 0; task 0's routed metrics must then equal its oracle metrics.
        let (routed, traces) = evaluate_routed(&modules, Some(&state), &sets, Strategy::Selector).unwrap();
        assert_eq!(routed.tasks[0], oracle.tasks[0]);
        assert_eq!(traces.len(), 11);
        let r = routed.routing.unwrap();
        assert_eq!(r.confusion, vec![vec![6, 0], vec![5, 0]]);
    }

    #[test]
    fn routed_requires_trained_selector() {
        let mut rng = Rng::seed_from_u64(4);
        let modules = toy_modules(&mut rng);
        let d0 = toy_dataset(0, Array2::ones((3, 4)), vec![1, 0]);
        let mut state = SelectorState::new(4, SelectorConfig::default(), 1.0, 0, &mut rng).unwrap();
        state.expand(1).unwrap();
        assert!(matches!(
            evaluate_routed(&modules, Some(&state), &[&d0], Strategy::Selector),
            Err(Error::SelectorUntrained {
                selector_tasks: 1,
                modules: 2
            })
        ));
        assert!(evaluate_routed(&modules, None, &[&d0], Strategy::Entropy).is_ok());
    }

    #[test]
    fn every_sample_gets_one_decision_under_every_strategy() {
        let mut rng = Rng::seed_from_u64(5);
        let modules = toy_modules(&mut rng);
        let mut state = SelectorState::new(4, SelectorConfig::default(), 1.0, 0, &mut rng).unwrap();
        state.expand(1).unwrap();
        state.expand(2).unwrap();
        state.net.network_mut().randomize(0.4, &mut rng);
        let z = Array2::from_shape_fn((9, 4), |(i, j)| ((i + j) as f64).cos());
        state.memory.ema_update(0, &modules[0].adapt(&z).unwrap()).unwrap();
        state.memory.ema_update(1, &modules[1].adapt(&(-&z)).unwrap()).unwrap();
        for strategy in Strategy::ALL {
            let r = route(&modules, Some(&state), &z, strategy).unwrap();
            assert_eq!(r.chosen.len(), 9);
            assert_eq!(r.logits.len(), 9);
            assert!(r.chosen.iter().all(|&j| j < 2));
        }
    }
}
