//! Run reports, CSV tables and the on-disk run directory.
//!
//! ```text
//! <run>/config.echo            effective configuration
//! <run>/report.txt             RunReport as pretty JSON
//! <run>/tables/*.csv
//! <run>/checkpoints/task_<k>.{ckpt,manifest}
//! <run>/checkpoints/selector.{ckpt,manifest}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::TaskModule;
use crate::config::KeyValues;
use crate::data::TaskDataset;
use crate::diffnet::CheckpointManifest;
use crate::error::{Error, Result};
use crate::metrics::forgetting;
use crate::routing::{evaluate_oracle, evaluate_routed, EvalSection, RoutingTrace, Strategy};
use crate::selector::SelectorState;
use crate::trainer::{PhaseSnapshot, RunConfig, RunMode, RunState, TaskHistory};

pub const BYTES_PER_PARAM: usize = std::mem::size_of::<f64>();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskForgetting {
    pub task_id: usize,
    pub name: String,
    pub after_own: Option<f64>,
    pub after_last: Option<f64>,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub oracle: Vec<TaskForgetting>,
    pub routed: Vec<TaskForgetting>,
    pub oracle_mean: Option<f64>,
    pub routed_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    pub bytes_per_param: usize,
    pub adapters: Vec<usize>,
    pub heads: Vec<usize>,
    pub selector: usize,
    /// EMA-maintained, not gradient-trained.
    pub prototypes: usize,
    pub trainable_params: usize,
    pub trainable_bytes: usize,
}

impl ParamAccounting {
    pub fn of(modules: &[TaskModule], selector: &SelectorState) -> Self {
        let adapters: Vec<usize> = modules.iter().map(TaskModule::adapter_param_count).collect();
        let heads: Vec<usize> = modules.iter().map(TaskModule::head_param_count).collect();
        let sel = selector.net.param_count();
        let trainable = adapters.iter().sum::<usize>() + heads.iter().sum::<usize>() + sel;
        ParamAccounting {
            bytes_per_param: BYTES_PER_PARAM,
            adapters,
            heads,
            selector: sel,
            prototypes: selector.memory.rows().len(),
            trainable_params: trainable,
            trainable_bytes: trainable * BYTES_PER_PARAM,
        }
    }

    pub fn trainable_mb(&self) -> f64 {
        self.trainable_bytes as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub config: BTreeMap<String, String>,
    pub task_order: Vec<String>,
    pub phases: Vec<PhaseSnapshot>,
    /// `None` for single-task and joint runs.
    pub forgetting: Option<ForgettingReport>,
    pub oracle: EvalSection,
    pub routed: BTreeMap<String, EvalSection>,
    /// Strategies that could not be evaluated, with the reason.
    pub unavailable: BTreeMap<String, String>,
    pub params: ParamAccounting,
    pub training: Vec<TaskHistory>,
}

fn forgetting_rows(
    phases: &[PhaseSnapshot],
    names: &[String],
    pick: fn(&PhaseSnapshot) -> &[Option<f64>],
) -> Vec<TaskForgetting> {
    let last = phases.last().map(pick).unwrap_or(&[]);
    (0..names.len().saturating_sub(1))
        .map(|j| {
            let own = phases.get(j).and_then(|p| pick(p).get(j).copied().flatten());
            let later = last.get(j).copied().flatten();
            TaskForgetting {
                task_id: j,
                name: names[j].clone(),
                after_own: own,
                after_last: later,
                forgetting: own.zip(later).map(|(a, b)| forgetting(a, b)),
            }
        })
        .collect()
}

fn mean_forgetting(rows: &[TaskForgetting]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.forgetting).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub oracle: EvalSection,
    pub routed: BTreeMap<String, EvalSection>,
    /// Strategy name to the reason it could not run.
    pub unavailable: BTreeMap<String, String>,
    pub traces: BTreeMap<Strategy, Vec<RoutingTrace>>,
}

/// Evaluation sections for a set of frozen modules, every strategy attempted.
pub fn evaluate_all(
    modules: &[TaskModule],
    selector: Option<&SelectorState>,
    datasets: &[&TaskDataset],
) -> Result<Evaluation> {
    let oracle = evaluate_oracle(modules, datasets)?;
    let mut routed = BTreeMap::new();
    let mut unavailable = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for strategy in Strategy::ALL {
        match evaluate_routed(modules, selector, datasets, strategy) {
            Ok((section, t)) => {
                routed.insert(strategy.to_string(), section);
                traces.insert(strategy, t);
            }
            Err(e @ (Error::AllPrototypesZero | Error::SelectorUntrained { .. })) => {
                log::warn!("{strategy} routing unavailable: {e}");
                unavailable.insert(strategy.to_string(), e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Evaluation {
        oracle,
        routed,
        unavailable,
        traces,
    })
}

pub fn build_report(state: &RunState) -> Result<(RunReport, BTreeMap<Strategy, Vec<RoutingTrace>>)> {
    let names: Vec<String> = state.tasks.iter().map(|t| t.name().to_string()).collect();
    let Evaluation {
        oracle,
        routed,
        unavailable,
        traces,
    } = evaluate_all(&state.modules, Some(&state.selector), &state.test_sets())?;
    let forgetting = (state.config.mode == RunMode::Sequential && names.len() > 1).then(|| {
        let o = forgetting_rows(&state.phases, &names, |p| &p.oracle_auroc);
        let r = forgetting_rows(&state.phases, &names, |p| &p.routed_auroc);
        ForgettingReport {
            oracle_mean: mean_forgetting(&o),
            routed_mean: mean_forgetting(&r),
            oracle: o,
            routed: r,
        }
    });
    let report = RunReport {
        mode: state.config.mode.to_string(),
        config: state.config.to_key_values().entries().clone(),
        task_order: names,
        phases: state.phases.clone(),
        forgetting,
        oracle,
        routed,
        unavailable,
        params: ParamAccounting::of(&state.modules, &state.selector),
        training: state.histories.clone(),
    };
    Ok((report, traces))
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable report: {e}")))
    }
}

fn num(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map(|x| format!("{x:.6}"))
        .unwrap_or_default()
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", 100.0 * v)
    } else {
        String::new()
    }
}

/// A header row plus records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let bad = |e: csv::Error| Error::Dataset(format!("csv: {e}"));
        w.write_record(&self.header).map_err(bad)?;
        for r in &self.rows {
            w.write_record(r).map_err(bad)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8 input"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv()?.as_bytes())
    }
}

/// Per-phase AUROC matrix with forgetting and trainable size.
pub fn phase_table(report: &RunReport) -> Table {
    let mut header = vec!["phase".to_string(), "trained".to_string()];
    header.extend(report.task_order.iter().map(|n| format!("auroc_{n}")));
    header.extend([
        "forgetting".to_string(),
        "routing_overall".to_string(),
        "trainable_mb".to_string(),
    ]);
    let mut t = Table::new(header);
    for (p, snap) in report.phases.iter().enumerate() {
        let mut row = vec![(p + 1).to_string(), snap.trained.clone()];
        for k in 0..report.task_order.len() {
            row.push(num(snap.routed_auroc.get(k).copied().flatten()));
        }
        let f = match (&report.forgetting, p) {
            (Some(f), p) if p > 0 && p + 1 == report.phases.len() => num(f.routed_mean),
            _ => String::new(),
        };
        row.push(f);
        row.push(snap.routing_overall.map(pct).unwrap_or_default());
        let seen = snap.module_digests.len();
        let module_params =
            report.params.adapters[..seen].iter().sum::<usize>() + report.params.heads[..seen].iter().sum::<usize>();
        let bytes = (module_params + report.params.selector) * report.params.bytes_per_param;
        row.push(format!("{:.4}", bytes as f64 / 1e6));
        t.push(row);
    }
    t
}

/// One row per strategy: per-task routing rate, overall rate, mean AUROC.
pub fn routing_table(report: &RunReport) -> Table {
    routing_rows(&report.task_order, &report.routed)
}

pub fn routing_rows(task_order: &[String], sections: &BTreeMap<String, EvalSection>) -> Table {
    let mut header = vec!["strategy".to_string()];
    header.extend(task_order.iter().map(|n| format!("acc_{n}")));
    header.extend(["overall".to_string(), "auroc".to_string(), "macro_f1".to_string()]);
    let mut t = Table::new(header);
    for (name, section) in sections {
        let mut row = vec![name.clone()];
        if let Some(r) = &section.routing {
            row.extend(r.per_task.iter().map(|&v| pct(v)));
            row.push(pct(r.overall));
        }
        row.push(num(section.mean_auroc));
        row.push(num(section.mean_f1));
        t.push(row);
    }
    t
}

/// `rows = true task, columns = routed task`.
pub fn confusion_table(report: &RunReport, strategy: &str) -> Option<Table> {
    let r = report.routed.get(strategy)?.routing.as_ref()?;
    let mut header = vec!["true_task".to_string()];
    header.extend(report.task_order.iter().map(|n| format!("routed_{n}")));
    let mut t = Table::new(header);
    for (name, row) in report.task_order.iter().zip(&r.confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(usize::to_string));
        t.push(rec);
    }
    Some(t)
}

/// Oracle and routed per-task metrics.
pub fn task_metrics_table(report: &RunReport) -> Table {
    let mut t = Table::new([
        "mode",
        "task",
        "samples",
        "auroc",
        "macro_f1",
        "skipped_classes",
        "excluded_uncertain",
    ]);
    for section in std::iter::once(&report.oracle).chain(report.routed.values()) {
        for task in &section.tasks {
            t.push([
                section.mode.clone(),
                task.name.clone(),
                task.samples.to_string(),
                num(task.auroc),
                num(task.macro_f1),
                task.skipped_classes.to_string(),
                task.excluded_uncertain.to_string(),
            ]);
        }
    }
    t
}

pub fn params_table(report: &RunReport) -> Table {
    let p = &report.params;
    let mut t = Table::new(["component", "params", "bytes"]);
    for (k, name) in report.task_order.iter().enumerate() {
        t.push([
            format!("adapter_{name}"),
            p.adapters[k].to_string(),
            (p.adapters[k] * p.bytes_per_param).to_string(),
        ]);
        t.push([
            format!("head_{name}"),
            p.heads[k].to_string(),
            (p.heads[k] * p.bytes_per_param).to_string(),
        ]);
    }
    t.push([
        "selector".to_string(),
        p.selector.to_string(),
        (p.selector * p.bytes_per_param).to_string(),
    ]);
    t.push([
        "trainable_total".to_string(),
        p.trainable_params.to_string(),
        p.trainable_bytes.to_string(),
    ]);
    t
}

pub fn trace_table(traces: &[RoutingTrace], task_order: &[String]) -> Table {
    let mut header = vec!["task".to_string(), "sample".to_string()];
    header.extend(task_order.iter().map(|n| format!("score_{n}")));
    header.push("chosen".to_string());
    let mut t = Table::new(header);
    for tr in traces {
        let mut row = vec![task_order[tr.task_id].clone(), tr.sample.to_string()];
        row.extend(tr.scores.iter().map(|s| format!("{s:.9}")));
        row.push(task_order[tr.chosen].clone());
        t.push(row);
    }
    t
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn table_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("tables")
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn task_checkpoint_paths(run_dir: &Path, k: usize) -> (PathBuf, PathBuf) {
    let dir = checkpoint_dir(run_dir);
    (
        dir.join(format!("task_{}.ckpt", k + 1)),
        dir.join(format!("task_{}.manifest", k + 1)),
    )
}

pub fn selector_checkpoint_paths(run_dir: &Path) -> (PathBuf, PathBuf) {
    let dir = checkpoint_dir(run_dir);
    (dir.join("selector.ckpt"), dir.join("selector.manifest"))
}

/// Writes the report tables. Traces are written only when given.
pub fn write_tables(
    run_dir: &Path,
    report: &RunReport,
    traces: Option<&BTreeMap<Strategy, Vec<RoutingTrace>>>,
) -> Result<()> {
    let dir = table_dir(run_dir);
    phase_table(report).write(&dir.join("phases.csv"))?;
    routing_table(report).write(&dir.join("routing.csv"))?;
    task_metrics_table(report).write(&dir.join("task_metrics.csv"))?;
    params_table(report).write(&dir.join("params.csv"))?;
    for strategy in report.routed.keys() {
        if let Some(t) = confusion_table(report, strategy) {
            t.write(&dir.join(format!("confusion_{strategy}.csv")))?;
        }
    }
    if let Some(traces) = traces {
        for (strategy, tr) in traces {
            trace_table(tr, &report.task_order).write(&dir.join(format!("trace_{strategy}.csv")))?;
        }
    }
    Ok(())
}

pub fn write_checkpoints(run_dir: &Path, modules: &[TaskModule], selector: &SelectorState) -> Result<()> {
    for (k, m) in modules.iter().enumerate() {
        let (blob, manifest) = task_checkpoint_paths(run_dir, k);
        write_file(&blob, &m.to_blob())?;
        write_file(&manifest, m.manifest().to_text().as_bytes())?;
    }
    let (blob, manifest) = selector_checkpoint_paths(run_dir);
    write_file(&blob, &selector.to_blob())?;
    write_file(&manifest, selector.manifest().to_text().as_bytes())
}

/// Writes a complete run directory.
pub fn write_run(
    run_dir: &Path,
    state: &RunState,
    report: &RunReport,
    traces: Option<&BTreeMap<Strategy, Vec<RoutingTrace>>>,
) -> Result<()> {
    write_file(
        &run_dir.join("config.echo"),
        state.config.to_key_values().to_text().as_bytes(),
    )?;
    write_checkpoints(run_dir, &state.modules, &state.selector)?;
    write_tables(run_dir, report, traces)?;
    write_file(&run_dir.join("report.txt"), report.to_text().as_bytes())
}

pub fn read_report(run_dir: &Path) -> Result<RunReport> {
    let path = run_dir.join("report.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunReport::parse(&text)
}

fn read_manifest_file(path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CheckpointManifest::parse(&text)
}

/// A trained run as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub config: RunConfig,
    pub modules: Vec<TaskModule>,
    /// Absent when the selector checkpoint was removed.
    pub selector: Option<SelectorState>,
}

pub fn load_run(run_dir: &Path) -> Result<StoredRun> {
    let config = RunConfig::from_key_values(&KeyValues::load(&run_dir.join("config.echo"))?)?;
    load_run_with(run_dir, config)
}

/// Loads checkpoints with an explicit configuration (e.g. with overrides applied).
pub fn load_run_with(run_dir: &Path, config: RunConfig) -> Result<StoredRun> {
    let mut modules = Vec::with_capacity(config.tasks.len());
    for k in 0..config.tasks.len() {
        let (blob_path, manifest_path) = task_checkpoint_paths(run_dir, k);
        let manifest = read_manifest_file(&manifest_path)?;
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let module = TaskModule::from_checkpoint(&manifest, &blob)?;
        module.verify_frozen()?;
        modules.push(module);
    }
    let (blob_path, manifest_path) = selector_checkpoint_paths(run_dir);
    let selector = if blob_path.exists() && manifest_path.exists() {
        let manifest = read_manifest_file(&manifest_path)?;
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Some(SelectorState::from_checkpoint(&manifest, &blob)?)
    } else {
        None
    };
    Ok(StoredRun {
        config,
        modules,
        selector,
    })
}
