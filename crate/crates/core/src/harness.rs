//! Gradient-check composites and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};

use crate::adapters::{AdapterKind, AdapterVariant, TaskModule};
use crate::config::KeyValues;
use crate::data::{LabelCode, LabelMatrix};
use crate::diffnet::{grad_check, GradCheckReport, Mode, Objective, Param, Rng};
use crate::error::{Error, Result};
use crate::losses::{selector_loss, task_loss, LossWeights, MaskedTargets, SoftTargetPolicy};
use crate::report::{build_report, write_run, RunReport, Table};
use crate::selector::{SelectorConfig, SelectorNet};
use crate::trainer::{run, RunConfig};

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Adapter + head + task loss on a fixed batch.
pub struct TaskComposite {
    module: TaskModule,
    z: Array2<f64>,
    targets: MaskedTargets,
    weights: LossWeights,
}

impl TaskComposite {
    pub fn new(kind: AdapterKind, seed: u64) -> Result<Self> {
        let (d, classes, batch) = (8, 3, 6);
        let mut rng = Rng::seed_from_u64(seed);
        let variant = AdapterVariant::new(kind).with_bottleneck(4).with_heads(2);
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let mut module = TaskModule::new(0, "gradcheck", variant, d, names, &mut rng)?;
        // Zero-initialised projections would hide their upstream gradients.
        module.adapter_mut().randomize(0.4, &mut rng);
        module.head_mut().randomize(0.4, &mut rng);
        let z = Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.5..1.5));
        let labels: LabelMatrix = Array2::from_shape_fn((batch, classes), |(i, c)| match (i + 2 * c) % 4 {
            0 => LabelCode::Positive,
            1 => LabelCode::Negative,
            2 => LabelCode::Uncertain,
            _ => LabelCode::Missing,
        });
        let targets = MaskedTargets::resolve(&labels, &SoftTargetPolicy::default(), &mut rng);
        Ok(TaskComposite {
            module,
            z,
            targets,
            weights: LossWeights::default(),
        })
    }
}

impl Objective for TaskComposite {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.module.params_mut()
    }

    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = Rng::seed_from_u64(0);
        let (adapter, head) = self.module.networks_mut();
        let adapted = adapter.forward(&self.z, Mode::Train, &mut rng)?;
        let logits = head.forward(&adapted, Mode::Train, &mut rng)?;
        let loss = task_loss(&logits, &self.targets, &adapted, &self.weights)?;
        if with_grad {
            let g = head.backward(&loss.grad_logits)? + &loss.grad_features;
            adapter.backward(&g)?;
        }
        Ok(loss.value)
    }
}

/// Selector + selector loss, including the gradient with respect to its input rows.
pub struct SelectorComposite {
    net: SelectorNet,
    input: Param,
    tasks: Vec<usize>,
    current_rows: usize,
    prototype: ndarray::Array1<f64>,
    lambda_mem: f64,
    dropout_seed: u64,
}

impl SelectorComposite {
    pub fn new(seed: u64) -> Result<Self> {
        let (d, k, batch, current) = (6, 3, 7, 4);
        let mut rng = Rng::seed_from_u64(seed);
        let config = SelectorConfig {
            hidden: 10,
            ..SelectorConfig::default()
        };
        let mut net = SelectorNet::new(d, config, &mut rng)?;
        for t in 1..=k {
            net.expand(t)?;
        }
        net.network_mut().randomize(0.5, &mut rng);
        let input = Param::new(
            "input",
            Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0)),
        );
        let mut tasks = vec![k - 1; current];
        tasks.extend((0..batch - current).map(|i| i % (k - 1)));
        Ok(SelectorComposite {
            net,
            input,
            tasks,
            current_rows: current,
            prototype: ndarray::Array1::from_shape_fn(d, |j| 0.1 * j as f64 - 0.2),
            lambda_mem: 0.5,
            dropout_seed: seed ^ 0x5eed,
        })
    }
}

impl Objective for SelectorComposite {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.net.params_mut();
        p.push(&mut self.input);
        p
    }

    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        // Same dropout mask on every evaluation.
        let mut rng = Rng::seed_from_u64(self.dropout_seed);
        let logits = self.net.forward(&self.input.value, Mode::Train, &mut rng)?;
        let loss = selector_loss(
            &logits,
            &self.tasks,
            &self.input.value,
            0..self.current_rows,
            self.prototype.view(),
            self.lambda_mem,
        )?;
        if with_grad {
            let g = self.net.backward(&loss.grad_logits)? + &loss.grad_features;
            self.input.grad += &g;
        }
        Ok(loss.value)
    }
}

pub fn composites(seed: u64) -> Result<Vec<(String, Box<dyn Objective>)>> {
    let mut out: Vec<(String, Box<dyn Objective>)> = Vec::new();
    for kind in AdapterKind::ALL {
        out.push((
            format!("{kind}+head+task_loss"),
            Box::new(TaskComposite::new(kind, seed)?),
        ));
    }
    out.push(("selector+selector_loss".into(), Box::new(SelectorComposite::new(seed)?)));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub results: Vec<(String, GradCheckReport)>,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|(_, r)| r.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|(_, r)| r.max_rel_error >= self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r) in &self.results {
            let status = if r.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            let worst = r
                .worst
                .as_ref()
                .map(|(p, i)| format!(" (worst {p}[{i}])"))
                .unwrap_or_default();
            writeln!(
                f,
                "{status:4} {name:28} max_rel_error {:.3e} over {} entries{worst}",
                r.max_rel_error, r.checked
            )?;
        }
        Ok(())
    }
}

pub fn check_composites(
    list: Vec<(String, Box<dyn Objective>)>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckSummary> {
    let mut results = Vec::with_capacity(list.len());
    for (name, mut objective) in list {
        results.push((name, grad_check(objective.as_mut(), step)?));
    }
    Ok(GradCheckSummary { results, tolerance })
}

pub fn run_gradcheck(seed: u64) -> Result<GradCheckSummary> {
    check_composites(composites(seed)?, GRADCHECK_STEP, GRADCHECK_TOLERANCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    ReplayCapacity,
    Adapter,
    Routing,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replay-capacity" => Ok(AblationAxis::ReplayCapacity),
            "adapter" => Ok(AblationAxis::Adapter),
            "routing" => Ok(AblationAxis::Routing),
            other => Err(Error::config("axis", format!("unknown ablation axis `{other}`"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::ReplayCapacity => "replay-capacity",
            AblationAxis::Adapter => "adapter",
            AblationAxis::Routing => "routing",
        })
    }
}

impl AblationAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::ReplayCapacity => &["0", "1000", "2500", "5000", "10000"],
            AblationAxis::Adapter => &["simple", "continuum", "hope"],
            AblationAxis::Routing => &["off", "on"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The base configuration with this axis set to `value`.
    pub fn apply(self, base: &KeyValues, value: &str) -> Result<KeyValues> {
        let mut kv = base.clone();
        match self {
            AblationAxis::ReplayCapacity => {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::config("values", format!("`{value}` is not a capacity")))?;
                kv.set("buffer_capacity", value);
            }
            AblationAxis::Adapter => {
                let kind: AdapterKind = value.parse()?;
                kv.set("variant", kind.to_string());
            }
            AblationAxis::Routing => match value {
                "off" => kv.set("buffer_capacity", "0"),
                "on" => {
                    let cap = RunConfig::from_key_values(base)?.buffer_capacity;
                    if cap == 0 {
                        return Err(Error::config(
                            "buffer_capacity",
                            "replay `on` needs a positive capacity",
                        ));
                    }
                }
                other => {
                    return Err(Error::config(
                        "values",
                        format!("routing values are on/off, got `{other}`"),
                    ))
                }
            },
        }
        RunConfig::from_key_values(&kv)?;
        Ok(kv)
    }
}

/// Directory of one sweep point.
pub fn point_dir(out: &Path, axis: AblationAxis, value: &str) -> PathBuf {
    out.join("runs").join(format!("{axis}_{value}"))
}

/// Trains and writes a full run directory for `kv`.
pub fn run_point(kv: &KeyValues, run_dir: &Path) -> Result<RunReport> {
    let config = RunConfig::from_key_values(kv)?;
    let tasks = config.load_tasks()?;
    let state = run(config, tasks)?;
    let (report, _) = build_report(&state)?;
    write_run(run_dir, &state, &report, None)?;
    Ok(report)
}

fn routing_cell<'a>(report: &'a RunReport, strategy: &str) -> Option<&'a crate::metrics::RoutingAccuracy> {
    report.routed.get(strategy).and_then(|s| s.routing.as_ref())
}

fn frac(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map(|x| format!("{x:.3}"))
        .unwrap_or_default()
}

/// The sweep table for `axis`, one row per point in input order.
pub fn sweep_table(axis: AblationAxis, points: &[(String, RunReport)]) -> Table {
    let task_order = points.first().map(|(_, r)| r.task_order.clone()).unwrap_or_default();
    match axis {
        AblationAxis::ReplayCapacity => {
            let mut header = vec!["capacity".to_string()];
            header.extend(task_order.iter().map(|n| format!("acc_{n}")));
            header.push("overall_routing_acc".into());
            let mut t = Table::new(header);
            for (value, report) in points {
                let mut row = vec![value.clone()];
                match routing_cell(report, "selector") {
                    Some(r) => {
                        row.extend(r.per_task.iter().map(|&v| frac(Some(v))));
                        row.push(frac(Some(r.overall)));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), task_order.len() + 1)),
                }
                t.push(row);
            }
            t
        }
        AblationAxis::Adapter => {
            let mut header = vec!["adapter".to_string()];
            header.extend(task_order.iter().map(|n| format!("auc_{n}")));
            header.extend(["overall_routing_acc".to_string(), "memory_mb".to_string()]);
            let mut t = Table::new(header);
            for (value, report) in points {
                let mut row = vec![value.clone()];
                let tasks = report
                    .routed
                    .get("selector")
                    .map(|s| s.tasks.clone())
                    .unwrap_or_default();
                for k in 0..task_order.len() {
                    row.push(frac(tasks.get(k).and_then(|t| t.auroc)));
                }
                row.push(frac(routing_cell(report, "selector").map(|r| r.overall)));
                row.push(format!("{:.4}", report.params.trainable_mb()));
                t.push(row);
            }
            t
        }
        AblationAxis::Routing => {
            let mut t = Table::new(["setting", "routing", "overall_routing_acc_pct"]);
            for (value, report) in points {
                let setting = if value == "off" {
                    "prototypes_only"
                } else {
                    "prototypes_replay"
                };
                for strategy in ["selector", "memory", "entropy"] {
                    let overall = routing_cell(report, strategy).map(|r| format!("{:.1}", 100.0 * r.overall));
                    t.push([setting.to_string(), strategy.to_string(), overall.unwrap_or_default()]);
                }
            }
            t
        }
    }
}

/// Groups reports by point label, keeping input order.
pub fn ordered_points(values: &[String], reports: BTreeMap<String, RunReport>) -> Result<Vec<(String, RunReport)>> {
    let mut reports = reports;
    values
        .iter()
        .map(|v| {
            reports
                .remove(v)
                .map(|r| (v.clone(), r))
                .ok_or_else(|| Error::Checkpoint(format!("missing sweep point `{v}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_composites_pass() {
        let summary = run_gradcheck(1337).unwrap();
        assert_eq!(summary.results.len(), 4);
        assert!(summary.passed(), "{summary}");
    }

    struct Corrupted(Box<dyn Objective>);

    impl Objective for Corrupted {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.0.params_mut()
        }

        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            let v = self.0.evaluate(with_grad)?;
            if with_grad {
                if let Some(p) = self.0.params_mut().into_iter().next() {
                    p.grad *= 1.5;
                }
            }
            Ok(v)
        }
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let list: Vec<(String, Box<dyn Objective>)> = composites(3)
            .unwrap()
            .into_iter()
            .map(|(n, o)| {
                if n.starts_with("hope") {
                    (n, Box::new(Corrupted(o)) as Box<dyn Objective>)
                } else {
                    (n, o)
                }
            })
            .collect();
        let summary = check_composites(list, GRADCHECK_STEP, GRADCHECK_TOLERANCE).unwrap();
        assert_eq!(summary.failures(), vec!["hope+head+task_loss"]);
        assert!(summary.to_string().contains("FAIL hope+head+task_loss"));
    }

    #[test]
    fn axis_values_apply_to_the_config() {
        let base = KeyValues::new();
        let kv = AblationAxis::ReplayCapacity.apply(&base, "2500").unwrap();
        assert_eq!(kv.get("buffer_capacity"), Some("2500"));
        assert_eq!(
            AblationAxis::Routing
                .apply(&base, "off")
                .unwrap()
                .get("buffer_capacity"),
            Some("0")
        );
        assert!(AblationAxis::Adapter.apply(&base, "huge").is_err());
        assert!(AblationAxis::ReplayCapacity.apply(&base, "-1").is_err());
        assert_eq!(AblationAxis::ReplayCapacity.default_values().len(), 5);
    }
}
