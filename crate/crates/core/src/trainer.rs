//! Run configuration and the sequential and joint training drivers.
//!
//! Each stochastic purpose (module init, task training, selector training)
//! draws from its own ChaCha stream derived from the run seed, so changing
//! one part of the pipeline never perturbs the draws of another.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterVariant, TaskModule};
use crate::config::KeyValues;
use crate::data::{load_task_splits, LabelCode, TaskDataset, TaskSplits};
use crate::diffnet::{ActivationKind, AdamW, AdamWConfig, Mode, Rng};
use crate::error::{Error, Result};
use crate::losses::{
    masked_bce_targets, selector_loss, task_loss, LossWeights, MaskedTargets, ResampleMode, SelectorLoss,
    SoftTargetPolicy, TaskLoss,
};
use crate::routing::{evaluate_oracle, evaluate_routed, Strategy};
use crate::selector::{mixed_batch, MixedBatch, ReplayBuffer, SelectorConfig, SelectorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Sequential,
    Joint,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Sequential => "sequential",
            RunMode::Joint => "joint",
        })
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(RunMode::Sequential),
            "joint" => Ok(RunMode::Joint),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// When a selector phase's own features become visible to replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayInsertion {
    /// Staged during the phase and committed when it ends.
    Deferred,
    /// Pushed after every batch.
    Inline,
}

impl fmt::Display for ReplayInsertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayInsertion::Deferred => "deferred",
            ReplayInsertion::Inline => "inline",
        })
    }
}

impl FromStr for ReplayInsertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deferred" => Ok(ReplayInsertion::Deferred),
            "inline" => Ok(ReplayInsertion::Inline),
            other => Err(Error::config("replay_insertion", format!("unknown value `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Task base paths (`<base>.train.manifest` etc.), in training order.
    pub tasks: Vec<String>,
    /// Prefix joined to every relative task path.
    pub data_dir: Option<PathBuf>,
    pub mode: RunMode,
    pub variant: AdapterVariant,
    pub epochs: usize,
    pub selector_epochs: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_selector: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub soft_targets: SoftTargetPolicy,
    pub ema_rate: f64,
    pub buffer_capacity: usize,
    pub replay_ratio: f64,
    pub replay_insertion: ReplayInsertion,
    pub selector: SelectorConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tasks: Vec::new(),
            data_dir: None,
            mode: RunMode::Sequential,
            variant: AdapterVariant::new(AdapterKind::Continuum),
            epochs: 20,
            selector_epochs: 20,
            batch_size: 32,
            lr_adapter: 1e-4,
            lr_selector: 5e-4,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            soft_targets: SoftTargetPolicy::default(),
            ema_rate: 0.05,
            buffer_capacity: 5000,
            replay_ratio: 0.5,
            replay_insertion: ReplayInsertion::Deferred,
            selector: SelectorConfig::default(),
            seed: 1337,
        }
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "tasks",
        "data_dir",
        "mode",
        "variant",
        "bottleneck",
        "branches",
        "heads",
        "activation",
        "epochs",
        "selector_epochs",
        "batch_size",
        "lr_adapter",
        "lr_selector",
        "weight_decay",
        "lambda_ortho",
        "lambda_mem",
        "soft_alpha",
        "soft_beta",
        "soft_resample",
        "ema_rate",
        "buffer_capacity",
        "replay_ratio",
        "replay_insertion",
        "selector_hidden",
        "selector_dropout",
        "seed",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = RunConfig::default();
        let tasks = kv
            .get("tasks")
            .map(|t| {
                t.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        let data_dir = kv.get("data_dir").filter(|s| !s.is_empty()).map(PathBuf::from);
        let variant = AdapterVariant {
            kind: kv.parsed_or("variant", d.variant.kind)?,
            bottleneck: kv.parsed_or("bottleneck", d.variant.bottleneck)?,
            branches: kv.parsed_or("branches", d.variant.branches)?,
            heads: kv.parsed_or("heads", d.variant.heads)?,
            activation: kv.parsed_or::<ActivationKind>("activation", d.variant.activation)?,
        };
        let cfg = RunConfig {
            tasks,
            data_dir,
            mode: kv.parsed_or("mode", d.mode)?,
            variant,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            selector_epochs: kv.parsed_or("selector_epochs", d.selector_epochs)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            lr_adapter: kv.parsed_or("lr_adapter", d.lr_adapter)?,
            lr_selector: kv.parsed_or("lr_selector", d.lr_selector)?,
            weight_decay: kv.parsed_or("weight_decay", d.weight_decay)?,
            weights: LossWeights {
                lambda_ortho: kv.parsed_or("lambda_ortho", d.weights.lambda_ortho)?,
                lambda_mem: kv.parsed_or("lambda_mem", d.weights.lambda_mem)?,
            },
            soft_targets: SoftTargetPolicy {
                alpha: kv.parsed_or("soft_alpha", d.soft_targets.alpha)?,
                beta: kv.parsed_or("soft_beta", d.soft_targets.beta)?,
                resample: kv.parsed_or::<ResampleMode>("soft_resample", d.soft_targets.resample)?,
            },
            ema_rate: kv.parsed_or("ema_rate", d.ema_rate)?,
            buffer_capacity: kv.parsed_or("buffer_capacity", d.buffer_capacity)?,
            replay_ratio: kv.parsed_or("replay_ratio", d.replay_ratio)?,
            replay_insertion: kv.parsed_or("replay_insertion", d.replay_insertion)?,
            selector: SelectorConfig {
                hidden: kv.parsed_or("selector_hidden", d.selector.hidden)?,
                dropout: kv.parsed_or("selector_dropout", d.selector.dropout)?,
                activation: d.selector.activation,
            },
            seed: kv.parsed_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration, every key present.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let v = &self.variant;
        kv.set("tasks", self.tasks.join(","));
        kv.set(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv.set("mode", self.mode.to_string());
        kv.set("variant", v.kind.to_string());
        kv.set("bottleneck", v.bottleneck.to_string());
        kv.set("branches", v.branches.to_string());
        kv.set("heads", v.heads.to_string());
        kv.set("activation", v.activation.to_string());
        kv.set("epochs", self.epochs.to_string());
        kv.set("selector_epochs", self.selector_epochs.to_string());
        kv.set("batch_size", self.batch_size.to_string());
        kv.set("lr_adapter", self.lr_adapter.to_string());
        kv.set("lr_selector", self.lr_selector.to_string());
        kv.set("weight_decay", self.weight_decay.to_string());
        kv.set("lambda_ortho", self.weights.lambda_ortho.to_string());
        kv.set("lambda_mem", self.weights.lambda_mem.to_string());
        kv.set("soft_alpha", self.soft_targets.alpha.to_string());
        kv.set("soft_beta", self.soft_targets.beta.to_string());
        kv.set("soft_resample", self.soft_targets.resample.to_string());
        kv.set("ema_rate", self.ema_rate.to_string());
        kv.set("buffer_capacity", self.buffer_capacity.to_string());
        kv.set("replay_ratio", self.replay_ratio.to_string());
        kv.set("replay_insertion", self.replay_insertion.to_string());
        kv.set("selector_hidden", self.selector.hidden.to_string());
        kv.set("selector_dropout", self.selector.dropout.to_string());
        kv.set("seed", self.seed.to_string());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (key, lr) in [("lr_adapter", self.lr_adapter), ("lr_selector", self.lr_selector)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(
                    key,
                    format!("must be a finite non-negative rate, got {lr}"),
                ));
            }
        }
        for (key, w) in [
            ("weight_decay", self.weight_decay),
            ("lambda_ortho", self.weights.lambda_ortho),
            ("lambda_mem", self.weights.lambda_mem),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, format!("must be finite and non-negative, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(Error::config(
                "replay_ratio",
                format!("must lie in [0, 1], got {}", self.replay_ratio),
            ));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::config(
                "ema_rate",
                format!("must lie in (0, 1], got {}", self.ema_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.selector.dropout) {
            return Err(Error::config("selector_dropout", "must lie in [0, 1)"));
        }
        if self.selector.hidden == 0 {
            return Err(Error::config("selector_hidden", "must be positive"));
        }
        self.soft_targets.validate()
    }

    pub fn task_paths(&self) -> Vec<PathBuf> {
        self.tasks
            .iter()
            .map(|t| match &self.data_dir {
                Some(dir) => dir.join(t),
                None => PathBuf::from(t),
            })
            .collect()
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskSplits>> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        self.task_paths()
            .iter()
            .enumerate()
            .map(|(k, p)| load_task_splits(p, k))
            .collect()
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_TASK: u64 = 2;
const STREAM_SELECTOR_INIT: u64 = 3;
const STREAM_SELECTOR: u64 = 4;
const STREAM_JOINT: u64 = 5;

fn stream(seed: u64, purpose: u64, task: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | task as u64);
    rng
}

/// Shuffled mini-batches; a trailing single row joins the previous batch.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskEpoch {
    pub loss: f64,
    pub bce: f64,
    pub ortho: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorEpoch {
    pub loss: f64,
    pub ce: f64,
    pub mem: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskHistory {
    pub task_id: usize,
    pub name: String,
    pub task_epochs: Vec<TaskEpoch>,
    pub selector_epochs: Vec<SelectorEpoch>,
    /// Masked BCE over the whole train split after freezing, uncertain cells at `(α+β)/2`.
    pub final_train_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSnapshot {
    pub phase: usize,
    pub trained: String,
    /// Task-known test AUROC of every task seen so far.
    pub oracle_auroc: Vec<Option<f64>>,
    /// Selector-routed test AUROC of every task seen so far.
    pub routed_auroc: Vec<Option<f64>>,
    pub routing_overall: Option<f64>,
    pub module_digests: Vec<String>,
}

/// Everything a finished (or in-progress) run holds.
#[derive(Debug, Clone)]
pub struct RunState {
    pub config: RunConfig,
    pub tasks: Vec<TaskSplits>,
    pub modules: Vec<TaskModule>,
    pub selector: SelectorState,
    pub phases: Vec<PhaseSnapshot>,
    pub histories: Vec<TaskHistory>,
}

#[derive(Default)]
struct Mean<T> {
    sum: T,
    n: usize,
}

impl Mean<TaskEpoch> {
    fn add(&mut self, l: &TaskLoss) {
        self.sum.loss += l.value;
        self.sum.bce += l.bce;
        self.sum.ortho += l.ortho;
        self.n += 1;
    }

    fn finish(&self) -> TaskEpoch {
        let n = self.n.max(1) as f64;
        TaskEpoch {
            loss: self.sum.loss / n,
            bce: self.sum.bce / n,
            ortho: self.sum.ortho / n,
        }
    }
}

impl Mean<SelectorEpoch> {
    fn add(&mut self, l: &SelectorLoss) {
        self.sum.loss += l.value;
        self.sum.ce += l.ce;
        self.sum.mem += l.mem;
        self.n += 1;
    }

    fn finish(&self) -> SelectorEpoch {
        let n = self.n.max(1) as f64;
        SelectorEpoch {
            loss: self.sum.loss / n,
            ce: self.sum.ce / n,
            mem: self.sum.mem / n,
        }
    }
}

fn check_loss(value: f64, task: usize, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            task,
            epoch,
            batch,
            value,
        })
    }
}

/// One optimizer step on a task's adapter and head.
fn task_step(
    module: &mut TaskModule,
    opt: &mut AdamW,
    z: &Array2<f64>,
    targets: &MaskedTargets,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<TaskLoss> {
    let weights = if z.nrows() < 2 {
        LossWeights {
            lambda_ortho: 0.0,
            ..*weights
        }
    } else {
        *weights
    };
    let (adapter, head) = module.networks_mut();
    let adapted = adapter.forward(z, Mode::Train, rng)?;
    let logits = head.forward(&adapted, Mode::Train, rng)?;
    let loss = task_loss(&logits, targets, &adapted, &weights)?;
    if loss.value.is_finite() {
        let grad_adapted = head.backward(&loss.grad_logits)? + &loss.grad_features;
        adapter.backward(&grad_adapted)?;
        opt.step(module.params_mut())?;
    }
    Ok(loss)
}

/// One optimizer step on the selector; the prototype enters as a constant.
fn selector_step(
    state: &mut SelectorState,
    opt: &mut AdamW,
    batch: &MixedBatch,
    task_id: usize,
    lambda_mem: f64,
    rng: &mut Rng,
) -> Result<SelectorLoss> {
    let prototype = state.memory.row(task_id)?.to_owned();
    let logits = state.net.forward(&batch.features, Mode::Train, rng)?;
    let loss = selector_loss(
        &logits,
        &batch.tasks,
        &batch.features,
        0..batch.current_rows,
        prototype.view(),
        lambda_mem,
    )?;
    if loss.value.is_finite() {
        state.net.backward(&loss.grad_logits)?;
        opt.step(state.net.params_mut())?;
    }
    Ok(loss)
}

struct TargetSource<'a> {
    labels: &'a crate::data::LabelMatrix,
    policy: SoftTargetPolicy,
    table: Option<MaskedTargets>,
}

impl<'a> TargetSource<'a> {
    fn new(data: &'a TaskDataset, policy: SoftTargetPolicy, rng: &mut Rng) -> Self {
        let table =
            (policy.resample != ResampleMode::PerBatch).then(|| MaskedTargets::resolve(&data.labels, &policy, rng));
        TargetSource {
            labels: &data.labels,
            policy,
            table,
        }
    }

    fn start_epoch(&mut self, epoch: usize, rng: &mut Rng) {
        if epoch > 0 && self.policy.resample == ResampleMode::PerEpoch {
            self.table = Some(MaskedTargets::resolve(self.labels, &self.policy, rng));
        }
    }

    fn batch(&self, idx: &[usize], rng: &mut Rng) -> MaskedTargets {
        match &self.table {
            Some(t) => t.select_rows(idx),
            None => MaskedTargets::resolve(&self.labels.select(Axis(0), idx), &self.policy, rng),
        }
    }
}

/// Trains one task's adapter and head for `epochs`, then freezes them.
pub fn train_task(
    module: &mut TaskModule,
    data: &TaskDataset,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<Vec<TaskEpoch>> {
    if module.is_frozen() {
        return Err(Error::FrozenParameter(format!("task {} module", module.task_id + 1)));
    }
    let z_all = data.features_f64();
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr_adapter, cfg.weight_decay));
    let mut targets = TargetSource::new(data, cfg.soft_targets, rng);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        targets.start_epoch(epoch, rng);
        let mut mean = Mean::<TaskEpoch>::default();
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, rng).iter().enumerate() {
            let z = z_all.select(Axis(0), idx);
            let t = targets.batch(idx, rng);
            let loss = task_step(module, &mut opt, &z, &t, &cfg.weights, rng)?;
            check_loss(loss.value, module.task_id, epoch, b)?;
            mean.add(&loss);
        }
        let stats = mean.finish();
        log::debug!(
            "task {} epoch {epoch}: loss {:.5} bce {:.5}",
            module.task_id + 1,
            stats.loss,
            stats.bce
        );
        history.push(stats);
    }
    module.freeze();
    Ok(history)
}

/// Trains the selector on a frozen task module's adapted features.
pub fn train_selector(
    state: &mut SelectorState,
    module: &TaskModule,
    data: &TaskDataset,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<Vec<SelectorEpoch>> {
    let k = module.task_id;
    if state.num_tasks() != k + 1 {
        return Err(Error::SelectorUntrained {
            selector_tasks: state.num_tasks(),
            modules: k + 1,
        });
    }
    let adapted = module.adapt(&data.features_f64())?;
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr_selector, cfg.weight_decay));
    let mut staged = ReplayBuffer::new(state.buffer.capacity());
    let mut history = Vec::with_capacity(cfg.selector_epochs);
    for epoch in 0..cfg.selector_epochs {
        let mut mean = Mean::<SelectorEpoch>::default();
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, rng).iter().enumerate() {
            let current = adapted.select(Axis(0), idx);
            let batch = mixed_batch(&current, k, &state.buffer, cfg.replay_ratio, rng);
            let loss = selector_step(state, &mut opt, &batch, k, cfg.weights.lambda_mem, rng)?;
            check_loss(loss.value, k, epoch, b)?;
            mean.add(&loss);
            state.memory.ema_update(k, &current)?;
            match cfg.replay_insertion {
                ReplayInsertion::Inline => state.buffer.push(&current, k),
                ReplayInsertion::Deferred => staged.push(&current, k),
            }
        }
        history.push(mean.finish());
    }
    state.buffer.absorb(&mut staged);
    Ok(history)
}

/// Masked BCE of a frozen module on a whole split, uncertain cells at the soft-target midpoint.
pub fn evaluation_bce(module: &TaskModule, data: &TaskDataset, policy: &SoftTargetPolicy) -> Result<f64> {
    let logits = module.predict_logits(&module.adapt(&data.features_f64())?)?;
    let mid = 0.5 * (policy.alpha + policy.beta);
    let targets = MaskedTargets {
        targets: data.labels.mapv(|l| match l {
            LabelCode::Uncertain => mid,
            other => other.definite().unwrap_or(0.0),
        }),
        valid: data.labels.mapv(|l| l != LabelCode::Missing),
    };
    Ok(masked_bce_targets(&logits, &targets)?.value)
}

fn check_tasks(tasks: &[TaskSplits]) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::config("tasks", "at least one task is required"))?;
    let d = first.train.feature_dim();
    for t in tasks {
        t.validate()?;
        if t.train.feature_dim() != d {
            return Err(Error::dims(
                format!("feature width of task `{}`", t.name()),
                d,
                t.train.feature_dim(),
            ));
        }
    }
    Ok(d)
}

impl RunState {
    fn new(config: RunConfig, tasks: Vec<TaskSplits>) -> Result<Self> {
        config.validate()?;
        let d = check_tasks(&tasks)?;
        config.variant.validate(d)?;
        let tasks: Vec<TaskSplits> = tasks.into_iter().enumerate().map(|(k, t)| t.with_task_id(k)).collect();
        let mut rng = stream(config.seed, STREAM_SELECTOR_INIT, 0);
        let selector = SelectorState::new(d, config.selector, config.ema_rate, config.buffer_capacity, &mut rng)?;
        Ok(RunState {
            config,
            tasks,
            modules: Vec::new(),
            selector,
            phases: Vec::new(),
            histories: Vec::new(),
        })
    }

    fn new_module(&self, k: usize) -> Result<TaskModule> {
        let t = &self.tasks[k];
        let mut rng = stream(self.config.seed, STREAM_INIT, k);
        TaskModule::new(
            k,
            t.name(),
            self.config.variant,
            t.train.feature_dim(),
            t.class_names().to_vec(),
            &mut rng,
        )
    }

    pub fn test_sets(&self) -> Vec<&TaskDataset> {
        self.tasks.iter().map(|t| &t.test).collect()
    }

    fn snapshot(&mut self, trained: String) -> Result<()> {
        let seen = self.modules.len();
        let sets: Vec<&TaskDataset> = self.tasks[..seen].iter().map(|t| &t.test).collect();
        let oracle = evaluate_oracle(&self.modules, &sets)?;
        let (routed, _) = evaluate_routed(&self.modules, Some(&self.selector), &sets, Strategy::Selector)?;
        let snap = PhaseSnapshot {
            phase: self.phases.len(),
            trained,
            oracle_auroc: oracle.tasks.iter().map(|t| t.auroc).collect(),
            routed_auroc: routed.tasks.iter().map(|t| t.auroc).collect(),
            routing_overall: routed.routing.map(|r| r.overall),
            module_digests: self.modules.iter().map(TaskModule::digest).collect(),
        };
        self.phases.push(snap);
        Ok(())
    }

    /// Every earlier module still matches both its freeze-time digest and the previous phase.
    fn verify_isolation(&self, before: usize) -> Result<()> {
        let previous = self.phases.last().map(|p| p.module_digests.as_slice()).unwrap_or(&[]);
        for (j, module) in self.modules[..before].iter().enumerate() {
            module.verify_frozen()?;
            if previous.get(j).is_some_and(|d| *d != module.digest()) {
                return Err(Error::IsolationViolated { task: j });
            }
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.modules.iter().map(TaskModule::param_count).sum::<usize>() + self.selector.net.param_count()
    }
}

/// Runs the configured mode on already-loaded tasks.
pub fn run(config: RunConfig, tasks: Vec<TaskSplits>) -> Result<RunState> {
    match config.mode {
        RunMode::Sequential => run_sequential(config, tasks),
        RunMode::Joint => run_joint(config, tasks),
    }
}

/// Learns tasks one at a time: adapter and head, freeze, then selector with replay.
pub fn run_sequential(config: RunConfig, tasks: Vec<TaskSplits>) -> Result<RunState> {
    let mut state = RunState::new(config, tasks)?;
    let cfg = state.config.clone();
    for k in 0..state.tasks.len() {
        log::info!("phase {}: training task `{}`", k + 1, state.tasks[k].name());
        let mut module = state.new_module(k)?;
        state.selector.expand(k + 1)?;
        let mut rng = stream(cfg.seed, STREAM_TASK, k);
        let task_epochs = train_task(&mut module, &state.tasks[k].train, &cfg, &mut rng)?;
        let final_train_bce = evaluation_bce(&module, &state.tasks[k].train, &cfg.soft_targets)?;
        let mut rng = stream(cfg.seed, STREAM_SELECTOR, k);
        let selector_epochs = train_selector(&mut state.selector, &module, &state.tasks[k].train, &cfg, &mut rng)?;
        state.histories.push(TaskHistory {
            task_id: k,
            name: module.task_name.clone(),
            task_epochs,
            selector_epochs,
            final_train_bce,
        });
        state.modules.push(module);
        state.verify_isolation(k)?;
        let name = state.tasks[k].name().to_string();
        state.snapshot(name)?;
    }
    Ok(state)
}

/// Trains every module and the selector together, one task per batch in
/// round-robin order, without replay; modules freeze only at the end.
pub fn run_joint(config: RunConfig, tasks: Vec<TaskSplits>) -> Result<RunState> {
    let mut state = RunState::new(config, tasks)?;
    let cfg = state.config.clone();
    let n_tasks = state.tasks.len();
    for k in 0..n_tasks {
        let module = state.new_module(k)?;
        state.modules.push(module);
        state.selector.expand(k + 1)?;
    }
    let mut rng = stream(cfg.seed, STREAM_JOINT, 0);
    let features: Vec<Array2<f64>> = state.tasks.iter().map(|t| t.train.features_f64()).collect();
    let mut task_opts: Vec<AdamW> = (0..n_tasks)
        .map(|_| AdamW::new(AdamWConfig::new(cfg.lr_adapter, cfg.weight_decay)))
        .collect();
    let mut selector_opt = AdamW::new(AdamWConfig::new(cfg.lr_selector, cfg.weight_decay));
    let mut histories: Vec<TaskHistory> = state
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| TaskHistory {
            task_id: k,
            name: t.name().to_string(),
            ..Default::default()
        })
        .collect();
    let mut sources: Vec<TargetSource> = state
        .tasks
        .iter()
        .map(|t| TargetSource::new(&t.train, cfg.soft_targets, &mut rng))
        .collect();
    for epoch in 0..cfg.epochs {
        let mut batches = Vec::with_capacity(n_tasks);
        for (k, t) in state.tasks.iter().enumerate() {
            sources[k].start_epoch(epoch, &mut rng);
            batches.push(shuffled_batches(t.train.len(), cfg.batch_size, &mut rng));
        }
        let mut task_means: Vec<Mean<TaskEpoch>> = (0..n_tasks).map(|_| Mean::default()).collect();
        let mut sel_means: Vec<Mean<SelectorEpoch>> = (0..n_tasks).map(|_| Mean::default()).collect();
        let rounds = batches.iter().map(Vec::len).max().unwrap_or(0);
        for b in 0..rounds {
            for k in 0..n_tasks {
                let Some(idx) = batches[k].get(b) else { continue };
                let z = features[k].select(Axis(0), idx);
                let targets = sources[k].batch(idx, &mut rng);
                let loss = task_step(
                    &mut state.modules[k],
                    &mut task_opts[k],
                    &z,
                    &targets,
                    &cfg.weights,
                    &mut rng,
                )?;
                check_loss(loss.value, k, epoch, b)?;
                task_means[k].add(&loss);

                let current = state.modules[k].adapt(&z)?;
                let batch = MixedBatch {
                    features: current.clone(),
                    tasks: vec![k; current.nrows()],
                    current_rows: current.nrows(),
                };
                let sl = selector_step(
                    &mut state.selector,
                    &mut selector_opt,
                    &batch,
                    k,
                    cfg.weights.lambda_mem,
                    &mut rng,
                )?;
                check_loss(sl.value, k, epoch, b)?;
                sel_means[k].add(&sl);
                state.selector.memory.ema_update(k, &current)?;
            }
        }
        for k in 0..n_tasks {
            histories[k].task_epochs.push(task_means[k].finish());
            histories[k].selector_epochs.push(sel_means[k].finish());
        }
    }
    for (k, module) in state.modules.iter_mut().enumerate() {
        module.freeze();
        histories[k].final_train_bce = evaluation_bce(module, &state.tasks[k].train, &cfg.soft_targets)?;
    }
    state.histories = histories;
    state.snapshot("joint".into())?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn small_tasks(samples: usize) -> Vec<TaskSplits> {
        let cfg = SynthConfig {
            samples_per_split: vec![[samples, 0, samples / 2]],
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    fn quick_config() -> RunConfig {
        RunConfig {
            variant: AdapterVariant::new(AdapterKind::Simple).with_bottleneck(8),
            epochs: 2,
            selector_epochs: 2,
            buffer_capacity: 100,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut cfg = quick_config();
        cfg.tasks = vec!["a".into(), "b".into()];
        cfg.data_dir = Some("data".into());
        cfg.mode = RunMode::Joint;
        let back = RunConfig::from_key_values(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_key_values().unknown_keys(&RunConfig::KEYS).is_empty());
    }

    #[test]
    fn invalid_values_name_their_key() {
        for (key, value) in [
            ("replay_ratio", "1.5"),
            ("batch_size", "0"),
            ("soft_alpha", "0.9"),
            ("mode", "both"),
        ] {
            let mut kv = KeyValues::new();
            kv.set(key, value);
            match RunConfig::from_key_values(&kv) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn batches_cover_every_row_once_and_avoid_singletons() {
        let mut rng = Rng::seed_from_u64(0);
        let b = shuffled_batches(65, 32, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 33]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
        assert_eq!(shuffled_batches(1, 32, &mut rng), vec![vec![0]]);
    }

    #[test]
    fn sequential_run_is_isolated_and_deterministic() {
        let tasks = small_tasks(64);
        let a = run_sequential(quick_config(), tasks.clone()).unwrap();
        assert_eq!(a.phases.len(), 2);
        assert_eq!(a.phases[0].module_digests[0], a.phases[1].module_digests[0]);
        assert_eq!(
            a.phases[0].oracle_auroc[0].unwrap().to_bits(),
            a.phases[1].oracle_auroc[0].unwrap().to_bits()
        );
        assert!(a.modules.iter().all(TaskModule::is_frozen));
        let b = run_sequential(quick_config(), tasks).unwrap();
        assert_eq!(a.phases, b.phases);
        assert_eq!(a.histories, b.histories);
    }

    #[test]
    fn deferred_insertion_keeps_the_current_task_out_of_its_own_replay() {
        let tasks = small_tasks(64);
        let state = run_sequential(quick_config(), tasks).unwrap();
        let tasks_in_buffer: Vec<usize> = state.selector.buffer.entries().map(|(_, t)| t).collect();
        assert_eq!(tasks_in_buffer.len(), 100);
        assert!(tasks_in_buffer.contains(&1));
        // During phase 1 nothing could be replayed, so the single-class CE is identically zero.
        assert!(state.histories[0].selector_epochs.iter().all(|e| e.ce == 0.0));
    }

    #[test]
    fn training_a_frozen_module_is_refused() {
        let tasks = small_tasks(32);
        let mut rng = Rng::seed_from_u64(1);
        let mut m = TaskModule::new(
            0,
            "t",
            quick_config().variant,
            32,
            tasks[0].class_names().to_vec(),
            &mut rng,
        )
        .unwrap();
        m.freeze();
        assert!(train_task(&mut m, &tasks[0].train, &quick_config(), &mut rng).is_err());
    }

    #[test]
    fn joint_run_has_one_phase_and_freezes_at_the_end() {
        let cfg = RunConfig {
            mode: RunMode::Joint,
            ..quick_config()
        };
        let state = run(cfg, small_tasks(64)).unwrap();
        assert_eq!(state.phases.len(), 1);
        assert_eq!(state.phases[0].oracle_auroc.len(), 2);
        assert!(state.modules.iter().all(TaskModule::is_frozen));
        assert!(state.selector.buffer.is_empty());
    }
    #[test]
    fn separable_task_reaches_low_train_bce() {
        let tasks = generate_synthetic(&SynthConfig {
            num_tasks: 1,
            class_separation: 6.0,
            samples_per_split: vec![[2000, 0, 200]],
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            variant: AdapterVariant::new(AdapterKind::Continuum).with_bottleneck(16),
            selector_epochs: 1,
            ..RunConfig::default()
        };
        let state = run_sequential(cfg, tasks).unwrap();
        let bce = state.histories[0].final_train_bce;
        assert!(bce < 0.2, "train BCE {bce}");
    }

    #[test]
    fn joint_routing_on_identical_tasks_is_near_chance() {
        let tasks = generate_synthetic(&SynthConfig {
            task_center_separation: 0.0,
            samples_per_split: vec![[2000, 0, 300]],
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            mode: RunMode::Joint,
            variant: AdapterVariant::new(AdapterKind::Continuum).with_bottleneck(16),
            ..RunConfig::default()
        };
        let state = run(cfg, tasks).unwrap();
        let overall = state.phases[0].routing_overall.unwrap();
        assert!((0.35..=0.65).contains(&overall), "routing {overall}");
        assert!(
            state.phases[0].oracle_auroc.iter().all(|a| a.unwrap() > 0.9),
            "{:?}",
            state.phases[0].oracle_auroc
        );
    }
}
