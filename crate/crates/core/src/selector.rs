//! Shared task selector, EMA prototype memory and the feature-level replay
//! buffer.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    decode_params, encode_params, load_params, ActivationKind, CheckpointManifest, Dropout, Layer, Linear, Mode,
    Network, Param, Rng,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub activation: ActivationKind,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            hidden: 256,
            dropout: 0.1,
            activation: ActivationKind::Gelu,
        }
    }
}

/// `d → hidden → K` MLP whose output width tracks the observed task count.
#[derive(Debug, Clone)]
pub struct SelectorNet {
    pub config: SelectorConfig,
    net: Network,
}

impl SelectorNet {
    pub fn new(d: usize, config: SelectorConfig, rng: &mut Rng) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::config("selector_hidden", "must be positive"));
        }
        let net = Network::new(
            d,
            vec![
                Layer::Linear(Linear::fan_in("selector.hidden", d, config.hidden, rng)),
                Layer::Activation(crate::diffnet::Activation::new(config.activation)),
                Layer::Dropout(Dropout::new(config.dropout)?),
                Layer::Linear(Linear::zeros("selector.out", config.hidden, 0)),
            ],
        )?;
        Ok(SelectorNet { config, net })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn num_tasks(&self) -> usize {
        self.net.out_dim()
    }

    /// Adds one zero-initialised logit; existing logits are unchanged.
    pub fn expand(&mut self, new_k: usize) -> Result<()> {
        let current = self.num_tasks();
        if new_k != current + 1 {
            return Err(Error::NonIncrementalExpansion {
                current,
                requested: new_k,
            });
        }
        self.net.widen_output(1)
    }

    pub fn forward(&mut self, z: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<Array2<f64>> {
        self.check_input(z)?;
        self.net.forward(z, mode, rng)
    }

    pub fn infer(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        self.net.infer(z)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        self.net.backward(grad)
    }

    fn check_input(&self, z: &Array2<f64>) -> Result<()> {
        if z.ncols() != self.feature_dim() {
            return Err(Error::dims("selector input", self.feature_dim(), z.ncols()));
        }
        if self.num_tasks() == 0 {
            return Err(Error::NoTasks);
        }
        Ok(())
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// One prototype row per observed task, updated only by EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    pub ema_rate: f64,
    rows: Array2<f64>,
}

impl PrototypeMemory {
    pub fn new(d: usize, ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(Error::config("ema_rate", format!("must lie in (0, 1], got {ema_rate}")));
        }
        Ok(PrototypeMemory {
            ema_rate,
            rows: Array2::zeros((0, d)),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn expand(&mut self, new_k: usize) -> Result<()> {
        let current = self.num_tasks();
        if new_k != current + 1 {
            return Err(Error::NonIncrementalExpansion {
                current,
                requested: new_k,
            });
        }
        self.rows
            .push_row(Array1::zeros(self.feature_dim()).view())
            .expect("width matches");
        Ok(())
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, k: usize) -> Result<ArrayView1<'_, f64>> {
        if k >= self.num_tasks() {
            return Err(Error::TaskOutOfRange {
                label: k,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(self.rows.row(k))
    }

    /// `M_k ← (1−η)·M_k + η·mean(batch)`
    pub fn ema_update(&mut self, k: usize, batch: &Array2<f64>) -> Result<()> {
        self.row(k)?;
        if batch.ncols() != self.feature_dim() {
            return Err(Error::dims("prototype update", self.feature_dim(), batch.ncols()));
        }
        let Some(mean) = batch.mean_axis(Axis(0)) else {
            return Ok(());
        };
        let eta = self.ema_rate;
        let mut row = self.rows.row_mut(k);
        row *= 1.0 - eta;
        row.scaled_add(eta, &mean);
        Ok(())
    }

    pub fn set_rows(&mut self, rows: Array2<f64>) -> Result<()> {
        if rows.ncols() != self.feature_dim() {
            return Err(Error::dims("prototype rows", self.feature_dim(), rows.ncols()));
        }
        self.rows = rows;
        Ok(())
    }
}

/// Bounded FIFO of `(adapted feature, task id)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<(Array1<f64>, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ArrayView1<'_, f64>, usize)> {
        self.entries.iter().map(|(z, t)| (z.view(), *t))
    }

    /// Appends every row, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, batch: &Array2<f64>, task_id: usize) {
        for row in batch.rows() {
            self.push_one(row.to_owned(), task_id);
        }
    }

    fn push_one(&mut self, z: Array1<f64>, task_id: usize) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((z, task_id));
    }

    /// Drains `other` into `self` in insertion order.
    pub fn absorb(&mut self, other: &mut ReplayBuffer) {
        for (z, t) in other.entries.drain(..) {
            self.push_one(z, t);
        }
    }

    /// Uniform draw: without replacement when `n ≤ len`, with replacement otherwise.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Option<(Array2<f64>, Vec<usize>)> {
        let len = self.entries.len();
        if len == 0 || n == 0 {
            return None;
        }
        let picks: Vec<usize> = if n <= len {
            index::sample(rng, len, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..len)).collect()
        };
        let d = self.entries[0].0.len();
        let mut feats = Array2::zeros((n, d));
        let mut tasks = Vec::with_capacity(n);
        for (row, &p) in picks.iter().enumerate() {
            let (z, t) = &self.entries[p];
            feats.row_mut(row).assign(z);
            tasks.push(*t);
        }
        Some((feats, tasks))
    }
}

/// Selector input: current rows first, replayed rows after.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub features: Array2<f64>,
    pub tasks: Vec<usize>,
    pub current_rows: usize,
}

impl MixedBatch {
    pub fn replayed_rows(&self) -> usize {
        self.tasks.len() - self.current_rows
    }
}

pub fn replay_rows(batch: usize, ratio: f64) -> usize {
    (ratio * batch as f64).ceil() as usize
}

pub fn mixed_batch(
    current: &Array2<f64>,
    task_id: usize,
    buffer: &ReplayBuffer,
    ratio: f64,
    rng: &mut Rng,
) -> MixedBatch {
    let b = current.nrows();
    let mut tasks = vec![task_id; b];
    let features = match buffer.sample(replay_rows(b, ratio), rng) {
        Some((replayed, replay_tasks)) => {
            tasks.extend(replay_tasks);
            ndarray::concatenate(Axis(0), &[current.view(), replayed.view()]).expect("same width")
        }
        None => current.clone(),
    };
    MixedBatch {
        features,
        tasks,
        current_rows: b,
    }
}

/// Everything the router needs besides the task modules.
#[derive(Debug, Clone)]
pub struct SelectorState {
    pub net: SelectorNet,
    pub memory: PrototypeMemory,
    pub buffer: ReplayBuffer,
}

impl SelectorState {
    pub fn new(d: usize, config: SelectorConfig, ema_rate: f64, capacity: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SelectorState {
            net: SelectorNet::new(d, config, rng)?,
            memory: PrototypeMemory::new(d, ema_rate)?,
            buffer: ReplayBuffer::new(capacity),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.net.num_tasks()
    }

    pub fn expand(&mut self, new_k: usize) -> Result<()> {
        self.net.expand(new_k)?;
        self.memory.expand(new_k)
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let c = &self.net.config;
        let mut m = CheckpointManifest {
            kind: "selector".into(),
            ..Default::default()
        };
        for (k, v) in [
            ("d", self.net.feature_dim().to_string()),
            ("num_tasks", self.num_tasks().to_string()),
            ("hidden", c.hidden.to_string()),
            ("dropout", c.dropout.to_string()),
            ("activation", c.activation.to_string()),
            ("ema_rate", self.memory.ema_rate.to_string()),
            ("buffer_capacity", self.buffer.capacity().to_string()),
            ("buffer_len", self.buffer.len().to_string()),
        ] {
            m.fields.insert(k.to_string(), v);
        }
        m.layers = self.net.network().spec().iter().map(|s| s.to_string()).collect();
        m
    }

    /// Selector parameters, then `memory.prototypes`, `buffer.features`, `buffer.tasks`.
    pub fn to_blob(&self) -> Vec<u8> {
        let d = self.net.feature_dim();
        let mut feats = Array2::zeros((self.buffer.len(), d));
        let mut tasks = Array2::zeros((self.buffer.len(), 1));
        for (i, (z, t)) in self.buffer.entries().enumerate() {
            feats.row_mut(i).assign(&z);
            tasks[[i, 0]] = t as f64;
        }
        let extra = [
            Param::new("memory.prototypes", self.memory.rows().clone()),
            Param::new("buffer.features", feats),
            Param::new("buffer.tasks", tasks),
        ];
        encode_params(self.net.params().into_iter().chain(extra.iter()))
    }

    pub fn from_checkpoint(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Self> {
        if manifest.kind != "selector" {
            return Err(Error::Checkpoint(format!("expected selector, found {}", manifest.kind)));
        }
        let config = SelectorConfig {
            hidden: manifest.field("hidden")?,
            dropout: manifest.field("dropout")?,
            activation: manifest.field("activation")?,
        };
        let d: usize = manifest.field("d")?;
        let k: usize = manifest.field("num_tasks")?;
        let mut rng = Rng::seed_from_u64(0);
        let mut state = SelectorState::new(
            d,
            config,
            manifest.field("ema_rate")?,
            manifest.field("buffer_capacity")?,
            &mut rng,
        )?;
        for t in 1..=k {
            state.expand(t)?;
        }
        let entries = decode_params(blob)?;
        let n_net = state.net.params().len();
        if entries.len() != n_net + 3 {
            return Err(Error::Checkpoint(format!(
                "selector blob has {} entries, expected {}",
                entries.len(),
                n_net + 3
            )));
        }
        load_params(state.net.params_mut(), &entries[..n_net])?;
        let tail = &entries[n_net..];
        let expect = ["memory.prototypes", "buffer.features", "buffer.tasks"];
        for ((name, _), want) in tail.iter().zip(expect) {
            if name != want {
                return Err(Error::Checkpoint(format!("expected entry {want}, found {name}")));
            }
        }
        if tail[0].1.dim() != (k, d) {
            return Err(Error::Checkpoint("prototype matrix has the wrong shape".into()));
        }
        state.memory.set_rows(tail[0].1.clone())?;
        let (feats, tasks) = (&tail[1].1, &tail[2].1);
        if feats.nrows() != tasks.nrows() || (feats.nrows() > 0 && feats.ncols() != d) {
            return Err(Error::Checkpoint("buffer entries are inconsistent".into()));
        }
        for i in 0..feats.nrows() {
            let t = tasks[[i, 0]];
            if t < 0.0 || t.fract() != 0.0 || t as usize >= k {
                return Err(Error::Checkpoint(format!("buffer entry {i} has invalid task {t}")));
            }
            state.buffer.push_one(feats.row(i).to_owned(), t as usize);
        }
        Ok(state)
    }

    /// Current-task slice of a mixed batch.
    pub fn current_slice(batch: &MixedBatch) -> Array2<f64> {
        batch.features.slice(s![..batch.current_rows, ..]).to_owned()
    }
}
