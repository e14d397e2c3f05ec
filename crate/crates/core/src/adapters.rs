//! Task adapters (simple, continuum, hope) and the per-task linear head.
//!
//! Every adapter is residual and starts at the identity: down-projections are
//! fan-in initialised, every projection that feeds the residual sum is zero.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    decode_params, encode_params, load_params, params_digest, Activation, ActivationKind, CheckpointManifest, Layer,
    Linear, Network, Param, Rng, TokenAttention,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// `z + MLP(z)`
    Simple,
    /// `z + Σ_m MLP_m(z)`
    Continuum,
    /// token self-attention residual, then a continuum block
    Hope,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Simple, AdapterKind::Continuum, AdapterKind::Hope];
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Simple => "simple",
            AdapterKind::Continuum => "continuum",
            AdapterKind::Hope => "hope",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(AdapterKind::Simple),
            "continuum" => Ok(AdapterKind::Continuum),
            "hope" => Ok(AdapterKind::Hope),
            other => Err(Error::config("variant", format!("unknown adapter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterVariant {
    pub kind: AdapterKind,
    pub bottleneck: usize,
    pub branches: usize,
    pub heads: usize,
    pub activation: ActivationKind,
}

impl Default for AdapterVariant {
    fn default() -> Self {
        AdapterVariant {
            kind: AdapterKind::Continuum,
            bottleneck: 64,
            branches: 3,
            heads: 8,
            activation: ActivationKind::Gelu,
        }
    }
}

impl AdapterVariant {
    pub fn new(kind: AdapterKind) -> Self {
        AdapterVariant {
            kind,
            ..AdapterVariant::default()
        }
    }

    pub fn with_bottleneck(mut self, r: usize) -> Self {
        self.bottleneck = r;
        self
    }

    pub fn with_heads(mut self, h: usize) -> Self {
        self.heads = h;
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::Adapter("bottleneck must be at least 1".into()));
        }
        if d < self.bottleneck {
            return Err(Error::Adapter(format!(
                "bottleneck {} is wider than the feature dimension {d}",
                self.bottleneck
            )));
        }
        if self.kind != AdapterKind::Simple && self.branches == 0 {
            return Err(Error::Adapter("need at least one branch".into()));
        }
        if self.kind == AdapterKind::Hope && (self.heads == 0 || !d.is_multiple_of(self.heads)) {
            return Err(Error::Adapter(format!(
                "feature dimension {d} is not divisible by {} attention tokens",
                self.heads
            )));
        }
        Ok(())
    }
}

fn bottleneck_mlp(name: &str, d: usize, r: usize, act: ActivationKind, rng: &mut Rng) -> Result<Network> {
    Network::new(
        d,
        vec![
            Layer::Linear(Linear::fan_in(&format!("{name}.down"), d, r, rng)),
            Layer::Activation(Activation::new(act)),
            Layer::Linear(Linear::zeros(&format!("{name}.up"), r, d)),
        ],
    )
}

fn continuum_block(prefix: &str, variant: &AdapterVariant, d: usize, rng: &mut Rng) -> Result<Layer> {
    let branches = (0..variant.branches)
        .map(|m| {
            bottleneck_mlp(
                &format!("{prefix}.branch{m}"),
                d,
                variant.bottleneck,
                variant.activation,
                rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layer::Residual(Network::new(d, vec![Layer::BranchSum(branches)])?))
}

pub fn build_adapter(variant: &AdapterVariant, d: usize, rng: &mut Rng) -> Result<Network> {
    variant.validate(d)?;
    let layers = match variant.kind {
        AdapterKind::Simple => vec![Layer::Residual(bottleneck_mlp(
            "adapter.mlp",
            d,
            variant.bottleneck,
            variant.activation,
            rng,
        )?)],
        AdapterKind::Continuum => vec![continuum_block("adapter", variant, d, rng)?],
        AdapterKind::Hope => {
            let attention = TokenAttention::new("adapter.attention", d, variant.heads, rng)?;
            vec![
                Layer::Residual(Network::new(d, vec![Layer::TokenAttention(attention)])?),
                continuum_block("adapter", variant, d, rng)?,
            ]
        }
    };
    Network::new(d, layers)
}

pub fn build_head(d: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    Network::new(d, vec![Layer::Linear(Linear::fan_in("head", d, classes, rng))])
}

/// Adapter plus head for one task.
#[derive(Debug, Clone)]
pub struct TaskModule {
    pub task_id: usize,
    pub task_name: String,
    pub variant: AdapterVariant,
    pub class_names: Vec<String>,
    adapter: Network,
    head: Network,
    frozen_digest: Option<String>,
}

impl TaskModule {
    pub fn new(
        task_id: usize,
        task_name: &str,
        variant: AdapterVariant,
        d: usize,
        class_names: Vec<String>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let adapter = build_adapter(&variant, d, rng)?;
        let head = build_head(d, class_names.len(), rng)?;
        Ok(TaskModule {
            task_id,
            task_name: task_name.to_string(),
            variant,
            class_names,
            adapter,
            head,
            frozen_digest: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.adapter.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn adapter(&self) -> &Network {
        &self.adapter
    }

    pub fn head(&self) -> &Network {
        &self.head
    }

    pub fn adapter_mut(&mut self) -> &mut Network {
        &mut self.adapter
    }

    pub fn head_mut(&mut self) -> &mut Network {
        &mut self.head
    }

    pub fn networks_mut(&mut self) -> (&mut Network, &mut Network) {
        (&mut self.adapter, &mut self.head)
    }

    /// `z̃ = A(z)` in eval mode.
    pub fn adapt(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.adapter.infer(z)
    }

    /// `H(z̃)`, affine logits.
    pub fn predict_logits(&self, adapted: &Array2<f64>) -> Result<Array2<f64>> {
        self.head.infer(adapted)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.adapter.params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.adapter.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapter.param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.adapter_param_count() + self.head_param_count()
    }

    /// Bytes at the engine's `f64` precision.
    pub fn param_bytes(&self) -> usize {
        self.param_count() * std::mem::size_of::<f64>()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_digest.is_some()
    }

    pub fn freeze(&mut self) {
        if self.is_frozen() {
            log::warn!("task {} is already frozen", self.task_id + 1);
            return;
        }
        self.adapter.freeze();
        self.head.freeze();
        self.frozen_digest = Some(self.digest());
    }

    pub fn digest(&self) -> String {
        params_digest(self.params())
    }

    pub fn frozen_digest(&self) -> Option<&str> {
        self.frozen_digest.as_deref()
    }

    /// Fails if parameters moved since [`TaskModule::freeze`].
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_digest {
            Some(d) if *d == self.digest() => Ok(()),
            Some(_) => Err(Error::IsolationViolated { task: self.task_id }),
            None => Err(Error::Checkpoint(format!("task {} was never frozen", self.task_id + 1))),
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        encode_params(self.params())
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let v = &self.variant;
        let mut m = CheckpointManifest {
            kind: "task_module".into(),
            ..Default::default()
        };
        for (k, val) in [
            ("task_id", self.task_id.to_string()),
            ("task_name", self.task_name.clone()),
            ("d", self.feature_dim().to_string()),
            ("classes", self.class_names.join(",")),
            ("variant", v.kind.to_string()),
            ("bottleneck", v.bottleneck.to_string()),
            ("branches", v.branches.to_string()),
            ("heads", v.heads.to_string()),
            ("activation", v.activation.to_string()),
            ("frozen", self.is_frozen().to_string()),
        ] {
            m.fields.insert(k.to_string(), val);
        }
        m.layers = self
            .adapter
            .spec()
            .iter()
            .chain(self.head.spec().iter())
            .map(|s| s.to_string())
            .collect();
        m
    }

    pub fn from_checkpoint(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Self> {
        if manifest.kind != "task_module" {
            return Err(Error::Checkpoint(format!(
                "expected task_module, found {}",
                manifest.kind
            )));
        }
        let variant = AdapterVariant {
            kind: manifest.field("variant")?,
            bottleneck: manifest.field("bottleneck")?,
            branches: manifest.field("branches")?,
            heads: manifest.field("heads")?,
            activation: manifest.field("activation")?,
        };
        let classes: String = manifest.field("classes")?;
        let task_name: String = manifest.field("task_name")?;
        // Structure only; every value is overwritten from the blob.
        let mut rng = Rng::seed_from_u64(0);
        let mut module = TaskModule::new(
            manifest.field("task_id")?,
            &task_name,
            variant,
            manifest.field("d")?,
            classes.split(',').map(str::to_string).collect(),
            &mut rng,
        )?;
        let rebuilt = module.manifest().layers;
        if rebuilt != manifest.layers {
            return Err(Error::Checkpoint("layer structure differs from manifest".into()));
        }
        load_params(module.params_mut(), &decode_params(blob)?)?;
        if manifest.field::<bool>("frozen")? {
            module.freeze();
        }
        Ok(module)
    }
}
