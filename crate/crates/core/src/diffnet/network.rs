use std::fmt;

use ndarray::Array2;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, ActivationKind, Dropout, Linear, TokenAttention};
use super::{ensure_finite, Mode, Param, Rng};
use crate::error::{Error, Result};

/// Structural description of a layer, recorded in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { d_in: usize, d_out: usize },
    Activation(ActivationKind),
    Dropout { p: f64 },
    Residual(Vec<LayerSpec>),
    BranchSum(Vec<Vec<LayerSpec>>),
    TokenAttention { dim: usize, tokens: usize },
}

fn write_seq(f: &mut fmt::Formatter<'_>, specs: &[LayerSpec]) -> fmt::Result {
    f.write_str("[")?;
    for (i, s) in specs.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{s}")?;
    }
    f.write_str("]")
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { d_in, d_out } => write!(f, "linear({d_in}->{d_out})"),
            LayerSpec::Activation(kind) => write!(f, "{kind}"),
            LayerSpec::Dropout { p } => write!(f, "dropout({p})"),
            LayerSpec::Residual(inner) => {
                f.write_str("residual")?;
                write_seq(f, inner)
            }
            LayerSpec::BranchSum(branches) => {
                f.write_str("branch_sum(")?;
                for (i, b) in branches.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write_seq(f, b)?;
                }
                f.write_str(")")
            }
            LayerSpec::TokenAttention { dim, tokens } => write!(f, "token_attention({dim}, tokens={tokens})"),
        }
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Activation(Activation),
    Dropout(Dropout),
    /// `x + inner(x)`
    Residual(Network),
    /// `Σ branch(x)`
    BranchSum(Vec<Network>),
    TokenAttention(TokenAttention),
}

impl Layer {
    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear(l) => LayerSpec::Linear {
                d_in: l.d_in(),
                d_out: l.d_out(),
            },
            Layer::Activation(a) => LayerSpec::Activation(a.kind),
            Layer::Dropout(d) => LayerSpec::Dropout { p: d.p },
            Layer::Residual(n) => LayerSpec::Residual(n.spec()),
            Layer::BranchSum(bs) => LayerSpec::BranchSum(bs.iter().map(Network::spec).collect()),
            Layer::TokenAttention(a) => LayerSpec::TokenAttention {
                dim: a.dim(),
                tokens: a.tokens,
            },
        }
    }

    fn forward(&mut self, x: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Activation(a) => a.forward(x),
            Layer::Dropout(d) => d.forward(x, mode, rng),
            Layer::Residual(n) => x + &n.forward(x, mode, rng)?,
            Layer::BranchSum(bs) => {
                let mut out = Array2::zeros((x.nrows(), 0));
                for (i, b) in bs.iter_mut().enumerate() {
                    let y = b.forward(x, mode, rng)?;
                    if i == 0 {
                        out = y;
                    } else {
                        out += &y;
                    }
                }
                out
            }
            Layer::TokenAttention(a) => a.forward(x),
        })
    }

    fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Activation(a) => a.infer(x),
            Layer::Dropout(_) => x.clone(),
            Layer::Residual(n) => x + &n.infer(x)?,
            Layer::BranchSum(bs) => {
                let mut out: Option<Array2<f64>> = None;
                for b in bs {
                    let y = b.infer(x)?;
                    out = Some(match out {
                        None => y,
                        Some(acc) => acc + &y,
                    });
                }
                out.unwrap_or_else(|| Array2::zeros((x.nrows(), 0)))
            }
            Layer::TokenAttention(a) => a.infer(x),
        })
    }

    fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Activation(a) => a.backward(grad),
            Layer::Dropout(d) => d.backward(grad),
            Layer::Residual(n) => Ok(grad + &n.backward(grad)?),
            Layer::BranchSum(bs) => {
                let mut acc: Option<Array2<f64>> = None;
                for b in bs.iter_mut() {
                    let g = b.backward(grad)?;
                    acc = Some(match acc {
                        None => g,
                        Some(a) => a + &g,
                    });
                }
                acc.ok_or_else(|| Error::MissingForwardCache("empty branch_sum".into()))
            }
            Layer::TokenAttention(a) => a.backward(grad),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => l.params(),
            Layer::Activation(_) | Layer::Dropout(_) => Vec::new(),
            Layer::Residual(n) => n.params(),
            Layer::BranchSum(bs) => bs.iter().flat_map(Network::params).collect(),
            Layer::TokenAttention(a) => a.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::Activation(_) | Layer::Dropout(_) => Vec::new(),
            Layer::Residual(n) => n.params_mut(),
            Layer::BranchSum(bs) => bs.iter_mut().flat_map(Network::params_mut).collect(),
            Layer::TokenAttention(a) => a.params_mut(),
        }
    }
}

/// A sequential stack of layers with fixed input and output widths.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    in_dim: usize,
    out_dim: usize,
}

impl Network {
    /// Builds a network and checks that the layer widths chain.
    pub fn new(in_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = in_dim;
        for layer in &layers {
            width = output_width(layer, width)?;
        }
        Ok(Network {
            layers,
            in_dim,
            out_dim: width,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(Error::dims("network input", self.in_dim, x.ncols()));
        }
        ensure_finite(x, "network input")
    }

    /// Training-path forward that records caches for [`Network::backward`].
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    /// Eval-mode forward without caching; safe on shared, frozen networks.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        if grad.ncols() != self.out_dim {
            return Err(Error::dims("upstream gradient", self.out_dim, grad.ncols()));
        }
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.freeze();
        }
    }

    /// Overwrites every parameter with uniform noise in `±scale`; used to
    /// leave the zero-initialised identity point before gradient checks.
    /// Appends `extra` zero output columns to the final linear layer.
    pub fn widen_output(&mut self, extra: usize) -> Result<()> {
        let Some(Layer::Linear(last)) = self.layers.last_mut() else {
            return Err(Error::config("network", "only a trailing linear layer can be widened"));
        };
        let (d_in, d_out) = (last.d_in(), last.d_out());
        let mut weight = Array2::zeros((d_in, d_out + extra));
        weight.slice_mut(ndarray::s![.., ..d_out]).assign(&last.weight.value);
        let mut bias = Array2::zeros((1, d_out + extra));
        bias.slice_mut(ndarray::s![.., ..d_out]).assign(&last.bias.value);
        last.weight.set_value(weight);
        last.bias.set_value(bias);
        self.out_dim = d_out + extra;
        Ok(())
    }

    pub fn randomize(&mut self, scale: f64, rng: &mut Rng) {
        let dist = Uniform::new_inclusive(-scale, scale).expect("finite scale");
        for p in self.params_mut() {
            p.value.mapv_inplace(|_| dist.sample(rng));
        }
    }
}

fn output_width(layer: &Layer, width: usize) -> Result<usize> {
    match layer {
        Layer::Linear(l) => {
            if l.d_in() != width {
                return Err(Error::dims(format!("layer {}", l.weight.name), l.d_in(), width));
            }
            Ok(l.d_out())
        }
        Layer::Activation(_) | Layer::Dropout(_) => Ok(width),
        Layer::Residual(n) => {
            if n.in_dim != width || n.out_dim != width {
                return Err(Error::dims("residual branch", width, n.out_dim));
            }
            Ok(width)
        }
        Layer::BranchSum(bs) => {
            let mut out = None;
            for b in bs {
                if b.in_dim != width {
                    return Err(Error::dims("branch input", width, b.in_dim));
                }
                match out {
                    None => out = Some(b.out_dim),
                    Some(o) if o != b.out_dim => return Err(Error::dims("branch output", o, b.out_dim)),
                    _ => {}
                }
            }
            out.ok_or_else(|| Error::Adapter("branch_sum without branches".into()))
        }
        Layer::TokenAttention(a) => {
            if a.dim() != width {
                return Err(Error::dims("token attention", a.dim(), width));
            }
            Ok(width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad_check, Objective};
    use rand::SeedableRng;

    struct SumOfSquares {
        net: Network,
        x: Array2<f64>,
    }

    impl Objective for SumOfSquares {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            self.net.params_mut()
        }

        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            let mut rng = Rng::seed_from_u64(0);
            let y = self.net.forward(&self.x, Mode::Eval, &mut rng)?;
            let loss = 0.5 * y.iter().map(|v| v * v).sum::<f64>();
            if with_grad {
                self.net.backward(&y)?;
            }
            Ok(loss)
        }
    }

    fn mlp(rng: &mut Rng, d_in: usize, hidden: usize, d_out: usize, act: ActivationKind) -> Network {
        Network::new(
            d_in,
            vec![
                Layer::Linear(Linear::fan_in("l0", d_in, hidden, rng)),
                Layer::Activation(Activation::new(act)),
                Layer::Linear(Linear::fan_in("l1", hidden, d_out, rng)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut rng = Rng::seed_from_u64(0);
        let err = Network::new(
            4,
            vec![
                Layer::Linear(Linear::fan_in("a", 4, 3, &mut rng)),
                Layer::Linear(Linear::fan_in("b", 2, 3, &mut rng)),
            ],
        );
        assert!(err.is_err());
        let net = mlp(&mut rng, 4, 3, 2, ActivationKind::Relu);
        assert!(net.infer(&Array2::zeros((1, 5))).is_err());
        assert!(net.infer(&Array2::from_elem((1, 4), f64::NAN)).is_err());
    }

    #[test]
    fn residual_backward_adds_upstream() {
        let mut rng = Rng::seed_from_u64(2);
        let inner = mlp(&mut rng, 3, 4, 3, ActivationKind::Gelu);
        let mut plain = inner.clone();
        let mut res = Network::new(3, vec![Layer::Residual(inner)]).unwrap();
        let x = Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - j as f64 * 0.3);
        let g = Array2::from_shape_fn((2, 3), |(i, j)| 0.5 + i as f64 * j as f64);
        res.forward(&x, Mode::Train, &mut rng).unwrap();
        plain.forward(&x, Mode::Train, &mut rng).unwrap();
        let gx = res.backward(&g).unwrap();
        let expected = &g + &plain.backward(&g).unwrap();
        assert!(gx.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn relu_network_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(5);
        let mut obj = SumOfSquares {
            net: mlp(&mut rng, 5, 7, 5, ActivationKind::Relu),
            x: Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin()),
        };
        let report = grad_check(&mut obj, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn deterministic_forward_given_seed() {
        let mut rng = Rng::seed_from_u64(4);
        let mut net = Network::new(
            3,
            vec![
                Layer::Linear(Linear::fan_in("a", 3, 6, &mut rng)),
                Layer::Dropout(Dropout::new(0.3).unwrap()),
            ],
        )
        .unwrap();
        let x = Array2::ones((2, 3));
        let a = net.forward(&x, Mode::Train, &mut Rng::seed_from_u64(11)).unwrap();
        let b = net.forward(&x, Mode::Train, &mut Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.infer(&x).unwrap(), net.forward(&x, Mode::Eval, &mut rng).unwrap());
    }

    #[test]
    fn spec_renders_structure() {
        let mut rng = Rng::seed_from_u64(0);
        let net = Network::new(2, vec![Layer::Residual(mlp(&mut rng, 2, 1, 2, ActivationKind::Gelu))]).unwrap();
        assert_eq!(
            net.spec().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ["residual[linear(2->1), gelu, linear(1->2)]"]
        );
    }
}
