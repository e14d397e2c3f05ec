use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{Mode, Param, Rng};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), d_in, d_out),
            bias: Param::zeros(format!("{name}.bias"), 1, d_out),
            input: None,
        }
    }

    /// Weights uniform in `±1/√d_in`, zero bias.
    pub fn fan_in(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let mut layer = Linear::zeros(name, d_in, d_out);
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        layer.weight.value.mapv_inplace(|_| dist.sample(rng));
        layer
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::MissingForwardCache(self.weight.name.clone()))?;
        self.weight.grad += &x.t().dot(grad);
        self.bias.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(grad.dot(&self.weight.value.t()))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Gelu,
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "gelu" => Ok(ActivationKind::Gelu),
            other => Err(Error::config("activation", format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            // tanh approximation
            ActivationKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    input: Option<Array2<f64>>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, input: None }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| self.kind.apply(v))
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::MissingForwardCache(self.kind.to_string()))?;
        let kind = self.kind;
        Ok(ndarray::Zip::from(grad)
            .and(&x)
            .map_collect(|&g, &v| g * kind.derivative(v)))
    }
}

/// Inverted dropout: training output is scaled by `1/(1-p)`, eval is identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    /// `Some(None)` after an eval-mode forward.
    mask: Option<Option<Array2<f64>>>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout", format!("rate {p} is not in [0, 1)")));
        }
        Ok(Dropout { p, mask: None })
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Array2<f64> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = Some(None);
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask = x.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(Some(mask));
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        match self.mask.take() {
            None => Err(Error::MissingForwardCache("dropout".into())),
            Some(None) => Ok(grad.clone()),
            Some(Some(mask)) => Ok(grad * &mask),
        }
    }
}

#[derive(Debug, Clone)]
struct AttentionCache {
    tokens: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stacked `h × h` attention matrices, one block per sample.
    attn: Array2<f64>,
    mixed: Array2<f64>,
}

/// Self-attention over `h` tokens obtained by reshaping a `d`-vector into
/// `h × (d/h)`. Q/K/V maps are shared across tokens; the concatenated token
/// outputs pass through a `d × d` output projection. Returns only the
/// attention branch, so wrap it in a residual for `z + attn(z)`.
#[derive(Debug, Clone)]
pub struct TokenAttention {
    pub tokens: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    cache: Option<AttentionCache>,
}

impl TokenAttention {
    /// Fan-in initialised Q/K/V and a zero output projection.
    pub fn new(name: &str, dim: usize, tokens: usize, rng: &mut Rng) -> Result<Self> {
        if tokens == 0 || !dim.is_multiple_of(tokens) {
            return Err(Error::Adapter(format!(
                "feature dimension {dim} is not divisible by {tokens} attention tokens"
            )));
        }
        let td = dim / tokens;
        Ok(TokenAttention {
            tokens,
            query: Linear::fan_in(&format!("{name}.query"), td, td, rng),
            key: Linear::fan_in(&format!("{name}.key"), td, td, rng),
            value: Linear::fan_in(&format!("{name}.value"), td, td, rng),
            output: Linear::zeros(&format!("{name}.output"), dim, dim),
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.output.d_in()
    }

    fn token_dim(&self) -> usize {
        self.dim() / self.tokens
    }

    fn scale(&self) -> f64 {
        1.0 / (self.token_dim() as f64).sqrt()
    }

    fn attend(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (b, d) = x.dim();
        let h = self.tokens;
        let td = self.token_dim();
        let tokens = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * h, td))
            .expect("contiguous reshape");
        let q = self.query.infer(&tokens);
        let k = self.key.infer(&tokens);
        let v = self.value.infer(&tokens);
        let mut attn = Array2::zeros((b * h, h));
        let mut mixed = Array2::zeros((b * h, td));
        let scale = self.scale();
        for i in 0..b {
            let rows = s![i * h..(i + 1) * h, ..];
            let mut scores = q.slice(rows).dot(&k.slice(rows).t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            mixed.slice_mut(rows).assign(&scores.dot(&v.slice(rows)));
            attn.slice_mut(rows).assign(&scores);
        }
        let flat = mixed.clone().into_shape_with_order((b, d)).expect("contiguous reshape");
        let y = self.output.infer(&flat);
        (
            y,
            AttentionCache {
                tokens,
                q,
                k,
                v,
                attn,
                mixed,
            },
        )
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.attend(x).0
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (y, cache) = self.attend(x);
        let b = x.nrows();
        let flat = cache
            .mixed
            .clone()
            .into_shape_with_order((b, self.dim()))
            .expect("contiguous reshape");
        self.output.forward(&flat);
        self.cache = Some(cache);
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::MissingForwardCache("token_attention".into()))?;
        let (b, d) = grad.dim();
        let h = self.tokens;
        let td = self.token_dim();
        let scale = self.scale();
        let g_mixed = self
            .output
            .backward(grad)?
            .into_shape_with_order((b * h, td))
            .expect("contiguous reshape");
        let mut g_q = Array2::zeros((b * h, td));
        let mut g_k = Array2::zeros((b * h, td));
        let mut g_v = Array2::zeros((b * h, td));
        for i in 0..b {
            let rows = s![i * h..(i + 1) * h, ..];
            let a = cache.attn.slice(rows);
            let go = g_mixed.slice(rows);
            g_v.slice_mut(rows).assign(&a.t().dot(&go));
            let g_a = go.dot(&cache.v.slice(rows).t());
            // softmax backward, row-wise
            let inner = (&g_a * &a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let g_s = &a * &(&g_a - &inner) * scale;
            g_q.slice_mut(rows).assign(&g_s.dot(&cache.k.slice(rows)));
            g_k.slice_mut(rows).assign(&g_s.t().dot(&cache.q.slice(rows)));
        }
        let mut g_tokens = Array2::zeros((b * h, td));
        for (lin, g) in [(&mut self.query, &g_q), (&mut self.key, &g_k), (&mut self.value, &g_v)] {
            lin.input = Some(cache.tokens.clone());
            g_tokens += &lin.backward(g)?;
        }
        Ok(g_tokens.into_shape_with_order((b, d)).expect("contiguous reshape"))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.query.params();
        out.extend(self.key.params());
        out.extend(self.value.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_linear_passes_input_through() {
        let mut lin = Linear::zeros("l", 3, 3);
        lin.weight.value = Array2::eye(3);
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(lin.infer(&x), x);
    }

    #[test]
    fn linear_gradients_for_sum_loss() {
        let mut lin = Linear::zeros("l", 2, 3);
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        lin.forward(&x);
        lin.backward(&Array2::ones((2, 3))).unwrap();
        assert_eq!(lin.bias.grad, Array2::from_elem((1, 3), 2.0));
        // dL/dW[i][j] = sum over batch of x[., i]
        assert_eq!(lin.weight.grad, array![[4.0, 4.0, 4.0], [1.0, 1.0, 1.0]]);
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut lin = Linear::zeros("l", 2, 2);
        assert!(matches!(
            lin.backward(&Array2::ones((1, 2))),
            Err(Error::MissingForwardCache(_))
        ));
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (ActivationKind::Gelu.apply(x + h) - ActivationKind::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - ActivationKind::Gelu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rate_dropout_is_identity_in_training() {
        let mut rng = Rng::seed_from_u64(3);
        let mut d = Dropout::new(0.0).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        assert_eq!(
            d.forward(&x, Mode::Train, &mut rng),
            d.forward(&x, Mode::Eval, &mut rng)
        );
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = Rng::seed_from_u64(9);
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward(&Array2::ones((4, 50)), Mode::Train, &mut rng);
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn attention_rejects_indivisible_dims() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(TokenAttention::new("a", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn attention_rows_are_convex_mixtures() {
        let mut rng = Rng::seed_from_u64(1);
        let att = TokenAttention::new("a", 8, 4, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let (_, cache) = att.attend(&x);
        for row in cache.attn.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
