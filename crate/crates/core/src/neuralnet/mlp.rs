use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x <= 0.0 => LEAKY_SLOPE * x,
            _ => x,
        }
    }

    #[inline]
    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::LeakyRelu if pre <= 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }
}

/// `y = act(W x + b)` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let layer = Self {
            inputs,
            outputs,
            weight,
            bias,
            activation,
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn check(&self) -> Result<(), NnError> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(NnError::Shape("layer with zero width".into()));
        }
        if self.weight.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(NnError::Shape(format!(
                "layer {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("layer parameters"));
        }
        Ok(())
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + dot(row, x);
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct MlpWeights {
    layers: Vec<DenseLayer>,
    input_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    input_scale: f64,
    layers: Vec<DenseLayer>,
}

impl TryFrom<MlpRepr> for MlpWeights {
    type Error = NnError;
    fn try_from(r: MlpRepr) -> Result<Self, NnError> {
        MlpWeights::new(r.layers, r.input_scale)
    }
}

impl From<MlpWeights> for MlpRepr {
    fn from(w: MlpWeights) -> Self {
        MlpRepr {
            input_scale: w.input_scale,
            layers: w.layers,
        }
    }
}

/// Per-layer intermediates kept by [`MlpWeights::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (the first one already scaled).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpWeights {
    /// Inputs are multiplied by `input_scale` before the first layer.
    pub fn new(layers: Vec<DenseLayer>, input_scale: f64) -> Result<Self, NnError> {
        let last = layers
            .last()
            .ok_or_else(|| NnError::Shape("network has no layers".into()))?;
        if last.activation != Activation::Linear {
            return Err(NnError::Shape("final layer must be linear".into()));
        }
        for l in &layers {
            l.check()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::Shape(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        if !input_scale.is_finite() {
            return Err(NnError::NonFinite("input scale"));
        }
        Ok(Self { layers, input_scale })
    }

    /// He-initialised network through `dims` (LeakyReLU hidden, linear output).
    pub fn init(dims: &[usize], input_scale: f64, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let (act, gain) = if i + 1 == n {
                    (Activation::Linear, 1.0)
                } else {
                    (Activation::LeakyRelu, 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE))
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                let weight = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-0.01..0.01)).collect();
                DenseLayer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weight,
                    bias,
                    activation: act,
                }
            })
            .collect();
        Self { layers, input_scale }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Appends all parameters (per layer: weights row-major, then biases).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrites parameters from `src` in [`Self::write_params`] order and
    /// returns the number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&src[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[k..k + nb]);
            k += nb;
        }
        k
    }

    /// Inference path: no intermediates are retained.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur: Vec<f64> = x.iter().map(|v| v * self.input_scale).collect();
        for l in &self.layers {
            let mut next = vec![0.0; l.outputs];
            l.affine(&cur, &mut next);
            for v in &mut next {
                *v = l.activation.apply(*v);
            }
            cur = next;
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<f64> = x.iter().map(|v| v * self.input_scale).collect();
        for l in &self.layers {
            let mut p = vec![0.0; l.outputs];
            l.affine(&cur, &mut p);
            let next = p.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(p);
        }
        MlpCache {
            inputs,
            pre,
            output: cur,
        }
    }

    /// Accumulates `d loss / d params` into `grad` (layout of
    /// [`Self::write_params`]) given `dout = d loss / d output`. When `dinput`
    /// is given, `d loss / d x` is added to it.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut [f64], dinput: Option<&mut [f64]>) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.param_count();
        }
        let mut delta: Vec<f64> = dout.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            for (d, &p) in delta.iter_mut().zip(&cache.pre[li]) {
                *d *= l.activation.slope(p);
            }
            let x = &cache.inputs[li];
            let off = offsets[li];
            let (gw, gb) = grad[off..off + l.param_count()].split_at_mut(l.weight.len());
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &xi) in gw[o * l.inputs..(o + 1) * l.inputs].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            if li == 0 && dinput.is_none() {
                break;
            }
            let mut prev = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&l.weight[o * l.inputs..(o + 1) * l.inputs]) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        if let Some(dx) = dinput {
            for (g, d) in dx.iter_mut().zip(&delta) {
                *g += d * self.input_scale;
            }
        }
    }
}

/// Applies `w` to a vector (`[in]`) or a row batch (`[n, in]`).
pub fn mlp_forward(w: &MlpWeights, x: &Tensor) -> Result<Tensor, NnError> {
    let d = w.input_dim();
    match *x.shape() {
        [n] if n == d => Tensor::vector(w.forward(x.data())),
        [rows, n] if n == d => {
            let out: Vec<f64> = x.data().chunks_exact(d).flat_map(|r| w.forward(r)).collect();
            Tensor::new(vec![rows, w.output_dim()], out)
        }
        _ => Err(NnError::Shape(format!("input shape {:?} for network taking {d}", x.shape()))),
    }
}

/// Mean squared error over all output components of the batch and its
/// gradient with respect to the parameters.
pub fn mlp_loss_grad(w: &MlpWeights, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.param_count()];
    let m = (inputs.len() * w.output_dim()) as f64;
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let cache = w.forward_cached(x);
        let dout: Vec<f64> = cache
            .output
            .iter()
            .zip(t)
            .map(|(y, t)| {
                loss += (y - t) * (y - t);
                2.0 * (y - t) / m
            })
            .collect();
        w.backward(&cache, &dout, &mut grad, None);
    }
    (loss / m, grad)
}
