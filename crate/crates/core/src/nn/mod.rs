//! Small fixed-topology feed-forward networks with hand-written reverse mode,
//! an Adam optimizer and the `LSFC` checkpoint container.
//!
//! Batches are row-major `(batch, features)` matrices. Input normalization is
//! part of the network so checkpoints are self-contained.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn grad(self, z: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Topology without normalization statistics; what checkpoints compare.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Hidden layers share `hidden_act`; the last layer uses `out_act`.
    pub fn mlp(input_dim: usize, hidden: &[usize], output: usize, hidden_act: Activation, out_act: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|w| LayerSpec {
                width: *w,
                activation: hidden_act,
            })
            .collect();
        layers.push(LayerSpec {
            width: output,
            activation: out_act,
        });
        Self { input_dim, layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.input_dim == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Shape("network needs at least one layer and positive widths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub arch: Architecture,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
}

impl NetSpec {
    /// Identity normalization (mean 0, std 1).
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let d = arch.input_dim;
        Ok(Self {
            arch,
            input_mean: vec![0.0; d],
            input_std: vec![1.0; d],
        })
    }

    pub fn with_normalization(arch: Architecture, mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if mean.len() != arch.input_dim || std.len() != arch.input_dim {
            return Err(Error::Shape("normalization length does not match input dim".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalization std entries must be positive".into()));
        }
        Ok(Self {
            arch,
            input_mean: mean,
            input_std: std,
        })
    }

    /// Per-column mean and std of `data`, with std floored at `min_std`.
    pub fn fit_normalization(arch: Architecture, data: ArrayView2<f32>, min_std: f32) -> Result<Self> {
        if data.ncols() != arch.input_dim || data.nrows() == 0 {
            return Err(Error::Shape("normalization data does not match input dim".into()));
        }
        let n = data.nrows() as f64;
        let mut mean = vec![0f64; data.ncols()];
        let mut sq = vec![0f64; data.ncols()];
        for row in data.rows() {
            for (j, v) in row.iter().enumerate() {
                mean[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
        }
        let mean_f: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
        let std_f: Vec<f32> = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let mu = m / n;
                ((s / n - mu * mu).max(0.0).sqrt() as f32).max(min_std)
            })
            .collect();
        Self::with_normalization(arch, mean_f, std_f)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }
}

/// Weights are stored `(fan_in, fan_out)` so a batch forward is `x.dot(W) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub weights: Vec<Array2<f32>>,
    pub biases: Vec<Array1<f32>>,
}

impl NetParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Self {
        let mut fan_in = arch.input_dim;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &arch.layers {
            let limit = (6.0 / (fan_in + l.width) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, l.width), |_| rng.uniform(-limit, limit) as f32));
            biases.push(Array1::zeros(l.width));
            fan_in = l.width;
        }
        Self { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Mutable views over every tensor, weights then bias per layer.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, k: f32) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f32 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        let mut fan_in = arch.input_dim;
        if self.weights.len() != arch.layers.len() || self.biases.len() != arch.layers.len() {
            return Err(Error::Shape("layer count does not match architecture".into()));
        }
        for (i, l) in arch.layers.iter().enumerate() {
            if self.weights[i].dim() != (fan_in, l.width) || self.biases[i].len() != l.width {
                return Err(Error::Shape(format!("layer {i} tensor shapes do not match architecture")));
            }
            fan_in = l.width;
        }
        Ok(())
    }
}

/// Activations recorded by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    normalized: Array2<f32>,
    pre: Vec<Array2<f32>>,
    post: Vec<Array2<f32>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f32> {
        self.post.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: NetSpec,
    pub params: NetParams,
}

impl Mlp {
    pub fn new(spec: NetSpec, rng: &mut Rng) -> Self {
        let params = NetParams::init(&spec.arch, rng);
        Self { spec, params }
    }

    pub fn from_parts(spec: NetSpec, params: NetParams) -> Result<Self> {
        params.check(&spec.arch)?;
        Ok(Self { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {cols} features, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mean = ArrayView1::from(&self.spec.input_mean[..]);
        let std = ArrayView1::from(&self.spec.input_std[..]);
        let mut n = x.to_owned();
        Zip::from(n.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&mean).and(&std).for_each(|v, m, s| *v = (*v - m) / s);
        });
        n
    }

    pub fn forward_cached(&self, x: ArrayView2<f32>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let normalized = self.normalize(x);
        let mut pre = Vec::with_capacity(self.spec.arch.layers.len());
        let mut post: Vec<Array2<f32>> = Vec::with_capacity(self.spec.arch.layers.len());
        for (i, l) in self.spec.arch.layers.iter().enumerate() {
            let input = if i == 0 { normalized.view() } else { post[i - 1].view() };
            let mut z = input.dot(&self.params.weights[i]);
            z += &self.params.biases[i];
            let act = l.activation;
            let y = z.mapv(|v| act.apply(v));
            pre.push(z);
            post.push(y);
        }
        Ok(ForwardCache { normalized, pre, post })
    }

    pub fn forward_batch(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_input(x.ncols())?;
        let mut h = self.normalize(x);
        for (i, l) in self.spec.arch.layers.iter().enumerate() {
            let mut z = h.dot(&self.params.weights[i]);
            z += &self.params.biases[i];
            let act = l.activation;
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Exact gradients of `sum(output * output_grad)` with respect to the
    /// parameters and the raw (un-normalized) input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f32>) -> Result<(NetParams, Array2<f32>)> {
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "output grad {:?} does not match output {:?}",
                output_grad.dim(),
                out.dim()
            )));
        }
        let layers = &self.spec.arch.layers;
        let mut grads = self.params.zeros_like();
        let mut upstream = output_grad.to_owned();
        for i in (0..layers.len()).rev() {
            let act = layers[i].activation;
            Zip::from(&mut upstream)
                .and(&cache.pre[i])
                .and(&cache.post[i])
                .for_each(|g, z, y| *g *= act.grad(*z, *y));
            let input = if i == 0 { cache.normalized.view() } else { cache.post[i - 1].view() };
            let gw = input.t().dot(&upstream);
            // Optimizers and checkpoints walk tensors as flat row-major slices.
            grads.weights[i] = if gw.is_standard_layout() {
                gw
            } else {
                gw.as_standard_layout().into_owned()
            };
            grads.biases[i] = upstream.sum_axis(Axis(0));
            upstream = upstream.dot(&self.params.weights[i].t());
        }
        let std = ArrayView1::from(&self.spec.input_std[..]);
        Zip::from(upstream.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&std).for_each(|g, s| *g /= s);
        });
        Ok((grads, upstream))
    }
}

/// Builds a `(rows, cols)` matrix from row slices.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>, cols: usize) -> Array2<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), cols);
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, cols), data).expect("rows have equal length")
}
