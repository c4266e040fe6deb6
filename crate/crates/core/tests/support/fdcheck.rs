//! Finite-difference checker for the hand-written backward pass. The
//! reference forward pass is a separate f64 implementation so that numerical
//! differences come from the backward code, not from shared forward code.
//!
//! Shared by the core gradient tests and the acceptance gate.

use latshield_core::classifier::{classifier_arch, ClassifierConfig};
use latshield_core::nn::{Activation, Architecture, Mlp, NetSpec};
use latshield_core::reach::{critic_arch, CriticConfig};
use latshield_core::world_model::{decoder_arch, encoder_arch, transition_arch, WmConfig};
use latshield_core::Rng;
use ndarray::Array2;

pub const POINTS: usize = 32;
const BATCH: usize = 3;
const STEP: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-3;

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
    }
}

/// f64 copy of a network's parameters and input normalization.
#[derive(Clone)]
struct RefNet {
    acts: Vec<Activation>,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Row-major `[in][out]` per layer.
    w: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
}

impl RefNet {
    fn from(net: &Mlp) -> Self {
        Self {
            acts: net.spec.arch.layers.iter().map(|l| l.activation).collect(),
            mean: net.spec.input_mean.iter().map(|v| *v as f64).collect(),
            std: net.spec.input_std.iter().map(|v| *v as f64).collect(),
            w: net
                .params
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect())
                .collect(),
            b: net.params.biases.iter().map(|b| b.iter().map(|v| *v as f64).collect()).collect(),
        }
    }

    /// Output row plus the sign pattern of every ReLU pre-activation.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut h: Vec<f64> = x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect();
        let mut kinks = Vec::new();
        for (l, a) in self.acts.iter().enumerate() {
            let out = self.b[l].len();
            let mut z = self.b[l].clone();
            for (i, hi) in h.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate().take(out) {
                    *zj += hi * self.w[l][i][j];
                }
            }
            if *a == Activation::Relu {
                kinks.extend(z.iter().map(|v| *v > 0.0));
            }
            h = z.into_iter().map(|v| act(*a, v)).collect();
        }
        (h, kinks)
    }

    /// Scalar objective Σ_rows Σ_k proj[r][k] · out[r][k].
    fn objective(&self, xs: &[Vec<f64>], proj: &Array2<f32>) -> (f64, Vec<bool>) {
        let mut total = 0.0;
        let mut kinks = Vec::new();
        for (r, x) in xs.iter().enumerate() {
            let (y, k) = self.forward(x);
            total += y.iter().enumerate().map(|(j, v)| v * proj[[r, j]] as f64).sum::<f64>();
            kinks.extend(k);
        }
        (total, kinks)
    }
}

enum Coord {
    Weight(usize, usize, usize),
    Bias(usize, usize),
    Input(usize, usize),
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Largest relative error over [`POINTS`] random coordinates (weights,
/// biases and inputs), or a description of the first coordinate exceeding
/// [`MAX_REL_ERR`].
pub fn check_architecture(name: &str, arch: Architecture, seed: u64) -> Result<f64, String> {
    let mut rng = Rng::new(seed);
    let din = arch.input_dim;
    let mean: Vec<f32> = (0..din).map(|_| rng.uniform(-0.5, 0.5) as f32).collect();
    let std: Vec<f32> = (0..din).map(|_| rng.uniform(0.5, 2.0) as f32).collect();
    let spec = NetSpec::with_normalization(arch, mean, std).unwrap();
    let mut net = Mlp::new(spec, &mut rng);
    // Non-zero biases so every layer's bias gradient is exercised.
    for b in net.params.biases.iter_mut() {
        b.mapv_inplace(|_| rng.uniform(-0.1, 0.1) as f32);
    }
    let dout = net.output_dim();
    let x = Array2::from_shape_fn((BATCH, din), |_| rng.uniform(-1.0, 1.0) as f32);
    let proj = Array2::from_shape_fn((BATCH, dout), |_| rng.uniform(-1.0, 1.0) as f32);

    let cache = net.forward_cached(x.view()).unwrap();
    let (grads, input_grad) = net.backward(&cache, proj.view()).unwrap();

    let base = RefNet::from(&net);
    let xs: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect();
    let n_layers = base.acts.len();

    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < POINTS {
        let coord = match rng.below(3) {
            0 => {
                let l = rng.below(n_layers);
                Coord::Weight(l, rng.below(base.w[l].len()), rng.below(base.b[l].len()))
            }
            1 => {
                let l = rng.below(n_layers);
                Coord::Bias(l, rng.below(base.b[l].len()))
            }
            _ => Coord::Input(rng.below(BATCH), rng.below(din)),
        };
        let eval = |delta: f64| {
            let mut n = base.clone();
            let mut xs = xs.clone();
            match coord {
                Coord::Weight(l, i, j) => n.w[l][i][j] += delta,
                Coord::Bias(l, j) => n.b[l][j] += delta,
                Coord::Input(r, c) => xs[r][c] += delta,
            }
            n.objective(&xs, &proj)
        };
        let (fp, kp) = eval(STEP);
        let (fm, km) = eval(-STEP);
        if kp != km {
            // The probe straddles a ReLU kink; the derivative is undefined there.
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let analytic = match coord {
            Coord::Weight(l, i, j) => grads.weights[l][[i, j]],
            Coord::Bias(l, j) => grads.biases[l][j],
            Coord::Input(r, c) => input_grad[[r, c]],
        } as f64;
        let err = relative_error(analytic, numeric);
        if !(err < MAX_REL_ERR) {
            return Err(format!("{name}: analytic {analytic:e} vs numeric {numeric:e} (rel err {err:e})"));
        }
        worst = worst.max(err);
        checked += 1;
    }
    Ok(worst)
}

/// Every network architecture the toolkit trains, at default sizes.
pub fn all_architectures() -> Vec<(&'static str, Architecture)> {
    let wm = WmConfig::default();
    let critic = CriticConfig::default();
    let latent = wm.latent_dim;
    let pixels = 32 * 32;
    vec![
        ("encoder", encoder_arch(pixels, &wm)),
        ("transition", transition_arch(&wm)),
        ("decoder", decoder_arch(pixels, &wm)),
        ("classifier", classifier_arch(latent, &ClassifierConfig::default())),
        ("latent critic", critic_arch(latent, &critic.hidden, Activation::Identity)),
        ("privileged critic", critic_arch(4, &critic.hidden, Activation::Identity)),
        ("risk critic", critic_arch(latent, &critic.hidden, Activation::Sigmoid)),
    ]
}

