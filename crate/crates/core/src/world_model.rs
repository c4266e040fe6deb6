//! Deterministic latent world model: encoder, residual latent transition and
//! decoder, trained with reconstruction plus single-step teacher forcing.

use log::{debug, info};
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{stack_rows, Activation, Adam, AdamConfig, Architecture, Checkpoint, LrSchedule, Mlp, NetSpec};
use crate::rng::Rng;
use crate::types::{ActionIndex, Dataset, Observation, StepRef};

/// Longest imagination rollout started from one encoded observation.
pub const MAX_IMAGINATION_HORIZON: usize = 25;

/// Encoded observations are processed in chunks of this many rows.
const ENCODE_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f32>,
}

impl LatentState {
    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WmConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub transition_hidden: Vec<usize>,
    pub lambda_dyn: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub lr_decay_at: Vec<f64>,
    pub lr_decay: f64,
    pub holdout_fraction: f64,
    /// Floor on per-pixel input std when fitting encoder normalization.
    pub min_input_std: f32,
    pub log_every: u64,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_hidden: vec![256, 64],
            transition_hidden: vec![128, 128],
            lambda_dyn: 1.0,
            batch_size: 64,
            steps: 30_000,
            lr: 1e-3,
            lr_decay_at: vec![0.6, 0.8],
            lr_decay: 0.5,
            holdout_fraction: 0.1,
            min_input_std: 1.0,
            log_every: 5_000,
        }
    }
}

impl WmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("world model latent_dim and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if !(self.lambda_dyn >= 0.0) || !(self.lr > 0.0) || !(self.min_input_std > 0.0) {
            return Err(Error::Config("lambda_dyn must be >= 0, lr and min_input_std > 0".into()));
        }
        Ok(())
    }
}

pub fn encoder_arch(pixels: usize, cfg: &WmConfig) -> Architecture {
    Architecture::mlp(pixels + 2, &cfg.encoder_hidden, cfg.latent_dim, Activation::Relu, Activation::Identity)
}

pub fn transition_arch(cfg: &WmConfig) -> Architecture {
    Architecture::mlp(
        cfg.latent_dim + ActionIndex::COUNT,
        &cfg.transition_hidden,
        cfg.latent_dim,
        Activation::Relu,
        Activation::Identity,
    )
}

pub fn decoder_arch(pixels: usize, cfg: &WmConfig) -> Architecture {
    let hidden: Vec<usize> = cfg.encoder_hidden.iter().rev().copied().collect();
    Architecture::mlp(cfg.latent_dim, &hidden, pixels + 2, Activation::Relu, Activation::Identity)
}

/// Network input for an observation: pixels, then `cos θ`, `sin θ`.
pub fn observation_features(o: &Observation) -> Vec<f32> {
    let mut v = Vec::with_capacity(o.image.len() + 2);
    observation_features_into(o, &mut v);
    v
}

fn observation_features_into(o: &Observation, out: &mut Vec<f32>) {
    out.extend_from_slice(&o.image);
    out.push(o.heading.cos());
    out.push(o.heading.sin());
}

pub fn one_hot(index: usize) -> Result<[f32; ActionIndex::COUNT]> {
    let a = ActionIndex::new(index)?;
    let mut v = [0.0; ActionIndex::COUNT];
    v[a.index()] = 1.0;
    Ok(v)
}

/// Losses recorded during training; stored in checkpoint metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WmReport {
    pub steps: u64,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    pub final_holdout_recon: f64,
    pub final_holdout_dyn: f64,
    pub holdout_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub height: u16,
    pub width: u16,
    pub encoder: Mlp,
    pub transition: Mlp,
    pub decoder: Mlp,
    pub report: WmReport,
}

impl WorldModel {
    pub fn new(height: u16, width: u16, encoder: Mlp, transition: Mlp, decoder: Mlp) -> Result<Self> {
        let pixels = height as usize * width as usize;
        let dz = encoder.output_dim();
        if encoder.input_dim() != pixels + 2 || decoder.output_dim() != pixels + 2 {
            return Err(Error::Shape("encoder/decoder do not match the observation size".into()));
        }
        if transition.input_dim() != dz + ActionIndex::COUNT || transition.output_dim() != dz || decoder.input_dim() != dz {
            return Err(Error::Shape("latent dimensions of encoder, transition and decoder disagree".into()));
        }
        Ok(Self {
            height,
            width,
            encoder,
            transition,
            decoder,
            report: WmReport::default(),
        })
    }

    /// Freshly initialized model; encoder normalization fitted to `fit_on`
    /// when given.
    pub fn init(height: u16, width: u16, cfg: &WmConfig, fit_on: Option<ArrayView2<f32>>, rng: &mut Rng) -> Result<Self> {
        let pixels = height as usize * width as usize;
        let enc_spec = match fit_on {
            Some(x) => NetSpec::fit_normalization(encoder_arch(pixels, cfg), x, cfg.min_input_std)?,
            None => NetSpec::new(encoder_arch(pixels, cfg))?,
        };
        let encoder = Mlp::new(enc_spec, rng);
        let transition = Mlp::new(NetSpec::new(transition_arch(cfg))?, rng);
        let decoder = Mlp::new(NetSpec::new(decoder_arch(pixels, cfg))?, rng);
        Self::new(height, width, encoder, transition, decoder)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn check_observation(&self, o: &Observation) -> Result<()> {
        if o.height != self.height || o.width != self.width || o.image.len() != o.pixel_count() {
            return Err(Error::Shape(format!(
                "observation {}x{} does not match world model {}x{}",
                o.height, o.width, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn encode(&self, o: &Observation) -> Result<LatentState> {
        self.check_observation(o)?;
        Ok(LatentState {
            z: self.encoder.forward(&observation_features(o))?,
        })
    }

    /// Encodes many observations; row `i` is the latent of `obs[i]`.
    pub fn encode_batch(&self, obs: &[&Observation]) -> Result<Array2<f32>> {
        let dz = self.latent_dim();
        let mut out = Array2::zeros((obs.len(), dz));
        let cols = self.encoder.input_dim();
        let mut buf = Vec::with_capacity(ENCODE_CHUNK * cols);
        for (chunk_idx, chunk) in obs.chunks(ENCODE_CHUNK).enumerate() {
            buf.clear();
            for o in chunk {
                self.check_observation(o)?;
                observation_features_into(o, &mut buf);
            }
            let x = ArrayView2::from_shape((chunk.len(), cols), &buf).expect("rows have equal length");
            let z = self.encoder.forward_batch(x)?;
            let start = chunk_idx * ENCODE_CHUNK;
            out.slice_mut(s![start..start + chunk.len(), ..]).assign(&z);
        }
        Ok(out)
    }

    pub fn imagine_step(&self, z: &LatentState, a: ActionIndex) -> Result<LatentState> {
        let next = self.imagine_batch(ArrayView2::from_shape((1, z.z.len()), &z.z).map_err(|e| Error::Shape(e.to_string()))?, &[a])?;
        Ok(LatentState {
            z: next.into_raw_vec_and_offset().0,
        })
    }

    /// One transition per row: `z' = z + f([z, onehot(a)])`.
    pub fn imagine_batch(&self, z: ArrayView2<f32>, actions: &[ActionIndex]) -> Result<Array2<f32>> {
        let input = transition_input(z, actions, self.latent_dim())?;
        let mut next = self.transition.forward_batch(input.view())?;
        next += &z;
        Ok(next)
    }

    pub fn decode(&self, z: &LatentState) -> Result<Vec<f32>> {
        self.decoder.forward(&z.z)
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Checkpoint {
        metadata["world_model"] = json!({
            "height": self.height,
            "width": self.width,
            "latent_dim": self.latent_dim(),
            "report": self.report,
        });
        Checkpoint::new(metadata)
            .with("encoder", self.encoder.clone())
            .with("transition", self.transition.clone())
            .with("decoder", self.decoder.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata["world_model"];
        let dim = |k: &str| {
            meta[k]
                .as_u64()
                .and_then(|v| u16::try_from(v).ok())
                .ok_or_else(|| Error::Shape(format!("world model metadata lacks `{k}`")))
        };
        let mut wm = Self::new(
            dim("height")?,
            dim("width")?,
            ck.get("encoder")?.clone(),
            ck.get("transition")?.clone(),
            ck.get("decoder")?.clone(),
        )?;
        wm.report = serde_json::from_value(meta["report"].clone()).unwrap_or_default();
        Ok(wm)
    }
}

fn transition_input(z: ArrayView2<f32>, actions: &[ActionIndex], dz: usize) -> Result<Array2<f32>> {
    if z.ncols() != dz || z.nrows() != actions.len() {
        return Err(Error::Shape(format!(
            "latent batch {:?} does not match latent dim {dz} and {} actions",
            z.dim(),
            actions.len()
        )));
    }
    let mut input = Array2::zeros((z.nrows(), dz + ActionIndex::COUNT));
    input.slice_mut(s![.., ..dz]).assign(&z);
    for (i, a) in actions.iter().enumerate() {
        input[[i, dz + a.index()]] = 1.0;
    }
    Ok(input)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginationRollout {
    pub source: Option<StepRef>,
    pub steps: Vec<(LatentState, ActionIndex, LatentState)>,
}

impl ImaginationRollout {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

pub fn imagine_rollout(wm: &WorldModel, z0: LatentState, actions: &[ActionIndex], source: Option<StepRef>) -> Result<ImaginationRollout> {
    if actions.len() > MAX_IMAGINATION_HORIZON {
        return Err(Error::InvalidArgument(format!(
            "imagination horizon {} exceeds {MAX_IMAGINATION_HORIZON}",
            actions.len()
        )));
    }
    let mut steps = Vec::with_capacity(actions.len());
    let mut z = z0;
    for &a in actions {
        let next = wm.imagine_step(&z, a)?;
        steps.push((z, a, next.clone()));
        z = next;
    }
    Ok(ImaginationRollout { source, steps })
}

/// Encodes a uniformly drawn dataset observation.
pub fn reset_imagination(wm: &WorldModel, dataset: &Dataset, rng: &mut Rng) -> Result<(LatentState, StepRef)> {
    let total = dataset.total_steps();
    if total == 0 {
        return Err(Error::Empty("cannot reset imagination from an empty dataset".into()));
    }
    let mut k = rng.below(total);
    for (ti, t) in dataset.trajectories.iter().enumerate() {
        if k < t.steps.len() {
            let r = StepRef { trajectory: ti, step: k };
            return Ok((wm.encode(&dataset.get(r).observation)?, r));
        }
        k -= t.steps.len();
    }
    unreachable!("index drawn below total step count")
}

/// Trajectory indices held out for validation: the last
/// `ceil(fraction * n)` trajectories, leaving at least one for training.
pub fn holdout_split(n_traj: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((fraction * n_traj as f64).ceil() as usize).min(n_traj.saturating_sub(1));
    let cut = n_traj - held;
    ((0..cut).collect(), (cut..n_traj).collect())
}

fn pairs_of(dataset: &Dataset, trajectories: &[usize]) -> Vec<StepRef> {
    trajectories
        .iter()
        .flat_map(|&ti| {
            (0..dataset.trajectories[ti].steps.len().saturating_sub(1)).map(move |si| StepRef { trajectory: ti, step: si })
        })
        .collect()
}

struct Batch {
    x: Array2<f32>,
    x_next: Array2<f32>,
    actions: Vec<ActionIndex>,
}

fn assemble(dataset: &Dataset, refs: &[StepRef], cols: usize) -> Batch {
    let mut x = Vec::with_capacity(refs.len() * cols);
    let mut xn = Vec::with_capacity(refs.len() * cols);
    let mut actions = Vec::with_capacity(refs.len());
    for r in refs {
        let st = dataset.get(*r);
        observation_features_into(&st.observation, &mut x);
        let next = dataset.get(StepRef {
            trajectory: r.trajectory,
            step: r.step + 1,
        });
        observation_features_into(&next.observation, &mut xn);
        actions.push(st.action);
    }
    Batch {
        x: Array2::from_shape_vec((refs.len(), cols), x).expect("rows have equal length"),
        x_next: Array2::from_shape_vec((refs.len(), cols), xn).expect("rows have equal length"),
        actions,
    }
}

/// Per-sample mean of the reconstruction and weighted dynamics terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WmLoss {
    pub recon: f64,
    pub dynamics: f64,
    pub total: f64,
}

fn batch_loss(wm: &WorldModel, b: &Batch, lambda: f32) -> Result<WmLoss> {
    let z = wm.encoder.forward_batch(b.x.view())?;
    let recon = wm.decoder.forward_batch(z.view())?;
    let z_next = wm.encoder.forward_batch(b.x_next.view())?;
    let pred = wm.imagine_batch(z.view(), &b.actions)?;
    let n = b.x.nrows() as f64;
    let r = (&recon - &b.x).mapv(|v| (v as f64).powi(2)).sum() / n;
    let d = (&pred - &z_next).mapv(|v| (v as f64).powi(2)).sum() / n;
    Ok(WmLoss {
        recon: r,
        dynamics: d,
        total: r + lambda as f64 * d,
    })
}

/// Loss over every adjacent pair of the given trajectories.
pub fn evaluate_loss(wm: &WorldModel, dataset: &Dataset, trajectories: &[usize], lambda: f32) -> Result<WmLoss> {
    let pairs = pairs_of(dataset, trajectories);
    if pairs.is_empty() {
        return Err(Error::Empty("no adjacent pairs to evaluate".into()));
    }
    let cols = wm.encoder.input_dim();
    let mut acc = WmLoss::default();
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let l = batch_loss(wm, &assemble(dataset, chunk, cols), lambda)?;
        let w = chunk.len() as f64;
        acc.recon += l.recon * w;
        acc.dynamics += l.dynamics * w;
        acc.total += l.total * w;
    }
    let n = pairs.len() as f64;
    Ok(WmLoss {
        recon: acc.recon / n,
        dynamics: acc.dynamics / n,
        total: acc.total / n,
    })
}

/// Gradients of one mini-batch; returns the batch loss.
pub(crate) struct WmGrads {
    pub encoder: crate::nn::NetParams,
    pub transition: crate::nn::NetParams,
    pub decoder: crate::nn::NetParams,
    pub loss: WmLoss,
}

fn batch_grads(wm: &WorldModel, b: &Batch, lambda: f32) -> Result<WmGrads> {
    let n = b.x.nrows() as f32;
    let dz = wm.latent_dim();
    let enc = wm.encoder.forward_cached(b.x.view())?;
    let z = enc.output().clone();
    let dec = wm.decoder.forward_cached(z.view())?;
    let recon_err = dec.output() - &b.x;
    let z_target = wm.encoder.forward_batch(b.x_next.view())?;
    let t_in = transition_input(z.view(), &b.actions, dz)?;
    let tr = wm.transition.forward_cached(t_in.view())?;
    let dyn_err = &(tr.output() + &z) - &z_target;

    let (g_dec, dz_recon) = wm.decoder.backward(&dec, (recon_err.mapv(|v| 2.0 * v / n)).view())?;
    let g_pred = dyn_err.mapv(|v| 2.0 * lambda * v / n);
    let (g_tr, d_tin) = wm.transition.backward(&tr, g_pred.view())?;
    let mut dz_total = dz_recon;
    dz_total += &g_pred;
    dz_total += &d_tin.slice(s![.., ..dz]);
    let (g_enc, _) = wm.encoder.backward(&enc, dz_total.view())?;

    let recon = recon_err.mapv(|v| (v as f64).powi(2)).sum() / n as f64;
    let dynamics = dyn_err.mapv(|v| (v as f64).powi(2)).sum() / n as f64;
    Ok(WmGrads {
        encoder: g_enc,
        transition: g_tr,
        decoder: g_dec,
        loss: WmLoss {
            recon,
            dynamics,
            total: recon + lambda as f64 * dynamics,
        },
    })
}

/// Normalization sample: up to `max_rows` observations spread evenly over
/// the training trajectories.
fn normalization_sample(dataset: &Dataset, trajectories: &[usize], max_rows: usize) -> Array2<f32> {
    let refs: Vec<StepRef> = trajectories
        .iter()
        .flat_map(|&ti| (0..dataset.trajectories[ti].steps.len()).map(move |si| StepRef { trajectory: ti, step: si }))
        .collect();
    let stride = refs.len().div_ceil(max_rows).max(1);
    let feats: Vec<Vec<f32>> = refs
        .iter()
        .step_by(stride)
        .map(|r| observation_features(&dataset.get(*r).observation))
        .collect();
    let cols = feats.first().map_or(0, |f| f.len());
    stack_rows(feats.iter().map(|f| f.as_slice()), cols)
}

pub fn train_wm(dataset: &Dataset, cfg: &WmConfig, seed: u64) -> Result<WorldModel> {
    cfg.validate()?;
    if dataset.total_steps() == 0 {
        return Err(Error::Empty("world model training needs a non-empty dataset".into()));
    }
    dataset.validate()?;
    let (train_traj, mut held_traj) = holdout_split(dataset.trajectories.len(), cfg.holdout_fraction);
    let train_pairs = pairs_of(dataset, &train_traj);
    if train_pairs.is_empty() {
        return Err(Error::Empty("dataset has no adjacent observation pairs".into()));
    }
    if pairs_of(dataset, &held_traj).is_empty() {
        held_traj = train_traj.clone();
    }

    let root = Rng::new(seed);
    let mut init_rng = root.derive(0);
    let mut batch_rng = root.derive(1);
    let (h, w) = (dataset.header.height, dataset.header.width);
    let norm = normalization_sample(dataset, &train_traj, 20_000);
    let mut wm = WorldModel::init(h, w, cfg, Some(norm.view()), &mut init_rng)?;
    let initial = evaluate_loss(&wm, dataset, &held_traj, cfg.lambda_dyn)?;
    info!(
        "world model: {} training pairs, initial held-out loss {:.4}",
        train_pairs.len(),
        initial.total
    );

    let schedule = LrSchedule::step_decay(cfg.lr, cfg.steps, &cfg.lr_decay_at, cfg.lr_decay);
    let mut opt_enc = Adam::new(&wm.encoder.params, schedule.clone(), AdamConfig::default());
    let mut opt_tr = Adam::new(&wm.transition.params, schedule.clone(), AdamConfig::default());
    let mut opt_dec = Adam::new(&wm.decoder.params, schedule, AdamConfig::default());
    let cols = wm.encoder.input_dim();
    let mut refs = Vec::with_capacity(cfg.batch_size);
    let mut running = 0.0;
    for step in 0..cfg.steps {
        refs.clear();
        refs.extend((0..cfg.batch_size).map(|_| train_pairs[batch_rng.below(train_pairs.len())]));
        let batch = assemble(dataset, &refs, cols);
        let g = batch_grads(&wm, &batch, cfg.lambda_dyn)?;
        if !g.loss.total.is_finite() {
            return Err(Error::Divergence(format!(
                "world model loss became non-finite at step {step} (recon {}, dynamics {})",
                g.loss.recon, g.loss.dynamics
            )));
        }
        opt_enc.step(&mut wm.encoder.params, &g.encoder);
        opt_tr.step(&mut wm.transition.params, &g.transition);
        opt_dec.step(&mut wm.decoder.params, &g.decoder);
        running = if step == 0 { g.loss.total } else { 0.99 * running + 0.01 * g.loss.total };
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            debug!("world model step {}: running loss {running:.4}, lr {:.2e}", step + 1, opt_enc.lr());
        }
    }
    let last = evaluate_loss(&wm, dataset, &held_traj, cfg.lambda_dyn)?;
    info!(
        "world model: held-out loss {:.4} -> {:.4} (recon {:.4}, dynamics {:.5})",
        initial.total, last.total, last.recon, last.dynamics
    );
    wm.report = WmReport {
        steps: cfg.steps,
        initial_holdout_loss: initial.total,
        final_holdout_loss: last.total,
        final_holdout_recon: last.recon,
        final_holdout_dyn: last.dynamics,
        holdout_trajectories: held_traj.len(),
    };
    Ok(wm)
}

/// Held-out quality measures used by tests and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmDiagnostics {
    /// Median one-step prediction error over held-out pairs.
    pub median_prediction_error: f64,
    /// Median distance between consecutive encodings (identity baseline).
    pub median_identity_error: f64,
    /// Fraction of held-out frames whose decoded brightest pixel lies
    /// within 2 px (Chebyshev) of the robot's pixel.
    pub decoder_localization: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn diagnostics(wm: &WorldModel, dataset: &Dataset, trajectories: &[usize], renderer: &crate::dubins::Renderer) -> Result<WmDiagnostics> {
    let pairs = pairs_of(dataset, trajectories);
    if pairs.is_empty() {
        return Err(Error::Empty("no adjacent pairs for diagnostics".into()));
    }
    let cols = wm.encoder.input_dim();
    let pixels = cols - 2;
    let width = wm.width as usize;
    let mut pred_err = Vec::with_capacity(pairs.len());
    let mut id_err = Vec::with_capacity(pairs.len());
    let mut localized = 0usize;
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let b = assemble(dataset, chunk, cols);
        let z = wm.encoder.forward_batch(b.x.view())?;
        let zn = wm.encoder.forward_batch(b.x_next.view())?;
        let pred = wm.imagine_batch(z.view(), &b.actions)?;
        let recon = wm.decoder.forward_batch(z.view())?;
        for i in 0..chunk.len() {
            let row_dist = |a: ArrayView2<f32>, bb: ArrayView2<f32>| -> f64 {
                a.row(i)
                    .iter()
                    .zip(bb.row(i))
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            pred_err.push(row_dist(pred.view(), zn.view()));
            id_err.push(row_dist(z.view(), zn.view()));
            let row = recon.row(i);
            let (best, _) = row
                .iter()
                .take(pixels)
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (j, v)| if *v > bv { (j, *v) } else { (bi, bv) });
            let st = dataset.get(chunk[i]).state;
            let (col, r) = renderer.pixel_of(st.px, st.py);
            let (bc, br) = (best % width, best / width);
            if bc.abs_diff(col) <= 2 && br.abs_diff(r) <= 2 {
                localized += 1;
            }
        }
    }
    Ok(WmDiagnostics {
        median_prediction_error: median(pred_err),
        median_identity_error: median(id_err),
        decoder_localization: localized as f64 / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dubins::{generate_dataset, DubinsParams, RenderSpec};
    use crate::types::ActionSet;

    fn small_spec() -> RenderSpec {
        RenderSpec {
            height: 12,
            width: 12,
            ..RenderSpec::default()
        }
    }

    fn small_cfg(steps: u64) -> WmConfig {
        WmConfig {
            latent_dim: 4,
            encoder_hidden: vec![16, 8],
            transition_hidden: vec![8],
            steps,
            batch_size: 8,
            ..WmConfig::default()
        }
    }

    #[test]
    fn fresh_model_is_finite_and_pure() {
        let p = DubinsParams::default();
        let d = generate_dataset(2, 5, ActionSet::FULL, 1, &p, &small_spec()).unwrap();
        let wm = WorldModel::init(12, 12, &small_cfg(0), None, &mut Rng::new(2)).unwrap();
        let o = &d.trajectories[0].steps[0].observation;
        let z = wm.encode(o).unwrap();
        assert!(z.is_finite());
        assert_eq!(z, wm.encode(o).unwrap());
        let n1 = wm.imagine_step(&z, ActionIndex::LEFT).unwrap();
        assert_eq!(n1, wm.imagine_step(&z, ActionIndex::LEFT).unwrap());
        assert!(one_hot(3).is_err());
        assert_eq!(one_hot(2).unwrap(), [0.0, 0.0, 1.0]);

        let batch = wm.encode_batch(&[o, o]).unwrap();
        assert_eq!(batch.row(1).to_vec(), z.z);
        let mut wrong = o.clone();
        wrong.width = 10;
        assert!(wm.encode(&wrong).is_err());
    }

    #[test]
    fn zero_lambda_leaves_transition_gradient_zero() {
        let p = DubinsParams::default();
        let d = generate_dataset(3, 10, ActionSet::FULL, 4, &p, &small_spec()).unwrap();
        let wm = WorldModel::init(12, 12, &small_cfg(0), None, &mut Rng::new(5)).unwrap();
        let pairs = d.adjacent_pairs();
        let b = assemble(&d, &pairs[..4], wm.encoder.input_dim());
        let g = batch_grads(&wm, &b, 0.0).unwrap();
        assert_eq!(g.transition.max_abs(), 0.0);
        assert!(g.encoder.max_abs() > 0.0);
        let g1 = batch_grads(&wm, &b, 1.0).unwrap();
        assert!(g1.transition.max_abs() > 0.0);
    }

    #[test]
    fn single_trajectory_trains() {
        let p = DubinsParams::default();
        let d = generate_dataset(1, 20, ActionSet::FULL, 9, &p, &small_spec()).unwrap();
        let d = Dataset {
            trajectories: d.trajectories.into_iter().filter(|t| t.steps.len() > 1).collect(),
            ..d
        };
        if d.trajectories.is_empty() {
            return;
        }
        let wm = train_wm(&d, &small_cfg(20), 3).unwrap();
        assert!(wm.report.final_holdout_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let p = DubinsParams::default();
        let d = generate_dataset(6, 15, ActionSet::FULL, 11, &p, &small_spec()).unwrap();
        let a = train_wm(&d, &small_cfg(30), 7).unwrap();
        let b = train_wm(&d, &small_cfg(30), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reset_draws_are_reproducible_and_in_range() {
        let p = DubinsParams::default();
        let d = generate_dataset(4, 8, ActionSet::FULL, 2, &p, &small_spec()).unwrap();
        let wm = WorldModel::init(12, 12, &small_cfg(0), None, &mut Rng::new(1)).unwrap();
        let mut r1 = Rng::new(3);
        let mut r2 = Rng::new(3);
        for _ in 0..50 {
            let (z1, s1) = reset_imagination(&wm, &d, &mut r1).unwrap();
            let (z2, s2) = reset_imagination(&wm, &d, &mut r2).unwrap();
            assert_eq!((z1.clone(), s1), (z2, s2));
            assert_eq!(z1, wm.encode(&d.get(s1).observation).unwrap());
        }

        let one = Dataset {
            header: d.header,
            trajectories: vec![crate::types::Trajectory {
                steps: vec![d.trajectories[0].steps[0].clone()],
                terminated: crate::types::TerminatedReason::Horizon,
            }],
        };
        let want = wm.encode(&one.trajectories[0].steps[0].observation).unwrap();
        for _ in 0..5 {
            assert_eq!(reset_imagination(&wm, &one, &mut r1).unwrap().0, want);
        }
        let empty = Dataset {
            header: d.header,
            trajectories: vec![],
        };
        assert!(matches!(reset_imagination(&wm, &empty, &mut r1), Err(Error::Empty(_))));
    }

    #[test]
    fn rollout_horizon_is_bounded_and_consistent() {
        let wm = WorldModel::init(12, 12, &small_cfg(0), None, &mut Rng::new(1)).unwrap();
        let z0 = LatentState { z: vec![0.1, -0.2, 0.3, 0.0] };
        let acts = vec![ActionIndex::LEFT; MAX_IMAGINATION_HORIZON];
        let r = imagine_rollout(&wm, z0.clone(), &acts, None).unwrap();
        assert_eq!(r.horizon(), MAX_IMAGINATION_HORIZON);
        for (z, a, zn) in &r.steps {
            assert_eq!(&wm.imagine_step(z, *a).unwrap(), zn);
        }
        let too_long = vec![ActionIndex::LEFT; MAX_IMAGINATION_HORIZON + 1];
        assert!(imagine_rollout(&wm, z0, &too_long, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let wm = WorldModel::init(12, 12, &small_cfg(0), None, &mut Rng::new(1)).unwrap();
        let ck = wm.to_checkpoint(json!({"seed": 1}));
        let back = WorldModel::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(back, wm);
    }

    #[test]
    fn holdout_split_keeps_training_data() {
        assert_eq!(holdout_split(10, 0.1), ((0..9).collect(), vec![9]));
        assert_eq!(holdout_split(1, 0.5), (vec![0], vec![]));
        assert_eq!(holdout_split(5, 0.0), ((0..5).collect(), vec![]));
    }
}
