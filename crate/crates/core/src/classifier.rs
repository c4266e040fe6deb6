//! Latent failure classifier ℓ(z): a small MLP with a tanh-squashed output
//! trained with a two-sided hinge at margin δ on frozen encodings.

use log::info;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Architecture, Checkpoint, LrSchedule, Mlp, NetSpec};
use crate::rng::Rng;
use crate::types::Dataset;
use crate::world_model::{holdout_split, LatentState, WorldModel};

/// Largest f32 below 1; squashed margins are kept strictly inside (−1, 1).
pub const MARGIN_BOUND: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub delta: f32,
    pub squash: bool,
    pub steps: u64,
    /// Total batch size; half safe, half failure.
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            delta: 0.5,
            squash: true,
            steps: 5_000,
            batch_size: 64,
            lr: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || (self.squash && self.delta >= 1.0) {
            return Err(Error::Config("classifier delta must be positive (and below 1 when squashed)".into()));
        }
        if self.batch_size < 2 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("classifier batch_size >= 2, lr > 0, holdout_fraction in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn classifier_arch(latent_dim: usize, cfg: &ClassifierConfig) -> Architecture {
    let out = if cfg.squash { Activation::Tanh } else { Activation::Identity };
    Architecture::mlp(latent_dim, &cfg.hidden, 1, Activation::Relu, out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub holdout_failure_recall: f64,
    pub holdout_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureClassifier {
    pub net: Mlp,
    pub delta: f32,
    pub squash: bool,
    pub report: ClassifierReport,
}

impl FailureClassifier {
    pub fn new(net: Mlp, delta: f32, squash: bool) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Shape("classifier must have a single output".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument("classifier delta must be positive".into()));
        }
        Ok(Self {
            net,
            delta,
            squash,
            report: ClassifierReport::default(),
        })
    }

    fn bound(&self, v: f32) -> f32 {
        // tanh rounds to exactly ±1 in f32 for large inputs.
        if self.squash {
            v.clamp(-MARGIN_BOUND, MARGIN_BOUND)
        } else {
            v
        }
    }

    pub fn latent_margin(&self, z: &LatentState) -> Result<f32> {
        Ok(self.bound(self.net.forward(&z.z)?[0]))
    }

    pub fn margin_batch(&self, z: ArrayView2<f32>) -> Result<Vec<f32>> {
        let mut v = self.net.forward_batch(z)?.into_raw_vec_and_offset().0;
        v.iter_mut().for_each(|x| *x = self.bound(*x));
        Ok(v)
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Checkpoint {
        metadata["classifier"] = json!({
            "delta": self.delta,
            "squash": self.squash,
            "report": self.report,
        });
        Checkpoint::new(metadata).with("classifier", self.net.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata["classifier"];
        let delta = meta["delta"]
            .as_f64()
            .ok_or_else(|| Error::Shape("classifier metadata lacks `delta`".into()))? as f32;
        let squash = meta["squash"].as_bool().unwrap_or(true);
        let mut c = Self::new(ck.get("classifier")?.clone(), delta, squash)?;
        c.report = serde_json::from_value(meta["report"].clone()).unwrap_or_default();
        Ok(c)
    }
}

/// Mean hinge over safe outputs plus mean hinge over failure outputs.
pub fn hinge_loss(safe: &[f32], fail: &[f32], delta: f32) -> Result<f64> {
    if safe.is_empty() || fail.is_empty() {
        return Err(Error::Empty("classifier loss needs both safe and failure latents".into()));
    }
    let d = delta as f64;
    let s = safe.iter().map(|&v| (d - v as f64).max(0.0)).sum::<f64>() / safe.len() as f64;
    let f = fail.iter().map(|&v| (d + v as f64).max(0.0)).sum::<f64>() / fail.len() as f64;
    Ok(s + f)
}

pub fn classifier_loss(clf: &FailureClassifier, safe: ArrayView2<f32>, fail: ArrayView2<f32>) -> Result<f64> {
    if safe.nrows() == 0 || fail.nrows() == 0 {
        return Err(Error::Empty("classifier loss needs both safe and failure latents".into()));
    }
    hinge_loss(&clf.margin_batch(safe)?, &clf.margin_batch(fail)?, clf.delta)
}

fn gather(z: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((rows.len(), z.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&z.row(r));
    }
    out
}

/// One optimizer step on a class-balanced batch; returns the batch loss.
fn train_step(clf: &mut FailureClassifier, opt: &mut Adam, safe: &Array2<f32>, fail: &Array2<f32>) -> Result<f64> {
    let n_s = safe.nrows();
    let mut x = Array2::zeros((n_s + fail.nrows(), safe.ncols()));
    x.slice_mut(ndarray::s![..n_s, ..]).assign(safe);
    x.slice_mut(ndarray::s![n_s.., ..]).assign(fail);
    let cache = clf.net.forward_cached(x.view())?;
    let out = cache.output();
    let d = clf.delta;
    let mut g = Array2::zeros(out.dim());
    let (mut ls, mut lf) = (0.0f64, 0.0f64);
    for i in 0..out.nrows() {
        let v = out[[i, 0]];
        if i < n_s {
            if d - v > 0.0 {
                g[[i, 0]] = -1.0 / n_s as f32;
                ls += (d - v) as f64;
            }
        } else if d + v > 0.0 {
            g[[i, 0]] = 1.0 / fail.nrows() as f32;
            lf += (d + v) as f64;
        }
    }
    let (grads, _) = clf.net.backward(&cache, g.view())?;
    opt.step(&mut clf.net.params, &grads);
    Ok(ls / n_s as f64 + lf / fail.nrows() as f64)
}

/// Encodings and labels of every step in the given trajectories.
fn encode_frames(wm: &WorldModel, dataset: &Dataset, trajectories: &[usize]) -> Result<(Array2<f32>, Vec<bool>)> {
    let steps: Vec<_> = trajectories
        .iter()
        .flat_map(|&t| dataset.trajectories[t].steps.iter())
        .collect();
    let obs: Vec<_> = steps.iter().map(|s| &s.observation).collect();
    let labels = steps.iter().map(|s| s.failure_label).collect();
    Ok((wm.encode_batch(&obs)?, labels))
}

pub fn train_classifier(wm: &WorldModel, dataset: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<FailureClassifier> {
    cfg.validate()?;
    let (train_traj, held_traj) = holdout_split(dataset.trajectories.len(), cfg.holdout_fraction);
    let (z, labels) = encode_frames(wm, dataset, &train_traj)?;
    let fail_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let safe_idx: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if fail_idx.is_empty() || safe_idx.is_empty() {
        return Err(Error::SingleClass(format!(
            "{} safe and {} failure training frames",
            safe_idx.len(),
            fail_idx.len()
        )));
    }

    let root = Rng::new(seed);
    let mut rng = root.derive(1);
    let net = Mlp::new(NetSpec::new(classifier_arch(wm.latent_dim(), cfg))?, &mut root.derive(0));
    let mut clf = FailureClassifier::new(net, cfg.delta, cfg.squash)?;
    let mut opt = Adam::new(&clf.net.params, LrSchedule::constant(cfg.lr), AdamConfig::default());
    let half = cfg.batch_size / 2;
    let mut loss = f64::NAN;
    for step in 0..cfg.steps {
        let s_rows: Vec<usize> = (0..half).map(|_| safe_idx[rng.below(safe_idx.len())]).collect();
        let f_rows: Vec<usize> = (0..cfg.batch_size - half).map(|_| fail_idx[rng.below(fail_idx.len())]).collect();
        loss = train_step(&mut clf, &mut opt, &gather(&z, &s_rows), &gather(&z, &f_rows))?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("classifier loss non-finite at step {step}")));
        }
    }

    let eval_traj = if held_traj.is_empty() { &train_traj } else { &held_traj };
    let (zh, lh) = encode_frames(wm, dataset, eval_traj)?;
    let m = clf.margin_batch(zh.view())?;
    let correct = m.iter().zip(&lh).filter(|(v, fail)| (**v < 0.0) == **fail).count();
    let n_fail = lh.iter().filter(|f| **f).count();
    let caught = m.iter().zip(&lh).filter(|(v, fail)| **fail && **v < 0.0).count();
    clf.report = ClassifierReport {
        final_loss: loss,
        holdout_accuracy: correct as f64 / lh.len().max(1) as f64,
        holdout_failure_recall: if n_fail == 0 { f64::NAN } else { caught as f64 / n_fail as f64 },
        holdout_frames: lh.len(),
    };
    info!(
        "classifier: held-out accuracy {:.4}, failure recall {:.4} over {} frames",
        clf.report.holdout_accuracy, clf.report.holdout_failure_recall, clf.report.holdout_frames
    );
    Ok(clf)
}
