//! Monitor quality against the grid ground truth, closed-loop shielding
//! rollouts in the true environment, the biased-coverage ablation, and JSON
//! / PGM report output.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dubins::{margin_gt, step_clamped, DubinsParams, Renderer};
use crate::error::{Error, Result};
use crate::grid::{policy_gt, GridSpec, ValueGrid};
use crate::reach::{priv_features, SafetyCritic};
use crate::types::{ActionIndex, ActionSet, State};
use crate::world_model::{observation_features, WorldModel};

/// States are scored in chunks of this size.
const PROBE_CHUNK: usize = 4096;

/// Sign agreement with the ground truth as fractions of all probes; "safe"
/// (V ≥ 0) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_safe: f64,
    pub false_safe: f64,
    pub false_unsafe: f64,
    pub true_unsafe: f64,
}

impl ConfusionCounts {
    pub fn from_values(truth: &[f32], predicted: &[f32]) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(Error::Shape(format!(
                "{} truth values vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = [0usize; 4];
        for (t, p) in truth.iter().zip(predicted) {
            let idx = match (*t >= 0.0, *p >= 0.0) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            c[idx] += 1;
        }
        let n = truth.len() as f64;
        Ok(Self {
            true_safe: c[0] as f64 / n,
            false_safe: c[1] as f64 / n,
            false_unsafe: c[2] as f64 / n,
            true_unsafe: c[3] as f64 / n,
        })
    }
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    let p_den = c.true_safe + c.false_safe;
    let r_den = c.true_safe + c.false_unsafe;
    if p_den == 0.0 || r_den == 0.0 {
        return 0.0;
    }
    let (p, r) = (c.true_safe / p_den, c.true_safe / r_den);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Anything that scores true states with a safety value.
pub trait Monitor: Sync {
    fn values(&self, states: &[State]) -> Result<Vec<f32>>;
}

impl Monitor for ValueGrid {
    fn values(&self, states: &[State]) -> Result<Vec<f32>> {
        Ok(states.iter().map(|s| self.interpolate(s) as f32).collect())
    }
}

/// Privileged critic evaluated on the true state.
pub struct PrivMonitor<'a>(pub &'a SafetyCritic);

impl Monitor for PrivMonitor<'_> {
    fn values(&self, states: &[State]) -> Result<Vec<f32>> {
        let x = priv_matrix(states);
        self.0.values_batch(x.view())
    }
}

/// Latent critic evaluated on the encoding of a fresh render of each state.
pub struct LatentMonitor<'a> {
    pub wm: &'a WorldModel,
    pub critic: &'a SafetyCritic,
    pub renderer: &'a Renderer,
}

impl LatentMonitor<'_> {
    fn latents(&self, states: &[State]) -> Result<Array2<f32>> {
        encode_states(self.wm, self.renderer, states)
    }
}

impl Monitor for LatentMonitor<'_> {
    fn values(&self, states: &[State]) -> Result<Vec<f32>> {
        let z = self.latents(states)?;
        self.critic.values_batch(z.view())
    }
}

fn priv_matrix(states: &[State]) -> Array2<f32> {
    let mut x = Array2::zeros((states.len(), 4));
    for (i, s) in states.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&priv_features(s)));
    }
    x
}

/// Renders and encodes every state; row `i` is the latent of `states[i]`.
pub fn encode_states(wm: &WorldModel, renderer: &Renderer, states: &[State]) -> Result<Array2<f32>> {
    let obs: Vec<_> = states.par_iter().map(|s| renderer.render(s)).collect();
    let refs: Vec<_> = obs.iter().collect();
    wm.encode_batch(&refs)
}

/// Scores every node of `spec`, chunked to bound memory.
pub fn probe_values(monitor: &dyn Monitor, spec: &GridSpec) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(spec.len());
    let mut states = Vec::with_capacity(PROBE_CHUNK);
    for start in (0..spec.len()).step_by(PROBE_CHUNK) {
        states.clear();
        states.extend((start..(start + PROBE_CHUNK).min(spec.len())).map(|i| spec.node_state(i)));
        out.extend(monitor.values(&states)?);
    }
    Ok(out)
}

/// Confusion of `monitor` against the ground-truth grid over all its nodes.
pub fn confusion(monitor: &dyn Monitor, gt: &ValueGrid) -> Result<ConfusionCounts> {
    let predicted = probe_values(monitor, &gt.spec)?;
    ConfusionCounts::from_values(&gt.values, &predicted)
}

pub fn unsafe_fraction(values: &[f32]) -> f64 {
    values.iter().filter(|v| **v < 0.0).count() as f64 / values.len().max(1) as f64
}

/// A best-effort safety policy acting on true states.
pub trait ShieldPolicy: Sync {
    fn actions(&self, states: &[State]) -> Result<Vec<ActionIndex>>;
}

pub struct GridPolicy<'a> {
    pub grid: &'a ValueGrid,
    pub params: &'a DubinsParams,
    pub actions: ActionSet,
}

impl ShieldPolicy for GridPolicy<'_> {
    fn actions(&self, states: &[State]) -> Result<Vec<ActionIndex>> {
        Ok(states
            .iter()
            .map(|s| policy_gt(self.grid, s, self.params, self.actions))
            .collect())
    }
}

pub struct PrivPolicy<'a>(pub &'a SafetyCritic);

impl ShieldPolicy for PrivPolicy<'_> {
    fn actions(&self, states: &[State]) -> Result<Vec<ActionIndex>> {
        self.0.shield_batch(priv_matrix(states).view())
    }
}

/// Latent shield policy closing the loop through renders of the true state.
pub struct LatentPolicy<'a> {
    pub wm: &'a WorldModel,
    pub critic: &'a SafetyCritic,
    pub renderer: &'a Renderer,
}

impl ShieldPolicy for LatentPolicy<'_> {
    fn actions(&self, states: &[State]) -> Result<Vec<ActionIndex>> {
        let z = encode_states(self.wm, self.renderer, states)?;
        self.critic.shield_batch(z.view())
    }
}

pub struct ConstantPolicy(pub ActionIndex);

impl ShieldPolicy for ConstantPolicy {
    fn actions(&self, states: &[State]) -> Result<Vec<ActionIndex>> {
        Ok(vec![self.0; states.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub states: Vec<State>,
    pub actions: Vec<ActionIndex>,
    /// Index into `states` of the first state inside the failure set.
    pub failure_step: Option<usize>,
}

impl RolloutTrace {
    pub fn failed(&self) -> bool {
        self.failure_step.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub n_initial: usize,
    pub n_safe_maintained: usize,
    pub traces: Vec<RolloutTrace>,
}

impl RolloutReport {
    pub fn safe_fraction(&self) -> f64 {
        self.n_safe_maintained as f64 / self.n_initial.max(1) as f64
    }
}

/// Runs `policy` from every start for `horizon` steps of the true (clamped)
/// dynamics. A rollout stops at its first state with `margin_gt < 0`.
pub fn rollout_eval(policy: &dyn ShieldPolicy, starts: &[State], horizon: usize, params: &DubinsParams) -> Result<RolloutReport> {
    let mut traces: Vec<RolloutTrace> = starts
        .iter()
        .map(|s| RolloutTrace {
            states: vec![*s],
            actions: Vec::new(),
            failure_step: (margin_gt(s, params) < 0.0).then_some(0),
        })
        .collect();
    for _ in 0..horizon {
        let live: Vec<usize> = (0..traces.len()).filter(|&i| !traces[i].failed()).collect();
        if live.is_empty() {
            break;
        }
        let current: Vec<State> = live.iter().map(|&i| *traces[i].states.last().expect("non-empty")).collect();
        let acts = policy.actions(&current)?;
        for ((&i, s), a) in live.iter().zip(&current).zip(acts) {
            let next = step_clamped(s, a, params);
            let t = &mut traces[i];
            t.actions.push(a);
            t.states.push(next);
            if margin_gt(&next, params) < 0.0 {
                t.failure_step = Some(t.states.len() - 1);
            }
        }
    }
    let n_safe = traces.iter().filter(|t| !t.failed()).count();
    Ok(RolloutReport {
        n_initial: starts.len(),
        n_safe_maintained: n_safe,
        traces,
    })
}

/// Binary P5 raster of one heading slice: unsafe nodes 0, safe nodes 255.
/// Row 0 is the largest y; column 0 the smallest x.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRaster {
    pub theta: f64,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl SliceRaster {
    pub fn from_values(spec: &GridSpec, values: &[f32], theta: f64) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape("slice values do not match the probe grid".into()));
        }
        let it = spec.nearest_theta_index(theta);
        let (nx, ny) = (spec.counts[0], spec.counts[1]);
        let mut pixels = vec![0u8; nx * ny];
        for ix in 0..nx {
            for iy in 0..ny {
                let v = values[spec.index(ix, iy, it)];
                pixels[(ny - 1 - iy) * nx + ix] = if v < 0.0 { 0 } else { 255 };
            }
        }
        Ok(Self {
            theta: spec.coord(2, it),
            width: nx,
            height: ny,
            pixels,
        })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub unsafe_fraction_full: f64,
    pub unsafe_fraction_restricted: f64,
    pub failure_fraction: f64,
    pub slice_thetas: Vec<f64>,
}

/// Unsafe fractions of two monitors over `spec` plus heading-slice rasters
/// (full first, restricted second, per θ).
pub fn ablation_run(
    full: &dyn Monitor,
    restricted: &dyn Monitor,
    spec: &GridSpec,
    params: &DubinsParams,
    thetas: &[f64],
) -> Result<(AblationReport, Vec<(SliceRaster, SliceRaster)>)> {
    let vf = probe_values(full, spec)?;
    let vr = probe_values(restricted, spec)?;
    let failures = (0..spec.len())
        .filter(|&i| margin_gt(&spec.node_state(i), params) < 0.0)
        .count();
    let rasters = thetas
        .iter()
        .map(|&t| Ok((SliceRaster::from_values(spec, &vf, t)?, SliceRaster::from_values(spec, &vr, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        AblationReport {
            unsafe_fraction_full: unsafe_fraction(&vf),
            unsafe_fraction_restricted: unsafe_fraction(&vr),
            failure_fraction: failures as f64 / spec.len() as f64,
            slice_thetas: rasters.iter().map(|(r, _)| r.theta).collect(),
        },
        rasters,
    ))
}

/// Machine-readable evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub config_hash: String,
    pub metrics: serde_json::Value,
    pub artifacts: Vec<String>,
}

pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Observation features for a state (render then flatten); exposed for
/// callers that batch their own encodes.
pub fn state_features(renderer: &Renderer, s: &State) -> Vec<f32> {
    observation_features(&renderer.render(s))
}
