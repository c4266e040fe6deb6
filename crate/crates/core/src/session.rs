//! Fixed-step teleoperation session: a true Dubins plant driven by a sticky
//! human request, filtered every tick. Transport-free so the websocket
//! service and offline scripted evaluations share one loop body.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::FailureClassifier;
use crate::dubins::{margin_gt, step_clamped, DubinsParams, Renderer};
use crate::error::{Error, Result};
use crate::filter::{filter_cmdp, filter_hj, FilterConfig, FilterDecision, FilterMode, Plant};
use crate::grid::ValueGrid;
use crate::reach::{RiskCritic, SafetyCritic};
use crate::rng::Rng;
use crate::types::{ActionIndex, State};
use crate::world_model::WorldModel;

/// Respawns must clear the ground-truth zero level by this much.
pub const RESPAWN_MARGIN: f64 = 0.05;

/// Frozen models shared read-only by every session.
pub struct ModelBundle {
    pub params: DubinsParams,
    pub renderer: Renderer,
    /// Scale of the privileged margin `tanh(k·ℓ_gt)` the privileged critic was trained on.
    pub margin_scale: f64,
    pub gt: Option<ValueGrid>,
    pub wm: Option<WorldModel>,
    pub classifier: Option<FailureClassifier>,
    pub latent: Option<SafetyCritic>,
    pub privileged: Option<SafetyCritic>,
    pub risk: Option<RiskCritic>,
}

impl ModelBundle {
    pub fn supports(&self, mode: FilterMode) -> bool {
        let latent_stack = self.wm.is_some() && self.classifier.is_some();
        match mode {
            FilterMode::LatentHj => latent_stack && self.latent.is_some(),
            FilterMode::PrivHj => self.privileged.is_some(),
            FilterMode::Cmdp => latent_stack && self.risk.is_some(),
            FilterMode::Off => true,
        }
    }

    /// Filters one request at a true state.
    pub fn decide(&self, s: &State, requested: ActionIndex, cfg: &FilterConfig) -> Result<FilterDecision> {
        let mode = match cfg.mode {
            // With the filter off, report the best monitor that is loaded.
            FilterMode::Off => [FilterMode::LatentHj, FilterMode::PrivHj]
                .into_iter()
                .find(|m| self.supports(*m))
                .unwrap_or(FilterMode::Off),
            m => m,
        };
        if !self.supports(mode) {
            return Err(Error::ModeMismatch(format!("no models loaded for mode {}", mode.as_str())));
        }
        match mode {
            FilterMode::LatentHj | FilterMode::Cmdp => {
                let (wm, clf) = (self.wm.as_ref().expect("checked"), self.classifier.as_ref().expect("checked"));
                let z = wm.encode(&self.renderer.render(s))?;
                if mode == FilterMode::Cmdp {
                    filter_cmdp(self.risk.as_ref().expect("checked"), wm, clf, &z, requested, cfg)
                } else {
                    let plant = Plant::Latent { wm, clf, z: &z };
                    filter_hj(self.latent.as_ref().expect("checked"), plant, requested, cfg)
                }
            }
            FilterMode::PrivHj => {
                let plant = Plant::Privileged {
                    params: &self.params,
                    state: s,
                    margin_scale: self.margin_scale,
                };
                filter_hj(self.privileged.as_ref().expect("checked"), plant, requested, cfg)
            }
            FilterMode::Off => {
                let m = margin_gt(s, &self.params);
                Ok(FilterDecision {
                    executed: requested,
                    requested,
                    overridden: false,
                    monitor_value: m,
                    margin_value: m,
                })
            }
        }
    }

    /// Uniform state with ground-truth value (or margin, without a grid)
    /// above [`RESPAWN_MARGIN`].
    pub fn sample_respawn(&self, rng: &mut Rng) -> State {
        loop {
            let s = self.params.sample_uniform(rng);
            let v = match &self.gt {
                Some(g) => g.interpolate(&s),
                None => margin_gt(&s, &self.params),
            };
            if v > RESPAWN_MARGIN {
                return s;
            }
        }
    }
}

/// Partial filter-config update; absent fields keep their value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigPatch {
    pub mode: Option<FilterMode>,
    pub epsilon: Option<f64>,
    pub epsilon_risk: Option<f64>,
    pub enabled: Option<bool>,
}

impl ConfigPatch {
    pub fn apply_to(&self, cfg: &FilterConfig) -> FilterConfig {
        FilterConfig {
            mode: self.mode.unwrap_or(cfg.mode),
            epsilon: self.epsilon.unwrap_or(cfg.epsilon),
            epsilon_risk: self.epsilon_risk.unwrap_or(cfg.epsilon_risk),
            enabled: self.enabled.unwrap_or(cfg.enabled),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    Action(ActionIndex),
    Reset(Option<State>),
    Config(ConfigPatch),
}

/// Why a command was rejected; the session state is left unchanged.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommandError {
    #[error("reset target lies inside the failure set")]
    ResetInFailure,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("mode {0} has no loaded models")]
    ModeUnavailable(&'static str),
}

impl CommandError {
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::ResetInFailure => "reset_in_failure",
            CommandError::InvalidState(_) => "invalid_state",
            CommandError::InvalidConfig(_) => "invalid_config",
            CommandError::ModeUnavailable(_) => "mode_unavailable",
        }
    }
}

/// Everything published about one tick. `state` is the state the decision was
/// made at; the next tick's state is `step_clamped(state, executed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: u64,
    pub state: State,
    pub value: f64,
    pub margin: f64,
    pub requested: ActionIndex,
    pub executed: ActionIndex,
    pub overridden: bool,
    pub failure: bool,
}

pub struct Session {
    bundle: Arc<ModelBundle>,
    config: FilterConfig,
    state: State,
    tick: u64,
    requested: ActionIndex,
    rng: Rng,
}

impl Session {
    pub fn new(bundle: Arc<ModelBundle>, config: FilterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !bundle.supports(config.mode) {
            return Err(Error::ModeMismatch(format!("no models loaded for mode {}", config.mode.as_str())));
        }
        let mut rng = Rng::new(seed);
        let state = bundle.sample_respawn(&mut rng);
        Ok(Self {
            bundle,
            config,
            state,
            tick: 0,
            requested: ActionIndex::STRAIGHT,
            rng,
        })
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn config(&self) -> FilterConfig {
        self.config
    }

    pub fn requested(&self) -> ActionIndex {
        self.requested
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn handle(&mut self, cmd: Command) -> Result<(), CommandError> {
        match cmd {
            Command::Action(a) => self.requested = a,
            Command::Reset(None) => self.state = self.bundle.sample_respawn(&mut self.rng),
            Command::Reset(Some(s)) => {
                if !self.bundle.params.in_bounds(&s) {
                    return Err(CommandError::InvalidState("outside the workspace bounds".into()));
                }
                if margin_gt(&s, &self.bundle.params) < 0.0 {
                    return Err(CommandError::ResetInFailure);
                }
                self.state = s;
            }
            Command::Config(patch) => {
                let next = patch.apply_to(&self.config);
                next.validate().map_err(|e| CommandError::InvalidConfig(e.to_string()))?;
                if !self.bundle.supports(next.mode) {
                    return Err(CommandError::ModeUnavailable(next.mode.as_str()));
                }
                self.config = next;
            }
        }
        Ok(())
    }

    /// Filters the sticky request at the current state, publishes the
    /// decision, then advances the true plant.
    pub fn tick(&mut self) -> Result<TickRecord> {
        let s = self.state;
        let d = self.bundle.decide(&s, self.requested, &self.config)?;
        let record = TickRecord {
            t: self.tick,
            state: s,
            value: d.monitor_value,
            margin: d.margin_value,
            requested: d.requested,
            executed: d.executed,
            overridden: d.overridden,
            failure: margin_gt(&s, &self.bundle.params) < 0.0,
        };
        self.state = step_clamped(&s, d.executed, &self.bundle.params);
        self.tick += 1;
        Ok(record)
    }
}

/// Start at distance `dist` from the obstacle centre along `bearing`, headed
/// straight at the centre.
pub fn aimed_start(params: &DubinsParams, dist: f64, bearing: f64) -> Result<State> {
    let [cx, cy] = params.obstacle_center;
    let s = State::new(cx + dist * bearing.cos(), cy + dist * bearing.sin(), bearing + std::f64::consts::PI)?;
    if !params.in_bounds(&s) {
        return Err(Error::InvalidArgument(format!("aimed start {:?} is outside the workspace", s.to_array())));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub ticks: usize,
    pub overridden: usize,
    pub failures: usize,
}

/// Runs `ticks` ticks, re-issuing the script's request before every tick.
pub fn run_scripted(
    session: &mut Session,
    script: impl Fn(&State) -> ActionIndex,
    ticks: usize,
) -> Result<(Vec<TickRecord>, EpisodeStats)> {
    let mut records = Vec::with_capacity(ticks);
    let mut stats = EpisodeStats::default();
    for _ in 0..ticks {
        let a = script(&session.state());
        session.handle(Command::Action(a)).expect("action commands always apply");
        let r = session.tick()?;
        stats.ticks += 1;
        stats.overridden += usize::from(r.overridden);
        stats.failures += usize::from(r.failure);
        records.push(r);
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dubins::RenderSpec;
    use crate::grid::{solve_gt, GridSpec};
    use crate::reach::{critic_arch, CriticKind, CriticReport};
    use crate::nn::{Activation, Mlp, NetSpec};
    use crate::types::ActionSet;
    use std::f64::consts::PI;

    fn constant_priv_critic(q: [f32; 3]) -> SafetyCritic {
        let spec = NetSpec::new(critic_arch(4, &[], Activation::Identity)).unwrap();
        let mut net = Mlp::new(spec, &mut Rng::new(0));
        net.params.weights[0].fill(0.0);
        net.params.biases[0] = ndarray::Array1::from(q.to_vec());
        SafetyCritic {
            kind: CriticKind::Privileged,
            actions: ActionSet::FULL,
            online: net.clone(),
            target: net,
            report: CriticReport::default(),
        }
    }

    fn bundle(privileged: Option<SafetyCritic>) -> Arc<ModelBundle> {
        let params = DubinsParams::default();
        let gt = solve_gt(&params, GridSpec::for_params(&params, 31, 31, 16), 1e-5, 2000).unwrap();
        Arc::new(ModelBundle {
            params,
            renderer: Renderer::new(RenderSpec::default(), params).unwrap(),
            margin_scale: 4.0,
            gt: Some(gt),
            wm: None,
            classifier: None,
            latent: None,
            privileged,
            risk: None,
        })
    }

    fn off() -> FilterConfig {
        FilterConfig {
            mode: FilterMode::Off,
            ..Default::default()
        }
    }

    #[test]
    fn sticky_default_is_straight() {
        let mut s = Session::new(bundle(None), off(), 1).unwrap();
        for _ in 0..5 {
            assert_eq!(s.tick().unwrap().requested, ActionIndex::STRAIGHT);
        }
        s.handle(Command::Action(ActionIndex::LEFT)).unwrap();
        for _ in 0..3 {
            assert_eq!(s.tick().unwrap().requested, ActionIndex::LEFT);
        }
    }

    #[test]
    fn ticks_follow_true_dynamics() {
        let mut s = Session::new(bundle(None), off(), 2).unwrap();
        let mut prev = s.tick().unwrap();
        for k in 0..50 {
            s.handle(Command::Action(ActionIndex::new(k % 3).unwrap())).unwrap();
            let r = s.tick().unwrap();
            assert_eq!(r.t, prev.t + 1);
            assert_eq!(r.state, step_clamped(&prev.state, prev.executed, &s.bundle().params));
            prev = r;
        }
    }

    #[test]
    fn reset_rules() {
        let b = bundle(None);
        let mut s = Session::new(b.clone(), off(), 3).unwrap();
        let target = State::new(0.8, 0.8, PI).unwrap();
        s.handle(Command::Reset(Some(target))).unwrap();
        assert_eq!(s.state(), target);
        let inside = State::new(0.1, 0.0, 0.0).unwrap();
        assert_eq!(s.handle(Command::Reset(Some(inside))), Err(CommandError::ResetInFailure));
        assert_eq!(s.state(), target);
        for _ in 0..20 {
            s.handle(Command::Reset(None)).unwrap();
            assert!(b.gt.as_ref().unwrap().interpolate(&s.state()) > RESPAWN_MARGIN);
        }
    }

    #[test]
    fn config_patch_applies_between_ticks() {
        let mut s = Session::new(bundle(Some(constant_priv_critic([0.0, 0.0, 0.0]))), off(), 4).unwrap();
        let patch = ConfigPatch {
            epsilon: Some(0.3),
            ..Default::default()
        };
        s.handle(Command::Config(patch)).unwrap();
        assert_eq!(s.config().epsilon, 0.3);
        assert_eq!(s.config().mode, FilterMode::Off);
        let bad = ConfigPatch {
            mode: Some(FilterMode::LatentHj),
            ..Default::default()
        };
        assert_eq!(s.handle(Command::Config(bad)), Err(CommandError::ModeUnavailable("latent_hj")));
        let nan = ConfigPatch {
            epsilon: Some(f64::NAN),
            ..Default::default()
        };
        assert!(matches!(s.handle(Command::Config(nan)), Err(CommandError::InvalidConfig(_))));
        assert_eq!(s.config().epsilon, 0.3);
    }

    #[test]
    fn privileged_filter_overrides_below_threshold() {
        // Q = (0.3, -0.5, 0.1): every value is below ε, the shield picks right.
        let mut s = Session::new(
            bundle(Some(constant_priv_critic([0.3, -0.5, 0.1]))),
            FilterConfig {
                mode: FilterMode::PrivHj,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let r = s.tick().unwrap();
        assert!(r.overridden);
        assert_eq!(r.executed, ActionIndex::RIGHT);
        s.handle(Command::Config(ConfigPatch {
            enabled: Some(false),
            ..Default::default()
        }))
        .unwrap();
        let r = s.tick().unwrap();
        assert!(!r.overridden);
        assert_eq!(r.executed, ActionIndex::STRAIGHT);
    }

    #[test]
    fn unfiltered_straight_drive_reaches_the_obstacle() {
        let b = bundle(None);
        for k in 0..16 {
            let bearing = k as f64 * std::f64::consts::TAU / 16.0;
            let mut s = Session::new(b.clone(), off(), k).unwrap();
            s.handle(Command::Reset(Some(aimed_start(&b.params, 0.9, bearing).unwrap()))).unwrap();
            let (records, stats) = run_scripted(&mut s, |_| ActionIndex::STRAIGHT, 400).unwrap();
            assert!(records[0].value > 0.0);
            assert!(stats.failures > 0);
            assert_eq!(stats.overridden, 0);
            assert_eq!(records.len(), 400);
        }
        assert!(aimed_start(&b.params, 1.3, 0.0).is_err());
    }
}
