//! Runtime filtering laws. The HJ filter passes the requested action through
//! unless the critic's value at its one-step successor is at or below ε, in
//! which case the critic's shield action at the current input is executed.
//! The CMDP filter does the same with a risk threshold.

use serde::{Deserialize, Serialize};

use crate::classifier::FailureClassifier;
use crate::dubins::{step_clamped, DubinsParams};
use crate::error::{Error, Result};
use crate::reach::{priv_margin, CriticInput, CriticKind, RiskCritic, SafetyCritic};
use crate::types::{ActionIndex, State};
use crate::world_model::{LatentState, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    LatentHj,
    PrivHj,
    Cmdp,
    Off,
}

impl FilterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::LatentHj => "latent_hj",
            FilterMode::PrivHj => "priv_hj",
            FilterMode::Cmdp => "cmdp",
            FilterMode::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub epsilon: f64,
    pub epsilon_risk: f64,
    pub enabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::LatentHj,
            epsilon: 0.4,
            epsilon_risk: 0.1,
            enabled: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(Error::Config("filter epsilon must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_risk) {
            return Err(Error::Config("epsilon_risk must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub executed: ActionIndex,
    pub requested: ActionIndex,
    pub overridden: bool,
    /// Critic value (or risk) at the one-step successor of `requested`.
    pub monitor_value: f64,
    /// Margin ℓ at the current input.
    pub margin_value: f64,
}

/// The model the filter looks ahead with, paired with the current input.
#[derive(Debug, Clone, Copy)]
pub enum Plant<'a> {
    Latent {
        wm: &'a WorldModel,
        clf: &'a FailureClassifier,
        z: &'a LatentState,
    },
    Privileged {
        params: &'a DubinsParams,
        state: &'a State,
        margin_scale: f64,
    },
}

fn decide(requested: ActionIndex, monitor: f64, margin: f64, pass: bool, fallback: impl FnOnce() -> Result<ActionIndex>) -> Result<FilterDecision> {
    let executed = if pass { requested } else { fallback()? };
    Ok(FilterDecision {
        executed,
        requested,
        overridden: executed != requested,
        monitor_value: monitor,
        margin_value: margin,
    })
}

pub fn filter_hj(critic: &SafetyCritic, plant: Plant, requested: ActionIndex, cfg: &FilterConfig) -> Result<FilterDecision> {
    cfg.validate()?;
    let expected_mode = match (plant, critic.kind) {
        (Plant::Latent { .. }, CriticKind::Latent) => FilterMode::LatentHj,
        (Plant::Privileged { .. }, CriticKind::Privileged) => FilterMode::PrivHj,
        _ => return Err(Error::ModeMismatch(format!("{:?} critic paired with a different plant", critic.kind))),
    };
    if cfg.mode != expected_mode && cfg.mode != FilterMode::Off {
        return Err(Error::ModeMismatch(format!(
            "filter mode {} cannot run a {} plant",
            cfg.mode.as_str(),
            expected_mode.as_str()
        )));
    }
    let enabled = cfg.enabled && cfg.mode != FilterMode::Off;
    match plant {
        Plant::Latent { wm, clf, z } => {
            let next = wm.imagine_step(z, requested)?;
            let monitor = critic.value_of(CriticInput::Latent(&next))? as f64;
            let margin = clf.latent_margin(z)? as f64;
            decide(requested, monitor, margin, !enabled || monitor > cfg.epsilon, || {
                critic.shield_action(CriticInput::Latent(z))
            })
        }
        Plant::Privileged {
            params,
            state,
            margin_scale,
        } => {
            let next = step_clamped(state, requested, params);
            let monitor = critic.value_of(CriticInput::Privileged(&next))? as f64;
            let margin = priv_margin(state, params, margin_scale) as f64;
            decide(requested, monitor, margin, !enabled || monitor > cfg.epsilon, || {
                critic.shield_action(CriticInput::Privileged(state))
            })
        }
    }
}

/// Risk-threshold law: pass iff `min_a Q_risk(z', a) < ε_risk` for the
/// imagined successor `z'` of the requested action, else the least risky
/// action at `z`.
pub fn filter_cmdp(
    risk: &RiskCritic,
    wm: &WorldModel,
    clf: &FailureClassifier,
    z: &LatentState,
    requested: ActionIndex,
    cfg: &FilterConfig,
) -> Result<FilterDecision> {
    cfg.validate()?;
    if cfg.mode != FilterMode::Cmdp && cfg.mode != FilterMode::Off {
        return Err(Error::ModeMismatch(format!("filter mode {} given a risk critic", cfg.mode.as_str())));
    }
    let enabled = cfg.enabled && cfg.mode == FilterMode::Cmdp;
    let next = wm.imagine_step(z, requested)?;
    let r = risk.min_risk(&next)? as f64;
    let margin = clf.latent_margin(z)? as f64;
    decide(requested, r, margin, !enabled || r < cfg.epsilon_risk, || risk.safest_action(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{classifier_arch, ClassifierConfig};
    use crate::nn::{Activation, Architecture, Mlp, NetSpec};
    use crate::reach::critic_arch;
    use crate::rng::Rng;
    use crate::types::ActionSet;
    use crate::world_model::WmConfig;

    fn constant_net(input: usize, out: [f32; 3], act: Activation) -> Mlp {
        let spec = NetSpec::new(Architecture::mlp(input, &[], 3, Activation::Identity, act)).unwrap();
        let mut net = Mlp::new(spec, &mut Rng::new(0));
        net.params.weights[0].fill(0.0);
        net.params.biases[0] = ndarray::Array1::from(out.to_vec());
        net
    }

    fn priv_critic(q: [f32; 3]) -> SafetyCritic {
        SafetyCritic::new(CriticKind::Privileged, ActionSet::FULL, constant_net(4, q, Activation::Identity)).unwrap()
    }

    fn priv_plant<'a>(p: &'a DubinsParams, s: &'a State) -> Plant<'a> {
        Plant::Privileged {
            params: p,
            state: s,
            margin_scale: 4.0,
        }
    }

    fn cfg(mode: FilterMode) -> FilterConfig {
        FilterConfig {
            mode,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn passes_above_threshold() {
        let p = DubinsParams::default();
        let s = State::new(0.8, 0.8, 0.0).unwrap();
        let c = priv_critic([0.5, 0.2, 0.1]);
        let d = filter_hj(&c, priv_plant(&p, &s), ActionIndex::LEFT, &cfg(FilterMode::PrivHj)).unwrap();
        assert_eq!(d.executed, ActionIndex::LEFT);
        assert!(!d.overridden);
        assert!((d.monitor_value - 0.5).abs() < 1e-7);
    }

    #[test]
    fn overrides_at_or_below_threshold() {
        let p = DubinsParams::default();
        let s = State::new(0.8, 0.8, 0.0).unwrap();
        let c = priv_critic([0.3, 0.1, 0.2]);
        let d = filter_hj(&c, priv_plant(&p, &s), ActionIndex::LEFT, &cfg(FilterMode::PrivHj)).unwrap();
        assert_eq!(d.executed, ActionIndex::RIGHT);
        assert!(d.overridden);
        let same = filter_hj(&c, priv_plant(&p, &s), ActionIndex::RIGHT, &cfg(FilterMode::PrivHj)).unwrap();
        assert_eq!(same.executed, ActionIndex::RIGHT);
        assert!(!same.overridden);

        let off = FilterConfig {
            enabled: false,
            ..cfg(FilterMode::PrivHj)
        };
        let d = filter_hj(&c, priv_plant(&p, &s), ActionIndex::LEFT, &off).unwrap();
        assert_eq!(d.executed, ActionIndex::LEFT);
        assert!((d.monitor_value - 0.3).abs() < 1e-7);
    }

    #[test]
    fn mode_mismatch_is_an_error() {
        let p = DubinsParams::default();
        let s = State::new(0.8, 0.8, 0.0).unwrap();
        let c = priv_critic([0.3, 0.1, 0.2]);
        let r = filter_hj(&c, priv_plant(&p, &s), ActionIndex::LEFT, &cfg(FilterMode::LatentHj));
        assert!(matches!(r, Err(Error::ModeMismatch(_))));
        let r = filter_hj(&c, priv_plant(&p, &s), ActionIndex::LEFT, &cfg(FilterMode::Cmdp));
        assert!(matches!(r, Err(Error::ModeMismatch(_))));
    }

    fn latent_stack() -> (WorldModel, FailureClassifier) {
        let wcfg = WmConfig {
            latent_dim: 4,
            encoder_hidden: vec![8],
            transition_hidden: vec![8],
            ..WmConfig::default()
        };
        let wm = WorldModel::init(8, 8, &wcfg, None, &mut Rng::new(1)).unwrap();
        let net = Mlp::new(
            NetSpec::new(classifier_arch(4, &ClassifierConfig::default())).unwrap(),
            &mut Rng::new(2),
        );
        (wm, FailureClassifier::new(net, 0.1, true).unwrap())
    }

    fn risk_critic(r: [f32; 3]) -> RiskCritic {
        let logits = r.map(|p| (p / (1.0 - p)).ln());
        RiskCritic::new(0.9, ActionSet::FULL, constant_net(4, logits, Activation::Sigmoid)).unwrap()
    }

    #[test]
    fn cmdp_threshold_law() {
        let (wm, clf) = latent_stack();
        let z = LatentState { z: vec![0.1, 0.2, 0.3, 0.4] };
        let c = FilterConfig {
            epsilon_risk: 0.05,
            ..cfg(FilterMode::Cmdp)
        };
        let low = risk_critic([0.5, 0.02, 0.9]);
        let d = filter_cmdp(&low, &wm, &clf, &z, ActionIndex::LEFT, &c).unwrap();
        assert!(!d.overridden && d.executed == ActionIndex::LEFT);

        let high = risk_critic([0.6, 0.2, 0.7]);
        let c1 = FilterConfig {
            epsilon_risk: 0.1,
            ..c
        };
        let d = filter_cmdp(&high, &wm, &clf, &z, ActionIndex::LEFT, &c1).unwrap();
        assert_eq!(d.executed, ActionIndex::STRAIGHT);
        assert!(d.overridden);

        let r = high.min_risk(&wm.imagine_step(&z, ActionIndex::LEFT).unwrap()).unwrap();
        let exact = FilterConfig {
            epsilon_risk: r as f64,
            ..c
        };
        assert!(filter_cmdp(&high, &wm, &clf, &z, ActionIndex::LEFT, &exact).unwrap().overridden);
        assert!(filter_cmdp(&high, &wm, &clf, &z, ActionIndex::LEFT, &cfg(FilterMode::LatentHj)).is_err());
    }

    #[test]
    fn latent_filter_uses_imagined_successor() {
        let (wm, clf) = latent_stack();
        let spec = NetSpec::new(critic_arch(4, &[8], Activation::Identity)).unwrap();
        let critic = SafetyCritic::new(CriticKind::Latent, ActionSet::FULL, Mlp::new(spec, &mut Rng::new(3))).unwrap();
        let z = LatentState { z: vec![0.5, -0.5, 0.2, 0.0] };
        for a in ActionIndex::ALL {
            let d = filter_hj(&critic, Plant::Latent { wm: &wm, clf: &clf, z: &z }, a, &cfg(FilterMode::LatentHj)).unwrap();
            let next = wm.imagine_step(&z, a).unwrap();
            assert_eq!(d.monitor_value, critic.value_of(CriticInput::Latent(&next)).unwrap() as f64);
            assert_eq!(d.margin_value, clf.latent_margin(&z).unwrap() as f64);
            if d.monitor_value > 0.4 {
                assert_eq!(d.executed, a);
            } else {
                assert_eq!(d.executed, critic.shield_action(CriticInput::Latent(&z)).unwrap());
            }
        }
    }

    #[test]
    fn determinism_and_monotone_threshold() {
        let p = DubinsParams::default();
        let spec = NetSpec::new(critic_arch(4, &[16, 16], Activation::Identity)).unwrap();
        let critic = SafetyCritic::new(CriticKind::Privileged, ActionSet::FULL, Mlp::new(spec, &mut Rng::new(9))).unwrap();
        let mut rng = Rng::new(4);
        let eps = [-0.5, -0.1, 0.0, 0.1, 0.4, 0.8];
        for _ in 0..300 {
            let s = p.sample_uniform(&mut rng);
            for a in ActionIndex::ALL {
                let mut prev_override = false;
                for e in eps {
                    let c = FilterConfig {
                        epsilon: e,
                        ..cfg(FilterMode::PrivHj)
                    };
                    let d = filter_hj(&critic, priv_plant(&p, &s), a, &c).unwrap();
                    assert_eq!(d, filter_hj(&critic, priv_plant(&p, &s), a, &c).unwrap());
                    let passed = d.monitor_value > e;
                    assert!(!(prev_override && passed), "raising ε turned an override into a pass");
                    prev_override = !passed;
                    if passed {
                        assert_eq!(d.executed, a);
                    }
                }
            }
        }
    }
}
