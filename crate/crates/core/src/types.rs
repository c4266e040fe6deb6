//! Domain types shared by every stage: privileged state, discrete actions,
//! rendered observations and the recorded trajectory dataset.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Wraps an angle into `[-pi, pi)`. `-pi` is included, `+pi` maps to `-pi`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite angle {theta}")));
    }
    Ok(wrap_finite(theta))
}

pub(crate) fn wrap_finite(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let mut r = (theta + PI).rem_euclid(TWO_PI) - PI;
    if r >= PI {
        r -= TWO_PI;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// Privileged Dubins-car state. Used for labeling and evaluation only;
/// latent components never see it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl State {
    /// Builds a state with the heading wrapped into `[-pi, pi)`.
    pub fn new(px: f64, py: f64, theta: f64) -> Result<Self> {
        if !px.is_finite() || !py.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite position ({px}, {py})"
            )));
        }
        Ok(Self {
            px,
            py,
            theta: wrap_angle(theta)?,
        })
    }

    /// Rounds every field to the nearest `f32`, the precision the dataset
    /// format stores, so that re-stepping a stored state reproduces the
    /// stored successor exactly.
    pub fn quantized(self) -> Self {
        let mut t = wrap_finite(self.theta) as f32;
        // f32 rounding can push the heading just outside [-pi, pi); step one
        // ulp towards zero in that case.
        if (t as f64) >= PI || (t as f64) < -PI {
            t = f32::from_bits(t.to_bits() - 1);
        }
        let theta = t as f64;
        Self {
            px: self.px as f32 as f64,
            py: self.py as f32 as f64,
            theta,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.px, self.py, self.theta]
    }
}

/// Index into the fixed angular-velocity table `{-a_max, 0, +a_max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionIndex(u8);

impl ActionIndex {
    pub const COUNT: usize = 3;
    /// Clockwise turn, `-a_max`.
    pub const RIGHT: ActionIndex = ActionIndex(0);
    pub const STRAIGHT: ActionIndex = ActionIndex(1);
    /// Counter-clockwise turn, `+a_max`.
    pub const LEFT: ActionIndex = ActionIndex(2);
    pub const ALL: [ActionIndex; 3] = [Self::RIGHT, Self::STRAIGHT, Self::LEFT];

    pub fn new(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(ActionIndex(index as u8))
        } else {
            Err(Error::InvalidArgument(format!(
                "action index {index} out of range 0..{}",
                Self::COUNT
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Sign of the angular velocity: -1, 0 or +1.
    pub fn turn_sign(self) -> f64 {
        self.0 as f64 - 1.0
    }
}

impl TryFrom<u8> for ActionIndex {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        ActionIndex::new(value as usize)
    }
}

impl From<ActionIndex> for u8 {
    fn from(a: ActionIndex) -> u8 {
        a.0
    }
}

impl fmt::Display for ActionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A subset of the three actions, used when data or action enumeration is
/// deliberately restricted (biased-coverage ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ActionSet(u8);

impl ActionSet {
    pub const FULL: ActionSet = ActionSet(0b111);

    pub fn from_actions(actions: &[ActionIndex]) -> Result<Self> {
        let bits = actions.iter().fold(0u8, |acc, a| acc | (1 << a.0));
        if bits == 0 {
            return Err(Error::InvalidArgument("empty action set".into()));
        }
        Ok(ActionSet(bits))
    }

    pub fn contains(self, a: ActionIndex) -> bool {
        self.0 & (1 << a.0) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = ActionIndex> {
        ActionIndex::ALL.into_iter().filter(move |a| self.contains(*a))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Index of the largest entry among allowed actions; ties go to the
    /// lowest index.
    pub fn argmax(self, values: &[f32]) -> ActionIndex {
        let mut best: Option<(ActionIndex, f32)> = None;
        for a in self.iter() {
            let v = values[a.index()];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        best.expect("action set is never empty").0
    }

    pub fn argmin(self, values: &[f32]) -> ActionIndex {
        let mut best: Option<(ActionIndex, f32)> = None;
        for a in self.iter() {
            let v = values[a.index()];
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((a, v));
            }
        }
        best.expect("action set is never empty").0
    }
}

impl Default for ActionSet {
    fn default() -> Self {
        Self::FULL
    }
}

impl TryFrom<Vec<u8>> for ActionSet {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        let actions = v
            .into_iter()
            .map(ActionIndex::try_from)
            .collect::<Result<Vec<_>>>()?;
        ActionSet::from_actions(&actions)
    }
}

impl From<ActionSet> for Vec<u8> {
    fn from(s: ActionSet) -> Vec<u8> {
        s.iter().map(u8::from).collect()
    }
}

/// Grayscale top-down render plus heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: u16,
    pub width: u16,
    /// Row-major, `height * width` intensities in `[0, 1]`. Row index grows
    /// with `y`, column index with `x`.
    pub image: Vec<f32>,
    pub heading: f32,
}

impl Observation {
    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.len() != self.pixel_count() {
            return Err(Error::Shape(format!(
                "image has {} pixels, header says {}x{}",
                self.image.len(),
                self.height,
                self.width
            )));
        }
        if let Some(p) = self.image.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel intensity {p} outside [0,1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: ActionIndex,
    pub failure_label: bool,
    pub state: State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminatedReason {
    Horizon,
    OutOfBounds,
}

impl TerminatedReason {
    pub fn to_u8(self) -> u8 {
        match self {
            TerminatedReason::Horizon => 0,
            TerminatedReason::OutOfBounds => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TerminatedReason::Horizon),
            1 => Some(TerminatedReason::OutOfBounds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminated: TerminatedReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub height: u16,
    pub width: u16,
    pub dt: f32,
    pub action_table: [f32; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

/// Position of one step inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepRef {
    pub trajectory: usize,
    pub step: usize,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    pub fn step_refs(&self) -> Vec<StepRef> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.steps.len()).map(move |si| StepRef { trajectory: ti, step: si }))
            .collect()
    }

    pub fn get(&self, r: StepRef) -> &Step {
        &self.trajectories[r.trajectory].steps[r.step]
    }

    /// Every `(t, t+1)` pair inside a trajectory, as the reference of `t`.
    pub fn adjacent_pairs(&self) -> Vec<StepRef> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| {
                (0..t.steps.len().saturating_sub(1)).map(move |si| StepRef { trajectory: ti, step: si })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            for s in &t.steps {
                if s.observation.height != self.header.height || s.observation.width != self.header.width {
                    return Err(Error::Shape(format!(
                        "observation {}x{} does not match header {}x{}",
                        s.observation.height, s.observation.width, self.header.height, self.header.width
                    )));
                }
                s.observation.validate()?;
            }
        }
        Ok(())
    }
}
