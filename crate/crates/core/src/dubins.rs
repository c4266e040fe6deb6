//! Ground-truth Dubins car: dynamics, analytic margin, top-down renderer and
//! offline dataset generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{
    wrap_finite, ActionIndex, ActionSet, Dataset, DatasetHeader, Observation, State, Step,
    TerminatedReason, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DubinsParams {
    pub v: f64,
    pub dt: f64,
    pub a_max: f64,
    /// `[[x_lo, x_hi], [y_lo, y_hi]]`
    pub bounds: [[f64; 2]; 2],
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
}

impl Default for DubinsParams {
    fn default() -> Self {
        Self {
            v: 1.0,
            dt: 0.05,
            a_max: 1.25,
            bounds: [[-1.0, 1.0], [-1.0, 1.0]],
            obstacle_center: [0.0, 0.0],
            obstacle_radius: 0.5,
        }
    }
}

impl DubinsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.v > 0.0 && self.dt > 0.0 && self.a_max > 0.0 && self.obstacle_radius > 0.0) {
            return bad("v, dt, a_max and obstacle radius must be positive");
        }
        for (axis, [lo, hi]) in self.bounds.iter().enumerate() {
            let c = self.obstacle_center[axis];
            if !(lo < hi) || c - self.obstacle_radius <= *lo || c + self.obstacle_radius >= *hi {
                return bad("obstacle must lie strictly inside the bounds");
            }
        }
        Ok(())
    }

    pub fn action_table(&self) -> [f64; 3] {
        [-self.a_max, 0.0, self.a_max]
    }

    pub fn omega(&self, a: ActionIndex) -> f64 {
        a.turn_sign() * self.a_max
    }

    pub fn in_bounds(&self, s: &State) -> bool {
        let [[xl, xh], [yl, yh]] = self.bounds;
        (xl..=xh).contains(&s.px) && (yl..=yh).contains(&s.py)
    }

    pub fn clamp(&self, s: State) -> State {
        let [[xl, xh], [yl, yh]] = self.bounds;
        State {
            px: s.px.clamp(xl, xh),
            py: s.py.clamp(yl, yh),
            theta: s.theta,
        }
    }

    /// Fraction of the x-y box covered by the obstacle disk.
    pub fn failure_area_fraction(&self) -> f64 {
        let [[xl, xh], [yl, yh]] = self.bounds;
        std::f64::consts::PI * self.obstacle_radius.powi(2) / ((xh - xl) * (yh - yl))
    }

    /// Uniform state over the bounds and all headings.
    pub fn sample_uniform(&self, rng: &mut Rng) -> State {
        let [[xl, xh], [yl, yh]] = self.bounds;
        State {
            px: rng.uniform(xl, xh),
            py: rng.uniform(yl, yh),
            theta: wrap_finite(rng.uniform(-std::f64::consts::PI, std::f64::consts::PI)),
        }
    }
}

/// Explicit Euler step; position integrates with the pre-update heading.
pub fn step(s: &State, a: ActionIndex, p: &DubinsParams) -> State {
    State {
        px: s.px + p.dt * p.v * s.theta.cos(),
        py: s.py + p.dt * p.v * s.theta.sin(),
        theta: wrap_finite(s.theta + p.dt * p.omega(a)),
    }
}

/// Step followed by clamping the position into the workspace. This is the
/// transition used by the grid solver, rollouts and the live session.
pub fn step_clamped(s: &State, a: ActionIndex, p: &DubinsParams) -> State {
    p.clamp(step(s, a, p))
}

/// Signed squared-distance margin; negative strictly inside the obstacle.
pub fn margin_gt(s: &State, p: &DubinsParams) -> f64 {
    let dx = s.px - p.obstacle_center[0];
    let dy = s.py - p.obstacle_center[1];
    dx * dx + dy * dy - p.obstacle_radius * p.obstacle_radius
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub height: u16,
    pub width: u16,
    pub background: f32,
    pub obstacle: f32,
    pub robot: f32,
    pub robot_radius_px: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            background: 0.0,
            obstacle: 0.5,
            robot: 1.0,
            robot_radius_px: 1.5,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument("render size must be at least 8x8".into()));
        }
        for v in [self.background, self.obstacle, self.robot] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("intensity {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Rasterizer with the static obstacle layer precomputed.
#[derive(Debug, Clone)]
pub struct Renderer {
    spec: RenderSpec,
    params: DubinsParams,
    background: Vec<f32>,
}

impl Renderer {
    pub fn new(spec: RenderSpec, params: DubinsParams) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        let (h, w) = (spec.height as usize, spec.width as usize);
        let mut background = vec![spec.background; h * w];
        for v in 0..h {
            for u in 0..w {
                let (x, y) = Self::pixel_center(&params, &spec, u, v);
                let dx = x - params.obstacle_center[0];
                let dy = y - params.obstacle_center[1];
                if dx * dx + dy * dy <= params.obstacle_radius * params.obstacle_radius {
                    background[v * w + u] = spec.obstacle;
                }
            }
        }
        Ok(Self { spec, params, background })
    }

    pub fn spec(&self) -> &RenderSpec {
        &self.spec
    }

    fn pixel_center(p: &DubinsParams, spec: &RenderSpec, u: usize, v: usize) -> (f64, f64) {
        let [[xl, xh], [yl, yh]] = p.bounds;
        (
            xl + (u as f64 + 0.5) / spec.width as f64 * (xh - xl),
            yl + (v as f64 + 0.5) / spec.height as f64 * (yh - yl),
        )
    }

    /// Continuous pixel coordinates `(u, v)` of a workspace point.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let [[xl, xh], [yl, yh]] = self.params.bounds;
        (
            (x - xl) / (xh - xl) * self.spec.width as f64,
            (y - yl) / (yh - yl) * self.spec.height as f64,
        )
    }

    /// Integer pixel containing a workspace point, clamped into the image.
    pub fn pixel_of(&self, x: f64, y: f64) -> (usize, usize) {
        let (cu, cv) = self.to_pixel(x, y);
        let clampi = |c: f64, n: u16| (c.floor().max(0.0) as usize).min(n as usize - 1);
        (clampi(cu, self.spec.width), clampi(cv, self.spec.height))
    }

    pub fn render(&self, s: &State) -> Observation {
        let mut image = self.background.clone();
        self.draw_robot(s, &mut image);
        Observation {
            height: self.spec.height,
            width: self.spec.width,
            image,
            heading: s.theta as f32,
        }
    }

    /// Renders into a caller-provided buffer of `height * width` pixels.
    pub fn render_into(&self, s: &State, image: &mut [f32]) {
        image.copy_from_slice(&self.background);
        self.draw_robot(s, image);
    }

    fn draw_robot(&self, s: &State, image: &mut [f32]) {
        let (h, w) = (self.spec.height as i64, self.spec.width as i64);
        let (cu, cv) = self.to_pixel(s.px, s.py);
        let r = self.spec.robot_radius_px;
        let u0 = (cu - r - 1.0).floor() as i64;
        let v0 = (cv - r - 1.0).floor() as i64;
        for v in v0.max(0)..=((cv + r + 1.0).ceil() as i64).min(h - 1) {
            for u in u0.max(0)..=((cu + r + 1.0).ceil() as i64).min(w - 1) {
                let du = u as f64 + 0.5 - cu;
                let dv = v as f64 + 0.5 - cv;
                if du * du + dv * dv <= r * r {
                    image[(v * w + u) as usize] = self.spec.robot;
                }
            }
        }
    }
}

/// Convenience wrapper over [`Renderer`] for one-off renders.
pub fn render(s: &State, spec: &RenderSpec, params: &DubinsParams) -> Result<Observation> {
    Ok(Renderer::new(*spec, *params)?.render(s))
}

/// Samples a start state uniformly, rejecting states inside the failure set.
pub fn sample_start(p: &DubinsParams, rng: &mut Rng) -> State {
    loop {
        let s = p.sample_uniform(rng);
        if margin_gt(&s, p) >= 0.0 {
            return s;
        }
    }
}

fn generate_trajectory(
    renderer: &Renderer,
    p: &DubinsParams,
    t_max: usize,
    actions: ActionSet,
    rng: &mut Rng,
) -> Trajectory {
    let allowed: Vec<ActionIndex> = actions.iter().collect();
    let mut s = sample_start(p, rng).quantized();
    let mut steps = Vec::with_capacity(t_max);
    let terminated = loop {
        let a = allowed[rng.below(allowed.len())];
        steps.push(Step {
            observation: renderer.render(&s),
            action: a,
            failure_label: margin_gt(&s, p) < 0.0,
            state: s,
        });
        if steps.len() >= t_max {
            break TerminatedReason::Horizon;
        }
        let next = step(&s, a, p).quantized();
        if !p.in_bounds(&next) {
            break TerminatedReason::OutOfBounds;
        }
        s = next;
    };
    Trajectory { steps, terminated }
}

/// Random-action dataset. Trajectory `i` draws from `Rng::new(seed).derive(i)`
/// so the output does not depend on the number of worker threads.
pub fn generate_dataset(
    n_traj: usize,
    t_max: usize,
    actions: ActionSet,
    seed: u64,
    params: &DubinsParams,
    render_spec: &RenderSpec,
) -> Result<Dataset> {
    if n_traj == 0 || t_max == 0 {
        return Err(Error::InvalidArgument("n_traj and t_max must be positive".into()));
    }
    let renderer = Renderer::new(*render_spec, *params)?;
    let root = Rng::new(seed);
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive(i as u64);
            generate_trajectory(&renderer, params, t_max, actions, &mut rng)
        })
        .collect();
    let t = params.action_table();
    Ok(Dataset {
        header: DatasetHeader {
            height: render_spec.height,
            width: render_spec.width,
            dt: params.dt as f32,
            action_table: [t[0] as f32, t[1] as f32, t[2] as f32],
            seed,
        },
        trajectories,
    })
}
