//! Ground-truth safety value function on a dense `(x, y, theta)` grid.
//!
//! The solver iterates `V <- min(l, max_a V(f(s, a)))` from `V = l` with
//! trilinear interpolation of successors (heading periodic, position clamped
//! into the workspace). Sweeps are Jacobi-style: every node reads the previous
//! iterate, so results do not depend on the number of worker threads.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dubins::{margin_gt, step_clamped, DubinsParams};
use crate::error::{DecodeError, Error, Result};
use crate::rng::Rng;
use crate::types::{wrap_finite, ActionIndex, ActionSet, State};

pub const GRID_MAGIC: [u8; 4] = *b"LSFV";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub counts: [usize; 3],
    pub periodic: [bool; 3],
}

impl GridSpec {
    /// Grid over the workspace bounds with a periodic heading axis on `[-pi, pi)`.
    pub fn for_params(p: &DubinsParams, nx: usize, ny: usize, ntheta: usize) -> Self {
        Self {
            lo: [p.bounds[0][0], p.bounds[1][0], -PI],
            hi: [p.bounds[0][1], p.bounds[1][1], PI],
            counts: [nx, ny, ntheta],
            periodic: [false, false, true],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for d in 0..3 {
            if self.counts[d] < 3 {
                return Err(Error::InvalidArgument(format!("grid dimension {d} needs at least 3 points")));
            }
            if !(self.lo[d] < self.hi[d]) {
                return Err(Error::InvalidArgument(format!("grid dimension {d} has empty bounds")));
            }
        }
        if self.periodic != [false, false, true] || self.lo[2] != -PI || self.hi[2] != PI {
            return Err(Error::InvalidArgument(
                "heading axis must be the only periodic axis with bounds [-pi, pi)".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        let span = self.hi[d] - self.lo[d];
        if self.periodic[d] {
            span / self.counts[d] as f64
        } else {
            span / (self.counts[d] - 1) as f64
        }
    }

    pub fn coord(&self, d: usize, i: usize) -> f64 {
        self.lo[d] + i as f64 * self.spacing(d)
    }

    pub fn index(&self, ix: usize, iy: usize, it: usize) -> usize {
        (ix * self.counts[1] + iy) * self.counts[2] + it
    }

    pub fn unravel(&self, flat: usize) -> [usize; 3] {
        let it = flat % self.counts[2];
        let rest = flat / self.counts[2];
        [rest / self.counts[1], rest % self.counts[1], it]
    }

    pub fn node_state(&self, flat: usize) -> State {
        let [ix, iy, it] = self.unravel(flat);
        State {
            px: self.coord(0, ix),
            py: self.coord(1, iy),
            theta: self.coord(2, it),
        }
    }

    /// Index of the heading node closest to `theta`.
    pub fn nearest_theta_index(&self, theta: f64) -> usize {
        let f = (wrap_finite(theta) - self.lo[2]) / self.spacing(2);
        (f.round() as usize) % self.counts[2]
    }

    fn stencil(&self, s: &State) -> Stencil {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for (d, x) in [s.px, s.py].into_iter().enumerate() {
            let n = self.counts[d];
            let f = (x.clamp(self.lo[d], self.hi[d]) - self.lo[d]) / self.spacing(d);
            let i0 = (f.floor().max(0.0) as usize).min(n - 2);
            base[d] = i0;
            frac[d] = (f - i0 as f64).clamp(0.0, 1.0);
        }
        let n = self.counts[2];
        let f = (wrap_finite(s.theta) - self.lo[2]) / self.spacing(2);
        let fl = f.floor();
        base[2] = (fl as i64).rem_euclid(n as i64) as usize;
        frac[2] = (f - fl).clamp(0.0, 1.0);
        Stencil { base, frac }
    }
}

/// Trilinear interpolation weights for one query point.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    base: [usize; 3],
    frac: [f64; 3],
}

impl Stencil {
    #[inline]
    fn eval(&self, spec: &GridSpec, values: &[f32]) -> f64 {
        let [ix, iy, it] = self.base;
        let [fx, fy, ft] = self.frac;
        let it1 = if it + 1 == spec.counts[2] { 0 } else { it + 1 };
        let v = |a: usize, b: usize, c: usize| values[spec.index(a, b, c)] as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(v(ix, iy, it), v(ix, iy, it1), ft);
        let c01 = lerp(v(ix, iy + 1, it), v(ix, iy + 1, it1), ft);
        let c10 = lerp(v(ix + 1, iy, it), v(ix + 1, iy, it1), ft);
        let c11 = lerp(v(ix + 1, iy + 1, it), v(ix + 1, iy + 1, it1), ft);
        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub spec: GridSpec,
    /// Row-major, x outermost and heading innermost.
    pub values: Vec<f32>,
}

impl ValueGrid {
    pub fn new(spec: GridSpec, values: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(Error::Shape(format!("{} values for a grid of {}", values.len(), spec.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid values must be finite".into()));
        }
        Ok(Self { spec, values })
    }

    pub fn constant(spec: GridSpec, value: f32) -> Result<Self> {
        Self::new(spec, vec![value; spec.len()])
    }

    /// Grid of the analytic margin at every node.
    pub fn from_margin(spec: GridSpec, p: &DubinsParams) -> Result<Self> {
        let values = (0..spec.len())
            .map(|i| margin_gt(&spec.node_state(i), p) as f32)
            .collect();
        Self::new(spec, values)
    }

    /// Trilinear interpolation; position clamped into the grid, heading wrapped.
    pub fn interpolate(&self, s: &State) -> f64 {
        self.spec.stencil(s).eval(&self.spec, &self.values)
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// `nx * ny` values of one heading slice, row-major with `y` outer so the
    /// result can be written directly as an image.
    pub fn theta_slice(&self, it: usize) -> Vec<f32> {
        let [nx, ny, _] = self.spec.counts;
        let mut out = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                out.push(self.values[self.spec.index(ix, iy, it)]);
            }
        }
        out
    }
}

/// Fraction of grid nodes with a negative value.
pub fn unsafe_volume(grid: &ValueGrid) -> f64 {
    grid.values.iter().filter(|v| **v < 0.0).count() as f64 / grid.values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub actions: ActionSet,
    /// `None` runs the undiscounted backup; `Some(gamma)` the discounted one.
    pub discount: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iters: 2000,
            actions: ActionSet::FULL,
            discount: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_delta: f64,
    /// Largest single-node increase observed in any sweep (`<= 0` for a
    /// non-increasing sequence).
    pub max_increase: f64,
    pub deltas: Vec<f64>,
}

/// Precomputed successor stencils for every `(node, action)` pair.
pub struct BellmanOperator {
    spec: GridSpec,
    margin: Vec<f32>,
    n_actions: usize,
    stencils: Vec<Stencil>,
    discount: Option<f64>,
}

impl BellmanOperator {
    pub fn new(params: &DubinsParams, spec: GridSpec, actions: ActionSet, discount: Option<f64>) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        if let Some(g) = discount {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::InvalidArgument(format!("discount {g} outside [0,1)")));
            }
        }
        let acts: Vec<ActionIndex> = actions.iter().collect();
        let stencils = (0..spec.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let s = spec.node_state(i);
                acts.iter()
                    .map(move |a| spec.stencil(&step_clamped(&s, *a, params)))
                    .collect::<Vec<_>>()
            })
            .collect();
        let margin = ValueGrid::from_margin(spec, params)?.values;
        Ok(Self {
            spec,
            margin,
            n_actions: acts.len(),
            stencils,
            discount,
        })
    }

    pub fn margin(&self) -> &[f32] {
        &self.margin
    }

    /// Best successor value `max_a V(f(s_i, a))` at node `i`.
    fn best_successor(&self, i: usize, values: &[f32]) -> f64 {
        self.stencils[i * self.n_actions..(i + 1) * self.n_actions]
            .iter()
            .map(|st| st.eval(&self.spec, values))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// One application of the backup, written into `out`.
    pub fn apply_into(&self, values: &[f32], out: &mut [f32]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let l = self.margin[i] as f64;
            let best = self.best_successor(i, values);
            let v = match self.discount {
                None => l.min(best),
                Some(g) => (1.0 - g) * l + g * l.min(best),
            };
            *o = v as f32;
        });
    }

    pub fn apply(&self, values: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; values.len()];
        self.apply_into(values, &mut out);
        out
    }

    pub fn successor_values(&self, i: usize, values: &[f32]) -> f64 {
        self.best_successor(i, values)
    }
}

/// Value iteration from `V_0 = l` until the sup-norm change drops below `tol`.
pub fn solve_with_report(params: &DubinsParams, spec: GridSpec, opts: &SolverOptions) -> Result<(ValueGrid, SolveReport)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let op = BellmanOperator::new(params, spec, opts.actions, opts.discount)?;
    let mut cur = op.margin.clone();
    let mut next = vec![0.0f32; cur.len()];
    let mut report = SolveReport {
        iterations: 0,
        final_delta: f64::INFINITY,
        max_increase: f64::NEG_INFINITY,
        deltas: Vec::new(),
    };
    while report.iterations < opts.max_iters {
        op.apply_into(&cur, &mut next);
        report.iterations += 1;
        let (delta, inc) = cur
            .par_iter()
            .zip(next.par_iter())
            .map(|(a, b)| {
                let d = *b as f64 - *a as f64;
                (d.abs(), d)
            })
            .reduce(|| (0.0, f64::NEG_INFINITY), |x, y| (x.0.max(y.0), x.1.max(y.1)));
        report.max_increase = report.max_increase.max(inc);
        report.final_delta = delta;
        report.deltas.push(delta);
        std::mem::swap(&mut cur, &mut next);
        if delta < opts.tol {
            log::info!("grid solve converged after {} sweeps", report.iterations);
            return Ok((ValueGrid::new(spec, cur)?, report));
        }
    }
    Err(Error::NonConvergence {
        iterations: report.iterations,
        delta: report.final_delta,
    })
}

pub fn solve_gt(params: &DubinsParams, spec: GridSpec, tol: f64, max_iters: usize) -> Result<ValueGrid> {
    let opts = SolverOptions {
        tol,
        max_iters,
        ..Default::default()
    };
    solve_with_report(params, spec, &opts).map(|(g, _)| g)
}

/// Maximally safety-preserving action on the grid; ties go to the lowest index.
pub fn policy_gt(grid: &ValueGrid, s: &State, params: &DubinsParams, actions: ActionSet) -> ActionIndex {
    let vals: Vec<f32> = ActionIndex::ALL
        .iter()
        .map(|a| grid.interpolate(&step_clamped(s, *a, params)) as f32)
        .collect();
    actions.argmax(&vals)
}

pub const MAX_REJECTION_DRAWS: usize = 1_000_000;

/// `n` states drawn uniformly over the workspace and headings with
/// interpolated value strictly above `margin`.
pub fn sample_feasible(grid: &ValueGrid, params: &DubinsParams, n: usize, margin: f64, seed: u64) -> Result<Vec<State>> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument("margin must be non-negative".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut draws = 0;
    while out.len() < n {
        if draws >= MAX_REJECTION_DRAWS {
            return Err(Error::RejectionFailure { draws });
        }
        draws += 1;
        let s = params.sample_uniform(&mut rng);
        if grid.interpolate(&s) > margin {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn encode_grid(g: &ValueGrid) -> Vec<u8> {
    let mut w = Writer::with_capacity(64 + g.values.len() * 4);
    w.bytes(&GRID_MAGIC);
    w.u32(GRID_VERSION);
    for d in 0..3 {
        w.f64(g.spec.lo[d]);
        w.f64(g.spec.hi[d]);
        w.u32(g.spec.counts[d] as u32);
        w.u8(g.spec.periodic[d] as u8);
    }
    w.f32_slice(&g.values);
    w.buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<ValueGrid, DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(GRID_MAGIC)?;
    r.version(GRID_VERSION)?;
    let mut spec = GridSpec {
        lo: [0.0; 3],
        hi: [0.0; 3],
        counts: [0; 3],
        periodic: [false; 3],
    };
    for d in 0..3 {
        spec.lo[d] = r.f64("grid spec")?;
        spec.hi[d] = r.f64("grid spec")?;
        spec.counts[d] = r.u32("grid spec")? as usize;
        spec.periodic[d] = r.u8("grid spec")? != 0;
    }
    spec.validate().map_err(|e| DecodeError::Invalid(e.to_string()))?;
    let values = r.f32_vec(spec.len(), "grid values")?;
    r.finish("grid")?;
    ValueGrid::new(spec, values).map_err(|e| DecodeError::Invalid(e.to_string()))
}

pub fn save_grid(g: &ValueGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_grid(g))?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<ValueGrid> {
    let bytes = fs::read(path)?;
    decode_grid(&bytes).map_err(|e| Error::decode(path.display().to_string(), e))
}
