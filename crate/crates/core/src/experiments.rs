//! Trajectories, the last-five-iterates convergence criterion, the eight-color
//! cell classification and hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Block, OptimizerSpec, ParamName, State, Stepper};
use crate::error::{Error, Result};
use crate::objectives::{self, Builtin, HessianSpectrum, Objective};
use crate::stability;

/// Half-width of the interval around `w⋆` the last iterates must stay in.
pub const CONVERGENCE_TOL: f64 = 1e-2;
/// Number of trailing weight iterates inspected by [`classify_convergence`].
pub const CONVERGENCE_WINDOW: usize = 5;
/// Iteration budget per sweep cell.
pub const DEFAULT_T_MAX: u64 = 10_000;

/// Formats a float with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// A recorded run of an optimizer from the zero-moment start.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub objective: String,
    pub spec: OptimizerSpec,
    /// `states[t]` is the state at iteration `t`. A diverged step is not kept.
    pub states: Vec<State>,
    pub diverged: bool,
    /// The divergence signal, when the guard fired.
    pub divergence: Option<Error>,
}

impl Trajectory {
    pub fn last(&self) -> &State {
        self.states.last().expect("a trajectory holds at least its start")
    }

    /// `‖w_t - w⋆‖₂` for every recorded iterate.
    pub fn w_distances(&self, w_star: &[f64]) -> Vec<f64> {
        self.states.iter().map(|s| euclid(s.w(), w_star)).collect()
    }

    /// `‖x_t - x⋆‖₂` over the whole stacked state, with `x⋆ = (0, 0, w⋆)`.
    pub fn state_distances(&self, w_star: &[f64]) -> Vec<f64> {
        let x_star = State::start(self.last().layout, w_star);
        self.states.iter().map(|s| s.distance_to(&x_star.x)).collect()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Iterates `spec` from `(0, 0, w₀)` for up to `t_max` steps, stopping early
/// when the divergence guard fires.
pub fn run_trajectory(spec: &OptimizerSpec, obj: &dyn Objective, w0: &[f64], t_max: u64) -> Result<Trajectory> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("T_max must be at least 1".into()));
    }
    check_dim(obj, w0)?;
    let mut stepper = Stepper::new(*spec, obj);
    let mut state = State::start(stepper.layout(), w0);
    let mut states = Vec::with_capacity(t_max as usize + 1);
    states.push(state.clone());
    let mut divergence = None;
    for _ in 0..t_max {
        if let Err(e) = stepper.step_in_place(&mut state) {
            divergence = Some(e);
            break;
        }
        states.push(state.clone());
    }
    Ok(Trajectory {
        objective: obj.id(),
        spec: *spec,
        states,
        diverged: divergence.is_some(),
        divergence,
    })
}

fn check_dim(obj: &dyn Objective, w: &[f64]) -> Result<()> {
    if w.len() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            got: w.len(),
        });
    }
    Ok(())
}

fn within_tol(w: &[f64], w_star: &[f64]) -> bool {
    w.iter().zip(w_star).all(|(a, b)| (a - b).abs() <= CONVERGENCE_TOL)
}

/// True iff the run did not diverge and each of the last five weight iterates
/// lies componentwise within `±1e-2` of `w⋆`.
pub fn classify_convergence(traj: &Trajectory, w_star: &[f64]) -> bool {
    if traj.diverged || traj.states.len() < CONVERGENCE_WINDOW {
        return false;
    }
    traj.states[traj.states.len() - CONVERGENCE_WINDOW..]
        .iter()
        .all(|s| within_tol(s.w(), w_star))
}

/// Same verdict as [`classify_convergence`] on [`run_trajectory`]'s output,
/// keeping only the last five weight iterates in memory.
pub fn converges(spec: &OptimizerSpec, obj: &dyn Objective, w0: &[f64], w_star: &[f64], t_max: u64) -> Result<bool> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("T_max must be at least 1".into()));
    }
    check_dim(obj, w0)?;
    let mut stepper = Stepper::new(*spec, obj);
    let mut state = State::start(stepper.layout(), w0);
    // ring[t % 5] holds whether iterate t was inside the interval
    let mut ring = [false; CONVERGENCE_WINDOW];
    ring[0] = within_tol(state.w(), w_star);
    for _ in 0..t_max {
        if stepper.step_in_place(&mut state).is_err() {
            return Ok(false);
        }
        ring[(state.t % CONVERGENCE_WINDOW as u64) as usize] = within_tol(state.w(), w_star);
    }
    Ok(t_max + 1 >= CONVERGENCE_WINDOW as u64 && ring.iter().all(|&ok| ok))
}

/// Cell colors keyed by (Kingma bound, our bound, converged).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Green,
    Blue,
    Yellow,
    White,
    Black,
    Cyan,
    Magenta,
    Red,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Black,
        Color::Cyan,
        Color::Magenta,
        Color::Red,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Red => "red",
        }
    }

    /// Inverse of [`classify_cell`].
    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            Color::Green => (true, true, true),
            Color::Blue => (false, true, true),
            Color::Yellow => (true, false, true),
            Color::White => (false, false, true),
            Color::Black => (true, true, false),
            Color::Cyan => (false, true, false),
            Color::Magenta => (true, false, false),
            Color::Red => (false, false, false),
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown color `{s}`")))
    }
}

pub fn classify_cell(kingma: bool, ours: bool, converged: bool) -> Color {
    match (kingma, ours, converged) {
        (true, true, true) => Color::Green,
        (false, true, true) => Color::Blue,
        (true, false, true) => Color::Yellow,
        (false, false, true) => Color::White,
        (true, true, false) => Color::Black,
        (false, true, false) => Color::Cyan,
        (true, false, false) => Color::Magenta,
        (false, false, false) => Color::Red,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// One sweep axis: `count` values of hyperparameter `name` from `min` to
/// `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: ParamName,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub scale: Scale,
}

impl Axis {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument(format!("axis {} has no points", self.name)));
        }
        if !(self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::InvalidArgument(format!("axis {} has a non-finite end", self.name)));
        }
        if self.scale == Scale::Log && !(self.min > 0.0 && self.max > 0.0) {
            return Err(Error::InvalidArgument(format!("log axis {} needs positive ends", self.name)));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let k = self.count;
        if k == 1 {
            return vec![self.min];
        }
        (0..k)
            .map(|i| {
                if i == 0 {
                    return self.min;
                }
                if i == k - 1 {
                    return self.max;
                }
                let s = i as f64 / (k - 1) as f64;
                match self.scale {
                    Scale::Linear => self.min + s * (self.max - self.min),
                    Scale::Log => (self.min.ln() + s * (self.max.ln() - self.min.ln())).exp(),
                }
            })
            .collect()
    }
}

fn default_t_max() -> u64 {
    DEFAULT_T_MAX
}

/// A fully specified sweep: base optimizer, two axes, objective and start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub objective: Builtin,
    pub optimizer: OptimizerSpec,
    pub param1: Axis,
    pub param2: Axis,
    pub w0: Vec<f64>,
    #[serde(default = "default_t_max")]
    pub t_max: u64,
}

impl SweepSpec {
    pub fn cell_count(&self) -> usize {
        self.param1.count * self.param2.count
    }
}

const PRESETS_JSON: &str = include_str!("../presets.json");

/// All built-in sweep presets, keyed by id.
pub fn presets() -> BTreeMap<String, SweepSpec> {
    let mut map: BTreeMap<String, SweepSpec> =
        serde_json::from_str(PRESETS_JSON).expect("presets.json is valid");
    for (id, spec) in map.iter_mut() {
        spec.id = Some(id.clone());
    }
    map
}

pub fn preset(id: &str) -> Result<SweepSpec> {
    presets().remove(id).ok_or_else(|| Error::UnknownPreset(id.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param1: f64,
    pub param2: f64,
    pub kingma: bool,
    pub ours: bool,
    pub converged: bool,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub spec: SweepSpec,
    /// Row-major: `param1` varies slowest.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn count(&self, color: Color) -> usize {
        self.cells.iter().filter(|c| c.color == color).count()
    }

    pub fn color_counts(&self) -> BTreeMap<Color, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.cells {
            *counts.entry(c.color).or_insert(0) += 1;
        }
        counts
    }
}

struct CellContext<'a> {
    spec: &'a SweepSpec,
    obj: &'a Builtin,
    spectrum: HessianSpectrum,
    w_star: Vec<f64>,
}

impl CellContext<'_> {
    fn evaluate(&self, p1: f64, p2: f64) -> Result<SweepCell> {
        let mut hyper = self.spec.optimizer.hyper;
        hyper.set(self.spec.param1.name, p1);
        hyper.set(self.spec.param2.name, p2);
        let opt = OptimizerSpec::new(self.spec.optimizer.family, self.spec.optimizer.variant, hyper)?;
        // The classical conditions only concern ADAM; other families pass them vacuously.
        let kingma = opt.family != crate::dynamics::Family::Adam || stability::classical_bounds(&hyper).0.satisfied();
        let ours = stability::bound_check(&opt, &self.spectrum).satisfied();
        let converged = converges(&opt, self.obj, &self.spec.w0, &self.w_star, self.spec.t_max)?;
        Ok(SweepCell {
            param1: p1,
            param2: p2,
            kingma,
            ours,
            converged,
            color: classify_cell(kingma, ours, converged),
        })
    }
}

/// Runs every cell of the grid. `jobs` bounds the worker count; `None` uses
/// the global pool. The result does not depend on the worker count.
pub fn sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<SweepGrid> {
    spec.param1.validate()?;
    spec.param2.validate()?;
    if spec.t_max == 0 {
        return Err(Error::InvalidArgument("T_max must be at least 1".into()));
    }
    check_dim(&spec.objective, &spec.w0)?;
    let w_star = spec.objective.minimizer();
    let ctx = CellContext {
        spec,
        obj: &spec.objective,
        spectrum: objectives::hessian_spectrum(&spec.objective, &w_star)?,
        w_star,
    };
    let v1 = spec.param1.values();
    let v2 = spec.param2.values();
    let coords: Vec<(f64, f64)> = v1.iter().flat_map(|&a| v2.iter().map(move |&b| (a, b))).collect();
    let run = || -> Result<Vec<SweepCell>> {
        coords.par_iter().map(|&(a, b)| ctx.evaluate(a, b)).collect()
    };
    let cells = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(SweepGrid {
        spec: spec.clone(),
        cells,
    })
}

pub const SWEEP_CSV_HEADER: &str = "param1,param2,kingma,ours,converged,color";

pub fn write_sweep_csv<W: Write>(grid: &SweepGrid, mut out: W) -> io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for c in &grid.cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            format_float(c.param1),
            format_float(c.param2),
            c.kingma,
            c.ours,
            c.converged,
            c.color
        )?;
    }
    Ok(())
}

/// Column names `t,w_0..,m_0..,v_0..,dist_to_min`; blocks the family lacks
/// are omitted.
pub fn trajectory_csv_header(traj: &Trajectory) -> String {
    let layout = traj.last().layout;
    let mut cols = vec!["t".to_string()];
    for (block, prefix) in [(Block::W, "w"), (Block::M, "m"), (Block::V, "v")] {
        if layout.range(block).is_some() {
            cols.extend((0..layout.n).map(|i| format!("{prefix}_{i}")));
        }
    }
    cols.push("dist_to_min".into());
    cols.join(",")
}

/// Writes one row per iterate; `dist_to_min` is `‖w_t - w⋆‖₂`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w_star: &[f64], mut out: W) -> io::Result<()> {
    writeln!(out, "{}", trajectory_csv_header(traj))?;
    for s in &traj.states {
        let mut row = vec![s.t.to_string()];
        for block in [Block::W, Block::M, Block::V] {
            if let Some(r) = s.layout.range(block) {
                row.extend(s.x[r].iter().map(|&v| format_float(v)));
            }
        }
        row.push(format_float(euclid(s.w(), w_star)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
