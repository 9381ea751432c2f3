//! Optimizers written as discrete-time dynamical systems `x_{t+1} = T(t, x_t)`.
//!
//! The state stacks the optimizer's moment estimates with the weights. For
//! ADAM the map splits into an autonomous part `T̄` (no bias correction, `ε`
//! inside the square root) plus perturbations: the bias-correction term
//! ([`theta`]) and the `ε`-placement difference of the original formulation
//! ([`h_disturbance`]).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Objective;

/// Components with magnitude beyond this abort a trajectory.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Gradient sup-norm below which `w` counts as a critical point.
pub const CRITICAL_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sgd,
    RmsProp,
    AdaGrad,
    AdaDelta,
    Adam,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Sgd,
        Family::RmsProp,
        Family::AdaGrad,
        Family::AdaDelta,
        Family::Adam,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Sgd => "sgd",
            Family::RmsProp => "rmsprop",
            Family::AdaGrad => "adagrad",
            Family::AdaDelta => "adadelta",
            Family::Adam => "adam",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer family `{s}`")))
    }
}

/// Which ADAM formulation the weight update uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamVariant {
    /// `√(v+ε²)` with bias correction.
    #[default]
    Eps2Bias,
    /// `√(v+ε²)` without bias correction: the autonomous map `T̄`.
    Eps2Nobias,
    /// `√v + ε` without bias correction: `T̄ + h`.
    OrigNobias,
    /// `√v + ε` with bias correction: `T̄ + h + Θ̃`.
    OrigBias,
}

impl AdamVariant {
    pub const ALL: [AdamVariant; 4] = [
        AdamVariant::Eps2Bias,
        AdamVariant::Eps2Nobias,
        AdamVariant::OrigNobias,
        AdamVariant::OrigBias,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdamVariant::Eps2Bias => "eps2_bias",
            AdamVariant::Eps2Nobias => "eps2_nobias",
            AdamVariant::OrigNobias => "orig_nobias",
            AdamVariant::OrigBias => "orig_bias",
        }
    }

    pub fn bias_corrected(&self) -> bool {
        matches!(self, AdamVariant::Eps2Bias | AdamVariant::OrigBias)
    }

    pub fn eps_outside_sqrt(&self) -> bool {
        matches!(self, AdamVariant::OrigNobias | AdamVariant::OrigBias)
    }

    /// The same ε-placement with the bias correction dropped.
    pub fn without_bias(&self) -> AdamVariant {
        if self.eps_outside_sqrt() {
            AdamVariant::OrigNobias
        } else {
            AdamVariant::Eps2Nobias
        }
    }
}

impl fmt::Display for AdamVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdamVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AdamVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ADAM variant `{s}`")))
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_beta() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-8
}

/// Hyperparameters shared by all families. Each family reads the subset it
/// needs: ADAM uses `beta1`/`beta2`, RMSProp and AdaDelta use `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl HyperParams {
    pub fn adam(alpha: f64, epsilon: f64, beta1: f64, beta2: f64) -> Self {
        HyperParams {
            alpha,
            epsilon,
            beta1,
            beta2,
            beta: default_beta(),
        }
    }

    /// Single-decay parameterization (SGD, RMSProp, AdaGrad, AdaDelta).
    pub fn single(alpha: f64, epsilon: f64, beta: f64) -> Self {
        HyperParams {
            alpha,
            epsilon,
            beta1: default_beta1(),
            beta2: default_beta2(),
            beta,
        }
    }

    /// `√(1-β₂^{t+1}) / (1-β₁^{t+1})`
    pub fn bias_factor(&self, t: u64) -> f64 {
        let k = (t + 1).min(i32::MAX as u64) as i32;
        (1.0 - self.beta2.powi(k)).sqrt() / (1.0 - self.beta1.powi(k))
    }

    pub fn set(&mut self, name: ParamName, value: f64) {
        match name {
            ParamName::Alpha => self.alpha = value,
            ParamName::Epsilon => self.epsilon = value,
            ParamName::Beta1 => self.beta1 = value,
            ParamName::Beta2 => self.beta2 = value,
            ParamName::Beta => self.beta = value,
        }
    }

    pub fn get(&self, name: ParamName) -> f64 {
        match name {
            ParamName::Alpha => self.alpha,
            ParamName::Epsilon => self.epsilon,
            ParamName::Beta1 => self.beta1,
            ParamName::Beta2 => self.beta2,
            ParamName::Beta => self.beta,
        }
    }
}

/// Names of the tunable hyperparameters, as used in sweep axes and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamName {
    Alpha,
    Epsilon,
    Beta1,
    Beta2,
    Beta,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamName::Alpha => "alpha",
            ParamName::Epsilon => "epsilon",
            ParamName::Beta1 => "beta1",
            ParamName::Beta2 => "beta2",
            ParamName::Beta => "beta",
        })
    }
}

/// Optimizer family, ADAM variant and hyperparameters. Serialized flat:
/// `{"family":"adam","variant":"eps2_bias","alpha":..,"epsilon":..,"beta1":..,"beta2":..}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub family: Family,
    /// Ignored unless `family` is ADAM.
    #[serde(default)]
    pub variant: AdamVariant,
    #[serde(flatten)]
    pub hyper: HyperParams,
}

impl OptimizerSpec {
    pub fn new(family: Family, variant: AdamVariant, hyper: HyperParams) -> Result<Self> {
        let spec = OptimizerSpec {
            family,
            variant,
            hyper,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adam(variant: AdamVariant, hyper: HyperParams) -> Result<Self> {
        Self::new(Family::Adam, variant, hyper)
    }

    pub fn validate(&self) -> Result<()> {
        let hp = &self.hyper;
        let unit = |name: &str, b: f64| {
            if b > 0.0 && b < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidHyperParams(format!("{name} = {b} must lie in (0, 1)")))
            }
        };
        if !(hp.alpha > 0.0 && hp.alpha.is_finite()) {
            return Err(Error::InvalidHyperParams(format!("alpha = {} must be positive", hp.alpha)));
        }
        if !(hp.epsilon > 0.0 && hp.epsilon.is_finite()) {
            return Err(Error::InvalidHyperParams(format!(
                "epsilon = {} must be positive",
                hp.epsilon
            )));
        }
        match self.family {
            Family::Adam => {
                unit("beta1", hp.beta1)?;
                unit("beta2", hp.beta2)
            }
            Family::RmsProp | Family::AdaDelta => unit("beta", hp.beta),
            Family::Sgd | Family::AdaGrad => Ok(()),
        }
    }

    pub fn layout(&self, n: usize) -> Layout {
        Layout {
            family: self.family,
            n,
        }
    }

    /// The autonomous part of the map: the spec with bias correction removed.
    pub fn autonomous(&self) -> OptimizerSpec {
        OptimizerSpec {
            variant: self.variant.without_bias(),
            ..*self
        }
    }

    /// The map whose fixed-point Jacobian the closed-form eigenvalues
    /// describe. For ADAM this is always the `ε²` map without bias correction.
    pub fn linearization_map(&self) -> OptimizerSpec {
        OptimizerSpec {
            variant: AdamVariant::Eps2Nobias,
            ..*self
        }
    }
}

impl fmt::Display for OptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Adam => write!(f, "adam[{}]", self.variant),
            other => write!(f, "{other}"),
        }
    }
}

/// A block of the stacked state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    M,
    V,
    W,
}

/// Position of each block inside the stacked state.
///
/// ADAM `(m, v, w)`, RMSProp/AdaGrad `(v, w)`, AdaDelta `(v, m, w)`, SGD `(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub family: Family,
    pub n: usize,
}

impl Layout {
    pub fn blocks(&self) -> &'static [Block] {
        match self.family {
            Family::Adam => &[Block::M, Block::V, Block::W],
            Family::RmsProp | Family::AdaGrad => &[Block::V, Block::W],
            Family::AdaDelta => &[Block::V, Block::M, Block::W],
            Family::Sgd => &[Block::W],
        }
    }

    pub fn len(&self) -> usize {
        self.blocks().len() * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, block: Block) -> Option<Range<usize>> {
        self.blocks()
            .iter()
            .position(|&b| b == block)
            .map(|i| i * self.n..(i + 1) * self.n)
    }

    pub fn w_range(&self) -> Range<usize> {
        let k = self.blocks().len();
        (k - 1) * self.n..k * self.n
    }
}

/// Stacked optimizer state at iteration `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: u64,
    pub x: Vec<f64>,
    pub layout: Layout,
}

impl State {
    /// Zero moments at `w`, iteration 0.
    pub fn start(layout: Layout, w: &[f64]) -> Self {
        let mut x = vec![0.0; layout.len()];
        x[layout.w_range()].copy_from_slice(w);
        State { t: 0, x, layout }
    }

    pub fn w(&self) -> &[f64] {
        &self.x[self.layout.w_range()]
    }

    pub fn m(&self) -> Option<&[f64]> {
        self.layout.range(Block::M).map(|r| &self.x[r])
    }

    pub fn v(&self) -> Option<&[f64]> {
        self.layout.range(Block::V).map(|r| &self.x[r])
    }

    pub fn distance_to(&self, other: &[f64]) -> f64 {
        self.x
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Core update. Writes the new moment blocks into `next` (the weight block of
/// `next` is left untouched) and the weight increment into `dw`, so that
/// `w_{t+1} = w_t + dw`. `g` is `∇f(w_t)`.
fn advance(spec: &OptimizerSpec, variant: AdamVariant, t: u64, g: &[f64], x: &[f64], next: &mut [f64], dw: &mut [f64]) {
    let n = g.len();
    let hp = &spec.hyper;
    let eps2 = hp.epsilon * hp.epsilon;
    match spec.family {
        Family::Sgd => {
            for i in 0..n {
                dw[i] = -hp.alpha * g[i];
            }
        }
        Family::RmsProp | Family::AdaGrad => {
            let (decay, gain) = if spec.family == Family::RmsProp {
                (hp.beta, 1.0 - hp.beta)
            } else {
                (1.0, 1.0)
            };
            for i in 0..n {
                let v_next = decay * x[i] + gain * g[i] * g[i];
                next[i] = v_next;
                dw[i] = -hp.alpha * g[i] / (v_next + eps2).sqrt();
            }
        }
        Family::AdaDelta => {
            let b = hp.beta;
            for i in 0..n {
                let v = x[i];
                let m = x[n + i];
                let g2 = g[i] * g[i];
                let v_next = b * v + (1.0 - b) * g2;
                let m_next = b * m + (1.0 - b) * g2 * (m + eps2) / (v_next + eps2);
                next[i] = v_next;
                next[n + i] = m_next;
                dw[i] = -hp.alpha * g[i] * (m + eps2).sqrt() / (v_next + eps2).sqrt();
            }
        }
        Family::Adam => {
            let scale = if variant.bias_corrected() {
                hp.alpha * hp.bias_factor(t)
            } else {
                hp.alpha
            };
            for i in 0..n {
                let m_next = hp.beta1 * x[i] + (1.0 - hp.beta1) * g[i];
                let v_next = hp.beta2 * x[n + i] + (1.0 - hp.beta2) * g[i] * g[i];
                next[i] = m_next;
                next[n + i] = v_next;
                let denom = if variant.eps_outside_sqrt() {
                    v_next.sqrt() + hp.epsilon
                } else {
                    (v_next + eps2).sqrt()
                };
                dw[i] = -scale * m_next / denom;
            }
        }
    }
}

fn check_layout(spec: &OptimizerSpec, obj: &dyn Objective, state: &State) -> Result<()> {
    let expected = spec.layout(obj.dim());
    if state.layout != expected || state.x.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            expected: expected.len(),
            got: state.x.len(),
        });
    }
    Ok(())
}

fn guard(t: u64, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        Some(index) => Err(Error::Diverged {
            t,
            index,
            value: x[index],
        }),
        None => Ok(()),
    }
}

/// Reusable buffers for stepping one trajectory without reallocating.
#[derive(Clone)]
pub struct Stepper<'a> {
    spec: OptimizerSpec,
    obj: &'a dyn Objective,
    layout: Layout,
    g: Vec<f64>,
    dw: Vec<f64>,
    next: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: OptimizerSpec, obj: &'a dyn Objective) -> Self {
        let n = obj.dim();
        let layout = spec.layout(n);
        Stepper {
            spec,
            obj,
            layout,
            g: vec![0.0; n],
            dw: vec![0.0; n],
            next: vec![0.0; layout.len()],
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Advances `state` by one iteration in place.
    pub fn step_in_place(&mut self, state: &mut State) -> Result<()> {
        let wr = self.layout.w_range();
        self.obj.gradient_into(&state.x[wr.clone()], &mut self.g);
        advance(
            &self.spec,
            self.spec.variant,
            state.t,
            &self.g,
            &state.x,
            &mut self.next,
            &mut self.dw,
        );
        let w0 = wr.start;
        for i in 0..w0 {
            state.x[i] = self.next[i];
        }
        for (i, d) in self.dw.iter().enumerate() {
            state.x[w0 + i] += d;
        }
        state.t += 1;
        guard(state.t, &state.x)
    }
}

/// One iteration `x_{t+1} = T(t, x_t)` with `t = x.t`.
pub fn step(spec: &OptimizerSpec, obj: &dyn Objective, x: &State) -> Result<State> {
    check_layout(spec, obj, x)?;
    let mut next = x.clone();
    Stepper::new(*spec, obj).step_in_place(&mut next)?;
    Ok(next)
}

/// `T̄(x) - x` for the spec's autonomous map, with the weight part computed as
/// the increment itself rather than a difference of nearly equal numbers.
pub(crate) fn autonomous_displacement(spec: &OptimizerSpec, obj: &dyn Objective, x: &[f64], out: &mut [f64]) {
    let n = obj.dim();
    let layout = spec.layout(n);
    let wr = layout.w_range();
    let mut g = vec![0.0; n];
    obj.gradient_into(&x[wr.clone()], &mut g);
    let mut dw = vec![0.0; n];
    advance(spec, spec.variant.without_bias(), 0, &g, x, out, &mut dw);
    for i in 0..wr.start {
        out[i] -= x[i];
    }
    out[wr].copy_from_slice(&dw);
}

/// The zero-moment state `x⋆ = (0, 0, w⋆)` in the spec's layout.
pub fn fixed_point(spec: &OptimizerSpec, obj: &dyn Objective, w_star: &[f64]) -> Result<State> {
    let g = crate::objectives::grad(obj, w_star)?;
    let grad_norm = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if !(grad_norm <= CRITICAL_POINT_TOL) {
        return Err(Error::NotCriticalPoint { grad_norm });
    }
    Ok(State::start(spec.layout(obj.dim()), w_star))
}

fn adam_only(spec: &OptimizerSpec) -> Result<()> {
    if spec.family != Family::Adam {
        return Err(Error::NotApplicable(format!(
            "perturbation terms are defined for ADAM only, not {}",
            spec.family
        )));
    }
    Ok(())
}

/// Fresh moments `(m_{t+1}, v_{t+1})` of ADAM at `x`.
fn adam_moments(hp: &HyperParams, obj: &dyn Objective, x: &State) -> (Vec<f64>, Vec<f64>) {
    let n = x.layout.n;
    let mut g = vec![0.0; n];
    obj.gradient_into(x.w(), &mut g);
    let m = &x.x[..n];
    let v = &x.x[n..2 * n];
    let m_next = (0..n).map(|i| hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i]).collect();
    let v_next = (0..n)
        .map(|i| hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i])
        .collect();
    (m_next, v_next)
}

/// Bias-correction perturbation `[0, 0, α(1 - b_t)·m_{t+1}/D]` where `D` is the
/// variant's denominator: `√(v_{t+1}+ε²)` (Θ) or `√v_{t+1}+ε` (Θ̃).
///
/// `step(eps2_bias) = step(eps2_nobias) + theta` and
/// `step(orig_bias) = step(orig_nobias) + theta`.
pub fn theta(spec: &OptimizerSpec, obj: &dyn Objective, x: &State) -> Result<Vec<f64>> {
    adam_only(spec)?;
    check_layout(spec, obj, x)?;
    let hp = &spec.hyper;
    let n = x.layout.n;
    let (m_next, v_next) = adam_moments(hp, obj, x);
    let factor = 1.0 - hp.bias_factor(x.t);
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let denom = if spec.variant.eps_outside_sqrt() {
            v_next[i].sqrt() + hp.epsilon
        } else {
            (v_next[i] + hp.epsilon * hp.epsilon).sqrt()
        };
        out[2 * n + i] = hp.alpha * factor * m_next[i] / denom;
    }
    Ok(out)
}

/// `1/(√v + ε) - 1/√(v + ε²)`; bounded by `1/ε` in absolute value for `v ≥ 0`.
pub fn epsilon_placement_gap(v: f64, epsilon: f64) -> f64 {
    1.0 / (v.sqrt() + epsilon) - 1.0 / (v + epsilon * epsilon).sqrt()
}

/// Difference between the original (`√v+ε`) and the `ε²` weight update, both
/// without bias correction: `step(orig_nobias) = step(eps2_nobias) + h`.
///
/// The weight block is `-α·m_{t+1}·(1/(√v_{t+1}+ε) - 1/√(v_{t+1}+ε²))`.
pub fn h_disturbance(hp: &HyperParams, obj: &dyn Objective, x: &State) -> Result<Vec<f64>> {
    if x.layout.family != Family::Adam || x.x.len() != 3 * obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: 3 * obj.dim(),
            got: x.x.len(),
        });
    }
    let n = x.layout.n;
    let (m_next, v_next) = adam_moments(hp, obj, x);
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        out[2 * n + i] = -hp.alpha * m_next[i] * epsilon_placement_gap(v_next[i], hp.epsilon);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Builtin;

    fn reference_hp() -> HyperParams {
        HyperParams::adam(0.01, 0.01, 0.9, 0.99)
    }

    #[test]
    fn first_adam_step_by_hand() {
        let spec = OptimizerSpec::adam(AdamVariant::Eps2Bias, reference_hp()).unwrap();
        let x0 = State::start(spec.layout(1), &[4.0]);
        let x1 = step(&spec, &Builtin::Quad1d, &x0).unwrap();
        // m₁ = 0.1·4, v₁ = 0.01·16
        let m1: f64 = 0.1 * 4.0;
        let v1: f64 = (1.0 - 0.99) * 16.0;
        let w1 = 4.0 - 0.01 * ((1.0_f64 - 0.99).sqrt() / (1.0 - 0.9)) * m1 / (v1 + 1e-4).sqrt();
        assert!((x1.x[0] - 0.4).abs() < 1e-15);
        assert!((x1.x[1] - 0.16).abs() < 1e-15);
        assert!((x1.x[2] - w1).abs() < 1e-15);
        assert_eq!(x1.t, 1);
    }

    #[test]
    fn sgd_step_is_plain_gradient_descent() {
        let spec = OptimizerSpec::new(Family::Sgd, AdamVariant::default(), HyperParams::single(0.5, 0.01, 1.0)).unwrap();
        let x0 = State::start(spec.layout(1), &[1.0]);
        let x1 = step(&spec, &Builtin::ScaledQuad(1.0), &x0).unwrap();
        assert_eq!(x1.x, vec![0.5]);
    }

    #[test]
    fn fixed_points_in_each_layout() {
        let adam = OptimizerSpec::adam(AdamVariant::Eps2Bias, reference_hp()).unwrap();
        assert_eq!(fixed_point(&adam, &Builtin::Quad1d, &[0.0]).unwrap().x, vec![0.0, 0.0, 0.0]);

        let ada = OptimizerSpec::new(Family::AdaDelta, AdamVariant::default(), HyperParams::single(1.0, 1e-6, 0.95)).unwrap();
        assert_eq!(fixed_point(&ada, &Builtin::Quartic, &[-0.75]).unwrap().x, vec![0.0, 0.0, -0.75]);

        let rms = OptimizerSpec::new(Family::RmsProp, AdamVariant::default(), HyperParams::single(0.01, 0.01, 0.9)).unwrap();
        let fp = fixed_point(&rms, &Builtin::TwoDim, &[-2.0, -1.0]).unwrap();
        assert_eq!(fp.x, vec![0.0, 0.0, -2.0, -1.0]);
        assert_eq!(fp.v(), Some(&[0.0, 0.0][..]));
        assert_eq!(fp.m(), None);
    }

    #[test]
    fn non_critical_point_is_rejected() {
        let spec = OptimizerSpec::adam(AdamVariant::Eps2Bias, reference_hp()).unwrap();
        assert!(matches!(
            fixed_point(&spec, &Builtin::Quad1d, &[1.0]),
            Err(Error::NotCriticalPoint { .. })
        ));
    }

    #[test]
    fn theta_vanishes_at_t0_for_matching_decays() {
        // √(1-0.99) = 1-0.9, so the bias factor is 1 at t = 0
        let spec = OptimizerSpec::adam(AdamVariant::Eps2Bias, reference_hp()).unwrap();
        let x = State {
            t: 0,
            x: vec![0.3, 0.2, 1.5],
            layout: spec.layout(1),
        };
        let th = theta(&spec, &Builtin::Quad1d, &x).unwrap();
        assert!(th.iter().all(|v| v.abs() < 1e-15), "{th:?}");
    }

    #[test]
    fn theta_decays_with_t_and_vanishes_at_fixed_point() {
        let spec = OptimizerSpec::adam(AdamVariant::Eps2Bias, HyperParams::adam(0.01, 0.01, 0.5, 0.999)).unwrap();
        let mut x = State {
            t: 1,
            x: vec![0.3, 0.2, 1.5],
            layout: spec.layout(1),
        };
        let early = theta(&spec, &Builtin::Quad1d, &x).unwrap()[2].abs();
        x.t = 100_000;
        let late = theta(&spec, &Builtin::Quad1d, &x).unwrap()[2].abs();
        assert!(early > 1e-4);
        assert!(late < 1e-12 * early.max(1.0));

        let fp = fixed_point(&spec, &Builtin::Quad1d, &[0.0]).unwrap();
        for t in [0, 1, 7, 100] {
            let fp_t = State { t, ..fp.clone() };
            assert!(theta(&spec, &Builtin::Quad1d, &fp_t).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn h_disturbance_examples() {
        let hp = reference_hp();
        let layout = Layout { family: Family::Adam, n: 1 };
        // v_{t+1} = 0 when v = 0 and g = 0 but m ≠ 0
        let x = State { t: 0, x: vec![0.5, 0.0, 0.0], layout };
        assert_eq!(h_disturbance(&hp, &Builtin::Quad1d, &x).unwrap(), vec![0.0; 3]);
        // m_{t+1} = 0
        let x = State { t: 0, x: vec![0.0, 0.7, 0.0], layout };
        assert_eq!(h_disturbance(&hp, &Builtin::Quad1d, &x).unwrap(), vec![0.0; 3]);

        let eps: f64 = 0.01;
        let gap = epsilon_placement_gap(eps * eps, eps);
        let expected = 1.0 / (2.0 * eps) - 1.0 / (eps * 2.0_f64.sqrt());
        assert!((gap - expected).abs() < 1e-12);
        assert!(gap.abs() <= 1.0 / eps);
        assert_eq!(epsilon_placement_gap(0.0, eps), 0.0);
    }

    #[test]
    fn perturbations_require_adam() {
        let spec = OptimizerSpec::new(Family::RmsProp, AdamVariant::default(), HyperParams::single(0.01, 0.01, 0.9)).unwrap();
        let x = State::start(spec.layout(1), &[1.0]);
        assert!(theta(&spec, &Builtin::Quad1d, &x).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = OptimizerSpec::new(Family::Sgd, AdamVariant::default(), HyperParams::single(10.0, 0.01, 1.0)).unwrap();
        let mut x = State::start(spec.layout(1), &[1.0]);
        let obj = Builtin::ScaledQuad(1.0);
        let err = loop {
            match step(&spec, &obj, &x) {
                Ok(next) => x = next,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Diverged { index: 0, .. }));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(OptimizerSpec::adam(AdamVariant::Eps2Bias, HyperParams::adam(0.0, 0.01, 0.9, 0.99)).is_err());
        assert!(OptimizerSpec::adam(AdamVariant::Eps2Bias, HyperParams::adam(0.01, 0.01, 1.0, 0.99)).is_err());
        assert!(OptimizerSpec::new(Family::RmsProp, AdamVariant::default(), HyperParams::single(0.01, 0.01, 1.0)).is_err());
        assert!(OptimizerSpec::new(Family::AdaGrad, AdamVariant::default(), HyperParams::single(0.01, 0.01, 1.0)).is_ok());
    }

    #[test]
    fn spec_json_shape() {
        let spec: OptimizerSpec = serde_json::from_str(
            r#"{"family":"adam","variant":"orig_bias","alpha":0.01,"epsilon":0.01,"beta1":0.9,"beta2":0.99}"#,
        )
        .unwrap();
        assert_eq!(spec.family, Family::Adam);
        assert_eq!(spec.variant, AdamVariant::OrigBias);
        assert_eq!(spec.hyper.beta2, 0.99);
        let back = serde_json::to_value(spec).unwrap();
        assert_eq!(back["variant"], "orig_bias");
        assert_eq!(back["alpha"], 0.01);
    }
}
