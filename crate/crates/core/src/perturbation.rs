//! Sampled checks of the estimates behind local convergence under
//! perturbations: the bias-correction bound, the ε-placement bound, the
//! converse Lyapunov construction, the gradient lower bound and the fitted
//! exponential envelope of a trajectory.
//!
//! Every check draws its samples from a seeded ChaCha stream before
//! evaluating them in parallel, so reports are reproducible and independent
//! of the worker count. All norms are Euclidean.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AdamVariant, Block, Family, HyperParams, Layout, OptimizerSpec, State, Stepper};
use crate::error::{Error, Result};
use crate::experiments::Trajectory;
use crate::objectives::{self, Objective};
use crate::stability;

/// Absolute slack granted to every sampled inequality.
pub const SLACK: f64 = 1e-12;
/// Inflation applied to sampled Lipschitz estimates.
pub const LIPSCHITZ_INFLATION: f64 = 1.05;
/// Hessian or Jacobian samples used for a Lipschitz estimate.
pub const LIPSCHITZ_SAMPLES: usize = 1000;
/// Trajectories used to fit `k` and `λ` for a Lyapunov certificate.
pub const CALIBRATION_SAMPLES: usize = 1000;
/// Worst calibration states refined by local search, per objective.
const CLIMB_STARTS: usize = 8;
const CLIMB_STEPS: usize = 60;
/// Largest iteration index drawn by [`verify_theta_bound`].
pub const THETA_MAX_T: u64 = 200;

/// A sample at which a checked inequality failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<u64>,
    pub x: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

/// Outcome of one sampled inequality `lhs ≤ rhs`.
#[derive(Clone, Copy)]
struct Outcome {
    lhs: f64,
    rhs: f64,
    violated: bool,
}

impl Outcome {
    fn le(lhs: f64, rhs: f64) -> Self {
        Outcome {
            lhs,
            rhs,
            violated: !(lhs <= rhs + SLACK),
        }
    }
}

#[derive(Clone, Copy)]
struct Tally {
    max_ratio: f64,
    violations: usize,
    /// First violating sample index with its two sides.
    first: Option<(usize, f64, f64)>,
}

impl Tally {
    const EMPTY: Tally = Tally {
        max_ratio: 0.0,
        violations: 0,
        first: None,
    };

    fn of(i: usize, o: Outcome) -> Tally {
        Tally {
            max_ratio: ratio(o.lhs, o.rhs),
            violations: o.violated as usize,
            first: o.violated.then_some((i, o.lhs, o.rhs)),
        }
    }

    fn merge(a: Tally, b: Tally) -> Tally {
        let first = match (a.first, b.first) {
            (Some(x), Some(y)) => Some(if x.0 <= y.0 { x } else { y }),
            (x, y) => x.or(y),
        };
        Tally {
            max_ratio: a.max_ratio.max(b.max_ratio),
            violations: a.violations + b.violations,
            first,
        }
    }
}

fn tally<T: Sync>(samples: &[T], check: impl Fn(&T) -> Outcome + Sync) -> Tally {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| Tally::of(i, check(s)))
        .reduce(|| Tally::EMPTY, Tally::merge)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Uniform point in the closed ball of `radius` about `center`.
fn sample_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let len = norm(&dir);
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    center
        .iter()
        .zip(&dir)
        .map(|(c, u)| if len > 0.0 { c + r * u / len } else { *c })
        .collect()
}

/// A state within `radius` of `x⋆ = (0, 0, w⋆)`, with the blocks the family
/// keeps nonnegative folded to `≥ 0`.
fn sample_state(rng: &mut ChaCha8Rng, layout: Layout, w_star: &[f64], radius: f64) -> State {
    let x_star = State::start(layout, w_star);
    let mut x = sample_ball(rng, &x_star.x, radius);
    fold_nonneg(layout, &mut x);
    State { t: 0, x, layout }
}

fn fold_nonneg(layout: Layout, x: &mut [f64]) {
    let mut nonneg = vec![Block::V];
    if layout.family == Family::AdaDelta {
        nonneg.push(Block::M);
    }
    for b in nonneg {
        if let Some(r) = layout.range(b) {
            for v in &mut x[r] {
                *v = v.abs();
            }
        }
    }
}

fn known_minimum(obj: &dyn Objective) -> Result<Vec<f64>> {
    obj.minimum().ok_or(Error::NoKnownMinimum)
}

fn check_sampling(sample_count: usize, radius: f64) -> Result<()> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be positive".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    Ok(())
}

/// Largest Hessian spectral norm over `samples` points of the ball about
/// `w⋆` (the center included), inflated by 5%.
pub fn hessian_lipschitz(obj: &dyn Objective, w_star: &[f64], radius: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![w_star.to_vec()];
    points.extend((0..samples).map(|_| sample_ball(&mut rng, w_star, radius)));
    let worst = points
        .par_iter()
        .map(|w| {
            objectives::symmetric_eigenvalues(obj.hessian(w))
                .into_iter()
                .fold(0.0_f64, |a, mu| a.max(mu.abs()))
        })
        .reduce(|| 0.0, f64::max);
    worst * LIPSCHITZ_INFLATION
}

/// Constants of the bias-correction estimate
/// `‖Θ(t,x)‖ ≤ C·β^{t+1}·(β₁‖m‖ + (1-β₁)L‖w-w⋆‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBoundConstants {
    /// `4α / (ε(1-β₁)(√(1-β₂) + (1-β₁)))`
    pub c: f64,
    /// `max{β₁, β₂, β₁²}`
    pub beta_decay: f64,
    pub lipschitz: f64,
}

impl ThetaBoundConstants {
    pub fn new(hp: &HyperParams, lipschitz: f64) -> Self {
        let (b1, b2) = (hp.beta1, hp.beta2);
        ThetaBoundConstants {
            c: 4.0 * hp.alpha / (hp.epsilon * (1.0 - b1) * ((1.0 - b2).sqrt() + (1.0 - b1))),
            beta_decay: b1.max(b2).max(b1 * b1),
            lipschitz,
        }
    }

    /// The weighted norm `β₁‖m̃‖ + (1-β₁)L‖w̃‖` the estimate is stated in.
    fn star_norm(&self, beta1: f64, m: &[f64], w_dev: f64) -> f64 {
        beta1 * norm(m) + (1.0 - beta1) * self.lipschitz * w_dev
    }

    pub fn rhs(&self, beta1: f64, t: u64, m: &[f64], w_dev: f64) -> f64 {
        self.c * self.beta_decay.powf((t + 1) as f64) * self.star_norm(beta1, m, w_dev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBoundReport {
    pub constants: ThetaBoundConstants,
    pub radius: f64,
    pub samples: usize,
    pub violations: usize,
    /// Largest `‖Θ‖ / bound` seen; `0/0` counts as 0.
    pub max_ratio: f64,
    pub witness: Option<Witness>,
}

impl ThetaBoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Samples `(t, x)` with `t ∈ {0..200}` and `x` in the ball of `radius`
/// about `x⋆`, checking both bias perturbations (ε inside and outside the
/// root) against the estimate.
pub fn verify_theta_bound(
    obj: &dyn Objective,
    hp: &HyperParams,
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<ThetaBoundReport> {
    check_sampling(sample_count, radius)?;
    let w_star = known_minimum(obj)?;
    let inside = OptimizerSpec::adam(AdamVariant::Eps2Bias, *hp)?;
    let outside = OptimizerSpec::adam(AdamVariant::OrigBias, *hp)?;
    let lipschitz = hessian_lipschitz(obj, &w_star, radius, LIPSCHITZ_SAMPLES, seed ^ 0x4c49_5053);
    let constants = ThetaBoundConstants::new(hp, lipschitz);
    let layout = inside.layout(obj.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<State> = (0..sample_count)
        .map(|_| {
            let t = rng.gen_range(0..=THETA_MAX_T);
            State {
                t,
                ..sample_state(&mut rng, layout, &w_star, radius)
            }
        })
        .collect();
    let n = obj.dim();
    let t = tally(&samples, |s| {
        let lhs = [inside, outside]
            .iter()
            .map(|spec| dynamics::theta(spec, obj, s).map(|th| norm(&th)).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max);
        let rhs = constants.rhs(hp.beta1, s.t, &s.x[..n], dist(s.w(), &w_star));
        Outcome::le(lhs, rhs)
    });
    Ok(ThetaBoundReport {
        constants,
        radius,
        samples: sample_count,
        violations: t.violations,
        max_ratio: t.max_ratio,
        witness: t.first.map(|(i, lhs, rhs)| Witness {
            t: Some(samples[i].t),
            x: samples[i].x.clone(),
            lhs,
            rhs,
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HBoundReport {
    pub epsilon: f64,
    /// `α/ε`, the constant of `‖h(x)‖ ≤ C(ε)‖x - x⋆‖`.
    pub c_epsilon: f64,
    pub scalar_samples: usize,
    pub scalar_violations: usize,
    /// Largest `|1/(√v+ε) - 1/√(v+ε²)| · ε`.
    pub scalar_max_ratio: f64,
    pub vector_samples: usize,
    pub vector_violations: usize,
    pub vector_max_ratio: f64,
    pub witness: Option<Witness>,
}

impl HBoundReport {
    pub fn passed(&self) -> bool {
        self.scalar_violations == 0 && self.vector_violations == 0
    }
}

/// `v = 0`, `v = ε²` and `count - 2` log-spaced values from `1e-24` to `1e12`.
fn scalar_grid(count: usize, epsilon: f64) -> Vec<f64> {
    let mut v = vec![0.0, epsilon * epsilon];
    let k = count.saturating_sub(2);
    v.extend((0..k).map(|i| {
        let s = if k > 1 { i as f64 / (k - 1) as f64 } else { 1.0 };
        10f64.powf(-24.0 + 36.0 * s)
    }));
    v.truncate(count.max(1));
    v
}

/// Checks `|1/(√v+ε) - 1/√(v+ε²)| ≤ 1/ε` on a log grid of `v ≥ 0`, and
/// `‖h(x)‖ ≤ (α/ε)‖x - x⋆‖` on states sampled in the ball of `radius`.
pub fn verify_h_bound(
    obj: &dyn Objective,
    hp: &HyperParams,
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<HBoundReport> {
    check_sampling(sample_count, radius)?;
    let w_star = known_minimum(obj)?;
    let spec = OptimizerSpec::adam(AdamVariant::OrigNobias, *hp)?;
    let eps = hp.epsilon;

    let grid = scalar_grid(sample_count, eps);
    let scalar = tally(&grid, |&v| Outcome::le(dynamics::epsilon_placement_gap(v, eps).abs(), 1.0 / eps));

    let c_epsilon = hp.alpha / eps;
    let layout = spec.layout(obj.dim());
    let x_star = State::start(layout, &w_star);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<State> = (0..sample_count)
        .map(|_| sample_state(&mut rng, layout, &w_star, radius))
        .collect();
    let vector = tally(&states, |s| {
        let lhs = dynamics::h_disturbance(hp, obj, s).map(|h| norm(&h)).unwrap_or(f64::INFINITY);
        Outcome::le(lhs, c_epsilon * s.distance_to(&x_star.x))
    });

    let witness = match (scalar.first, vector.first) {
        (Some((i, lhs, rhs)), _) => Some(Witness {
            t: None,
            x: vec![grid[i]],
            lhs,
            rhs,
        }),
        (None, Some((i, lhs, rhs))) => Some(Witness {
            t: None,
            x: states[i].x.clone(),
            lhs,
            rhs,
        }),
        (None, None) => None,
    };
    Ok(HBoundReport {
        epsilon: eps,
        c_epsilon,
        scalar_samples: grid.len(),
        scalar_violations: scalar.violations,
        scalar_max_ratio: scalar.max_ratio,
        vector_samples: sample_count,
        vector_violations: vector.violations,
        vector_max_ratio: vector.max_ratio,
        witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientLowerBound {
    /// Certified constant `1/‖∇²f(w⋆)⁻¹‖ - δ`.
    pub c: f64,
    /// `1/‖∇²f(w⋆)⁻¹‖`, the smallest Hessian eigenvalue at the minimum.
    pub mu_min: f64,
    pub delta: f64,
    /// Smallest `‖∇f(w)‖ / ‖w - w⋆‖` over the samples.
    pub observed_min_ratio: f64,
    pub radius: f64,
    pub samples: usize,
    pub violations: usize,
    pub verified: bool,
    pub witness: Option<Witness>,
}

/// Estimates `C` in `‖∇f(w)‖ ≥ C‖w - w⋆‖` as `μ_min - δ` with `δ = μ_min/2`
/// and checks it on points sampled in the ball of `radius` about `w⋆`.
pub fn gradient_lower_bound(obj: &dyn Objective, radius: f64, sample_count: usize, seed: u64) -> Result<GradientLowerBound> {
    check_sampling(sample_count, radius)?;
    let w_star = known_minimum(obj)?;
    let spectrum = objectives::hessian_spectrum(obj, &w_star)?;
    if !spectrum.positive_definite {
        return Err(Error::NotApplicable(format!(
            "Hessian at the minimum is not positive definite (smallest eigenvalue {})",
            spectrum.min()
        )));
    }
    let mu_min = spectrum.min();
    let delta = mu_min / 2.0;
    let c = mu_min - delta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..sample_count)
        .map(|_| sample_ball(&mut rng, &w_star, radius))
        .collect();
    let n = obj.dim();
    // Checked as c‖w - w⋆‖ ≤ ‖∇f(w)‖ so the tally's ratio is the reciprocal of the observed one.
    let t = tally(&points, |w| {
        let mut g = vec![0.0; n];
        obj.gradient_into(w, &mut g);
        Outcome::le(c * dist(w, &w_star), norm(&g))
    });
    let observed_min_ratio = points
        .par_iter()
        .filter_map(|w| {
            let d = dist(w, &w_star);
            (d > 0.0).then(|| {
                let mut g = vec![0.0; n];
                obj.gradient_into(w, &mut g);
                norm(&g) / d
            })
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(GradientLowerBound {
        c,
        mu_min,
        delta,
        observed_min_ratio,
        radius,
        samples: sample_count,
        violations: t.violations,
        verified: t.violations == 0,
        witness: t.first.map(|(i, lhs, rhs)| Witness {
            t: None,
            x: points[i].clone(),
            lhs,
            rhs,
        }),
    })
}

/// Tightest constants observed on the validation samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

/// A numerically validated Lyapunov function `V(x) = Σ_{t<N} ‖φ_t(x) - x⋆‖²`
/// for the autonomous map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub horizon: usize,
    pub radius: f64,
    /// Fitted `k` and `λ` of `‖φ_t(x) - x⋆‖ ≤ k e^{-λt} ‖x - x⋆‖`.
    pub k: f64,
    pub lambda: f64,
    /// Lipschitz constant of the map on the ball.
    pub lipschitz: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Grows like `L^N` and may overflow to infinity (JSON `null`).
    pub c4: f64,
    pub empirical: EmpiricalConstants,
    pub sample_count: usize,
    /// Samples breaking the sandwich, decrease or Lipschitz-type inequality.
    pub violations: usize,
    /// Samples breaking the fitted decay `k e^{-λt}` itself.
    pub decay_violations: usize,
    pub witness: Option<Witness>,
}

impl LyapunovCertificate {
    pub fn valid(&self) -> bool {
        self.violations == 0 && [self.c1, self.c2, self.c3, self.c4].iter().all(|&c| c > 0.0)
    }
}

/// `‖φ_t(x) - x⋆‖` for `t = 0..=steps` under `map`.
fn deviations(map: &OptimizerSpec, obj: &dyn Objective, x0: &State, x_star: &[f64], steps: usize) -> Result<Vec<f64>> {
    let mut stepper = Stepper::new(*map, obj);
    let mut s = x0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s.distance_to(x_star));
    for _ in 0..steps {
        stepper.step_in_place(&mut s)?;
        out.push(s.distance_to(x_star));
    }
    Ok(out)
}

/// `V(x₀) = Σ_{t=0}^{N-1} ‖φ_t(x₀) - x⋆‖²` along the autonomous part of `spec`.
pub fn lyapunov_value(spec: &OptimizerSpec, obj: &dyn Objective, x0: &State, w_star: &[f64], horizon: usize) -> Result<f64> {
    let x_star = State::start(x0.layout, w_star);
    let d = deviations(&spec.autonomous(), obj, x0, &x_star.x, horizon)?;
    Ok(d[..horizon].iter().map(|v| v * v).sum())
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Least-squares slope of `ys` against `ts`.
fn slope(ts: &[f64], ys: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let mt = ts.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ts.iter().zip(ys).map(|(t, y)| (t - mt) * (y - my)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - mt) * (t - mt)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

type Score<'a> = dyn Fn(&[f64]) -> f64 + Sync + 'a;

/// Stable fixed point, autonomous map and sampler shared by the Lyapunov
/// routines.
struct LyapunovSetup<'a> {
    map: OptimizerSpec,
    obj: &'a dyn Objective,
    w_star: Vec<f64>,
    x_star: State,
    radius: f64,
}

impl<'a> LyapunovSetup<'a> {
    fn new(spec: &OptimizerSpec, obj: &'a dyn Objective, radius: f64) -> Result<Self> {
        let w_star = known_minimum(obj)?;
        let spectrum = objectives::hessian_spectrum(obj, &w_star)?;
        let rho = stability::spectral_radius(&stability::closed_form_eigs(spec, &spectrum).eigenvalues)?;
        if !stability::bound_check(spec, &spectrum).satisfied() || !(rho < 1.0) {
            return Err(Error::CertificateUnavailable { rho });
        }
        let map = spec.autonomous();
        let x_star = dynamics::fixed_point(&map, obj, &w_star)?;
        Ok(LyapunovSetup {
            map,
            obj,
            w_star,
            x_star,
            radius,
        })
    }

    fn draw(&self, seed: u64, count: usize) -> Vec<State> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| sample_state(&mut rng, self.x_star.layout, &self.w_star, self.radius))
            .collect()
    }

    fn deviations(&self, s: &State, steps: usize) -> Result<Vec<f64>> {
        deviations(&self.map, self.obj, s, &self.x_star.x, steps)
    }

    /// Worst `‖φ_t(x) - x⋆‖ / ‖x - x⋆‖` at each `t ≤ steps` over the
    /// calibration sample, sharpened by a local search from its worst states.
    fn worst_profile(&self, seed: u64, steps: usize) -> Result<Vec<f64>> {
        let calibration = self.draw(seed.wrapping_add(1), CALIBRATION_SAMPLES);
        let ratios = |s: &State| -> Result<Vec<f64>> {
            let d = self.deviations(s, steps)?;
            Ok(if d[0] > 0.0 { d.iter().map(|v| v / d[0]).collect() } else { vec![0.0; steps + 1] })
        };
        let profiles: Vec<Vec<f64>> = calibration.par_iter().map(ratios).collect::<Result<_>>()?;
        let mut worst = vec![0.0_f64; steps + 1];
        let absorb = |worst: &mut Vec<f64>, r: &[f64]| {
            for (w, v) in worst.iter_mut().zip(r) {
                *w = w.max(*v);
            }
        };
        for r in &profiles {
            absorb(&mut worst, r);
        }

        // Two objectives: the summed squared ratio drives c₂, the late
        // ratio drives the decay constant.
        let lambda = fit_decay(&worst).map_or(0.0, |(_, l, _)| l);
        let scores: [&Score<'_>; 2] = [
            &|r: &[f64]| r.iter().map(|v| v * v).sum(),
            &|r: &[f64]| r.iter().enumerate().map(|(t, v)| v * (lambda * t as f64).exp()).fold(0.0, f64::max),
        ];
        for (k, score) in scores.iter().enumerate() {
            let mut ranked: Vec<usize> = (0..profiles.len()).collect();
            ranked.sort_by(|&a, &b| score(&profiles[b]).total_cmp(&score(&profiles[a])));
            let climbed: Vec<Vec<f64>> = ranked[..CLIMB_STARTS.min(ranked.len())]
                .par_iter()
                .enumerate()
                .map(|(i, &start)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5 + (k * CLIMB_STARTS + i) as u64));
                    self.climb(&mut rng, calibration[start].clone(), &profiles[start], *score, &ratios)
                })
                .collect::<Result<_>>()?;
            for r in &climbed {
                absorb(&mut worst, r);
            }
        }
        Ok(worst)
    }

    /// Random-perturbation ascent of `score` inside the sampling ball.
    /// Returns the worst profile seen along the way, componentwise.
    fn climb(
        &self,
        rng: &mut ChaCha8Rng,
        mut x: State,
        profile: &[f64],
        score: &Score<'_>,
        ratios: &(dyn Fn(&State) -> Result<Vec<f64>> + Sync),
    ) -> Result<Vec<f64>> {
        let mut best = score(profile);
        let mut seen = profile.to_vec();
        let mut sigma = 0.1 * self.radius;
        for _ in 0..CLIMB_STEPS {
            let mut cand = x.clone();
            for c in cand.x.iter_mut() {
                *c += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            let dev: Vec<f64> = cand.x.iter().zip(&self.x_star.x).map(|(c, s)| c - s).collect();
            let len = norm(&dev);
            if len > self.radius {
                for (c, (d, s)) in cand.x.iter_mut().zip(dev.iter().zip(&self.x_star.x)) {
                    *c = s + d * self.radius / len;
                }
            }
            fold_nonneg(cand.layout, &mut cand.x);
            let r = ratios(&cand)?;
            for (w, v) in seen.iter_mut().zip(&r) {
                *w = w.max(*v);
            }
            let sc = score(&r);
            if sc > best {
                best = sc;
                x = cand;
            } else {
                sigma *= 0.9;
            }
        }
        Ok(seen)
    }
}

/// Fits `λ` as minus the least-squares slope of the log worst-case profile,
/// then the smallest `k ≥ 1` covering it, inflated by 10%. Returns
/// `(k, λ, 1 - k²e^{-2λN})` with `N = worst.len() - 1`.
fn fit_decay(worst: &[f64]) -> Option<(f64, f64, f64)> {
    let (ts, ys): (Vec<f64>, Vec<f64>) = worst
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= f64::MIN_POSITIVE)
        .map(|(t, r)| (t as f64, r.ln()))
        .unzip();
    let lambda = -slope(&ts, &ys);
    if !(lambda > 0.0) {
        return None;
    }
    let k = worst
        .iter()
        .enumerate()
        .map(|(t, r)| r * (lambda * t as f64).exp())
        .fold(1.0_f64, f64::max)
        * 1.1;
    let n = (worst.len() - 1) as f64;
    Some((k, lambda, 1.0 - k * k * (-2.0 * lambda * n).exp()))
}

/// Smallest power-of-two horizon `N ≥ 16`, up to `max_horizon`, for which
/// the calibration of [`lyapunov_certificate`] gives `1 - k²e^{-2λN} > 0`.
pub fn lyapunov_horizon(
    spec: &OptimizerSpec,
    obj: &dyn Objective,
    radius: f64,
    seed: u64,
    max_horizon: usize,
) -> Result<usize> {
    check_sampling(1, radius)?;
    let setup = LyapunovSetup::new(spec, obj, radius)?;
    let mut n = 16;
    while n <= max_horizon {
        let worst = setup.worst_profile(seed, n)?;
        if matches!(fit_decay(&worst), Some((_, _, c3)) if c3 > 0.0) {
            return Ok(n);
        }
        n *= 2;
    }
    Err(Error::InvalidArgument(format!(
        "no horizon up to {max_horizon} makes 1 - k²e^(-2λN) positive"
    )))
}

/// Builds `V` over `horizon` steps, fits `k` and `λ` on a calibration sample,
/// derives `c₁..c₄` and counts violations on `sample_count` fresh states.
///
/// The fixed point must satisfy the family's bound; otherwise the
/// certificate is refused with the closed-form spectral radius.
pub fn lyapunov_certificate(
    spec: &OptimizerSpec,
    obj: &dyn Objective,
    horizon: usize,
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<LyapunovCertificate> {
    check_sampling(sample_count, radius)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon N must be positive".into()));
    }
    let setup = LyapunovSetup::new(spec, obj, radius)?;
    let (map, x_star) = (setup.map, &setup.x_star);
    let draw = |seed: u64, count: usize| setup.draw(seed, count);

    let worst = setup.worst_profile(seed, horizon)?;
    let Some((k, lambda, c3)) = fit_decay(&worst) else {
        return Err(Error::InvalidArgument(format!(
            "no decay observed within horizon {horizon}; increase N or shrink the radius"
        )));
    };
    if !(c3 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} too short: 1 - k²e^(-2λN) = {c3} with k = {k}, λ = {lambda}"
        )));
    }
    let n_f = horizon as f64;

    let jac_points = draw(seed.wrapping_add(2), LIPSCHITZ_SAMPLES);
    let lipschitz = jac_points
        .par_iter()
        .map(|s| stability::jacobian_of_map(&map, obj, &s.x, 0).map(|j| spectral_norm(&j)))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(spectral_norm(&stability::jacobian_of_map(&map, obj, &x_star.x, 0)?), f64::max)
        * LIPSCHITZ_INFLATION;

    let c1 = 1.0;
    let c2 = k * k * (1.0 - (-2.0 * lambda * n_f).exp()) / (1.0 - (-2.0 * lambda).exp());
    let c4: f64 = (0..horizon)
        .map(|t| k * (-lambda * t as f64).exp() * lipschitz.powi(t as i32))
        .sum();

    // Validation on fresh states, each paired with an independent partner y.
    let xs = draw(seed.wrapping_add(3), sample_count);
    let ys = draw(seed.wrapping_add(4), sample_count);
    struct Eval {
        v: f64,
        dv: f64,
        d0: f64,
        decay_ok: bool,
    }
    let eval = |s: &State| -> Option<Eval> {
        let d = deviations(&map, obj, s, &x_star.x, horizon).ok()?;
        let v: f64 = d[..horizon].iter().map(|x| x * x).sum();
        let decay_ok = d
            .iter()
            .enumerate()
            .all(|(t, dt)| *dt <= k * (-lambda * t as f64).exp() * d[0] * (1.0 + SLACK) + SLACK);
        Some(Eval {
            v,
            dv: d[horizon] * d[horizon] - d[0] * d[0],
            d0: d[0],
            decay_ok,
        })
    };
    let results: Vec<(Option<Eval>, Option<Eval>, f64)> = xs
        .par_iter()
        .zip(&ys)
        .map(|(x, y)| (eval(x), eval(y), x.distance_to(&y.x)))
        .collect();

    let mut violations = 0;
    let mut decay_violations = 0;
    let mut witness = None;
    let mut emp = EmpiricalConstants {
        c1: f64::INFINITY,
        c2: 0.0,
        c3: f64::INFINITY,
        c4: 0.0,
    };
    for (i, (ex, ey, dxy)) in results.iter().enumerate() {
        let (Some(ex), Some(ey)) = (ex, ey) else {
            violations += 1;
            witness.get_or_insert(Witness {
                t: None,
                x: xs[i].x.clone(),
                lhs: f64::INFINITY,
                rhs: 0.0,
            });
            continue;
        };
        decay_violations += (!ex.decay_ok) as usize;
        if ex.d0 == 0.0 {
            continue;
        }
        let q = ex.d0 * ex.d0;
        let pair = dxy * (ex.d0 + ey.d0);
        let dv_pair = (ex.v - ey.v).abs();
        emp.c1 = emp.c1.min(ex.v / q);
        emp.c2 = emp.c2.max(ex.v / q);
        emp.c3 = emp.c3.min(-ex.dv / q);
        if pair > 0.0 {
            emp.c4 = emp.c4.max(dv_pair / pair);
        }
        let tol = SLACK * (1.0 + q);
        let checks = [
            (c1 * q, ex.v),
            (ex.v, c2 * q),
            (ex.dv, -c3 * q),
            (dv_pair, c4 * pair),
        ];
        if let Some(&(lhs, rhs)) = checks.iter().find(|(l, r)| !(l <= &(r + tol))) {
            violations += 1;
            witness.get_or_insert(Witness {
                t: None,
                x: xs[i].x.clone(),
                lhs,
                rhs,
            });
        }
    }
    Ok(LyapunovCertificate {
        horizon,
        radius,
        k,
        lambda,
        lipschitz,
        c1,
        c2,
        c3,
        c4,
        empirical: emp,
        sample_count,
        violations,
        decay_violations,
        witness,
    })
}

/// Fitted exponential envelope `‖x_t - x⋆‖ ≤ M·cᵗ·‖x₀ - x⋆‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// Fitted rate `c`; infinite (JSON `null`) when the run diverged.
    pub rate: f64,
    /// Smallest `M` making the envelope hold at every recorded iterate.
    pub prefactor: f64,
    /// First and last iteration of the fitted window.
    pub window: (usize, usize),
    pub holds: bool,
}

/// Shortest trajectory accepted by the envelope fit, in steps.
pub const ENVELOPE_MIN_STEPS: usize = 50;

/// Fits the envelope to a distance sequence `d_t = ‖x_t - x⋆‖`.
///
/// The rate comes from a least-squares line through `ln d_t` over the tail
/// half. When the distance has underflowed there, the window widens to
/// everything after the first quarter, then to the whole run. The envelope
/// holds when `c < 1` and the fitted line at least halves the distance
/// across its window, so a flat or noisy tail does not pass.
pub fn fit_envelope(distances: &[f64], diverged: bool) -> Result<Envelope> {
    if distances.len() < ENVELOPE_MIN_STEPS + 1 {
        return Err(Error::InvalidArgument(format!(
            "envelope fit needs at least {ENVELOPE_MIN_STEPS} steps, got {}",
            distances.len().saturating_sub(1)
        )));
    }
    let len = distances.len();
    if diverged {
        return Ok(Envelope {
            rate: f64::INFINITY,
            prefactor: f64::INFINITY,
            window: (0, len - 1),
            holds: false,
        });
    }
    let usable = |from: usize| -> Vec<(f64, f64)> {
        distances[from..]
            .iter()
            .enumerate()
            .filter(|(_, d)| **d >= f64::MIN_POSITIVE)
            .map(|(i, d)| ((from + i) as f64, d.ln()))
            .collect()
    };
    let Some(points) = [len / 2, len / 4, 0].into_iter().map(usable).find(|p| p.len() >= 2) else {
        // Exactly at the fixed point, or collapsed onto it within one step.
        return Ok(Envelope {
            rate: 0.0,
            prefactor: 1.0,
            window: (0, len - 1),
            holds: true,
        });
    };
    let (ts, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let s = slope(&ts, &ys);
    let rate = s.exp();
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let d0 = distances[0];
    let prefactor = if d0 > 0.0 && rate > 0.0 {
        distances
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > 0.0)
            .map(|(t, d)| (d.ln() - t as f64 * s - d0.ln()).exp())
            .fold(0.0, f64::max)
    } else {
        1.0
    };
    Ok(Envelope {
        rate,
        prefactor,
        window: (t0 as usize, t1 as usize),
        holds: rate < 1.0 && s * (t1 - t0) <= -std::f64::consts::LN_2,
    })
}

/// [`fit_envelope`] on the full-state distances of `traj` to `(0, 0, w⋆)`.
pub fn convergence_envelope(traj: &Trajectory, w_star: &[f64]) -> Result<Envelope> {
    fit_envelope(&traj.state_distances(w_star), traj.diverged)
}
