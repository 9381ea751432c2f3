//! Fixed-point eigenvalues, spectral radii and hyperparameter bounds.
//!
//! Closed-form eigenvalues come straight from the per-family formulas and
//! never touch an eigensolver; [`numerical_jacobian`] plus a dense
//! nonsymmetric eigensolver provide the independent cross-check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Family, HyperParams, OptimizerSpec, State};
use crate::error::{Error, Result};
use crate::objectives::{self, HessianSpectrum, Objective};

/// ADAM fixed-point eigenvalues: `β₂` (n-fold) and the roots of
/// `λ² - (1+β₁-φᵢ)λ + β₁ = 0` with `φᵢ = (αμᵢ/ε)(1-β₁)`.
///
/// A negative discriminant yields a conjugate pair of modulus `√β₁`.
pub fn adam_closed_form_eigs(hp: &HyperParams, spectrum: &HessianSpectrum) -> Vec<Complex64> {
    let b1 = hp.beta1;
    let mut eigs: Vec<Complex64> = spectrum
        .eigenvalues
        .iter()
        .map(|_| Complex64::new(hp.beta2, 0.0))
        .collect();
    for &mu in &spectrum.eigenvalues {
        let phi = hp.alpha * mu / hp.epsilon * (1.0 - b1);
        let a = b1 + 1.0 - phi;
        let disc = a * a - 4.0 * b1;
        if disc >= 0.0 {
            let r = disc.sqrt();
            eigs.push(Complex64::new((a + r) / 2.0, 0.0));
            eigs.push(Complex64::new((a - r) / 2.0, 0.0));
        } else {
            let r = (-disc).sqrt();
            eigs.push(Complex64::new(a / 2.0, r / 2.0));
            eigs.push(Complex64::new(a / 2.0, -r / 2.0));
        }
    }
    eigs
}

/// Closed-form fixed-point eigenvalues for any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub eigenvalues: Vec<Complex64>,
    /// False for AdaGrad, whose n-fold eigenvalue 1 rules out a bound.
    pub applicable: bool,
}

pub fn closed_form_eigs(spec: &OptimizerSpec, spectrum: &HessianSpectrum) -> ClosedForm {
    let hp = &spec.hyper;
    let real = |v: f64| Complex64::new(v, 0.0);
    let mus = &spectrum.eigenvalues;
    let repeat = |value: f64, k: usize| std::iter::repeat_n(real(value), k * mus.len());
    let eigenvalues: Vec<Complex64> = match spec.family {
        Family::Adam => adam_closed_form_eigs(hp, spectrum),
        Family::Sgd => mus.iter().map(|mu| real(1.0 - hp.alpha * mu)).collect(),
        Family::RmsProp => repeat(hp.beta, 1)
            .chain(mus.iter().map(|mu| real(1.0 - hp.alpha / hp.epsilon * mu)))
            .collect(),
        Family::AdaGrad => repeat(1.0, 1)
            .chain(mus.iter().map(|mu| real(1.0 - hp.alpha / hp.epsilon * mu)))
            .collect(),
        Family::AdaDelta => repeat(hp.beta, 2)
            .chain(mus.iter().map(|mu| real(1.0 - hp.alpha * mu)))
            .collect(),
    };
    ClosedForm {
        eigenvalues,
        applicable: spec.family != Family::AdaGrad,
    }
}

/// Central-difference Jacobian of the autonomous map `T̄` at `x`.
///
/// For ADAM the differentiated map is the `ε²` update without bias
/// correction regardless of the variant.
pub fn numerical_jacobian(spec: &OptimizerSpec, obj: &dyn Objective, x: &State) -> Result<DMatrix<f64>> {
    let map = spec.linearization_map();
    let layout = map.layout(obj.dim());
    if x.x.len() != layout.len() || x.layout.family != spec.family {
        return Err(Error::DimensionMismatch {
            expected: layout.len(),
            got: x.x.len(),
        });
    }
    jacobian_of_map(&map, obj, &x.x, x.t)
}

/// Base step of the five-point stencil, relative to `max(1, |x|)`.
const FD_STEP: f64 = 1e-4;

/// Five-point central-difference Jacobian of `spec.autonomous()` at the raw
/// vector `x`.
///
/// Near the fixed point the update saturates on the scale `eps / |g'|`, so the
/// step shrinks with eps. The fourth-order stencil keeps truncation error
/// small at a step large enough to avoid cancellation. Moment columns use
/// eps^2 instead, keeping `v + eps^2` positive around `v = 0`.
pub(crate) fn jacobian_of_map(spec: &OptimizerSpec, obj: &dyn Objective, x: &[f64], t: u64) -> Result<DMatrix<f64>> {
    let map = spec.autonomous();
    let p = x.len();
    let shrink = match spec.family {
        Family::Sgd => 1.0,
        _ => spec.hyper.epsilon.min(1.0),
    };
    let w_cols = spec.layout(p / spec.layout(1).len()).w_range();
    let mut jac = DMatrix::identity(p, p);
    let mut probe = x.to_vec();
    let mut evals = [vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0.0; p]];
    for j in 0..p {
        let h = FD_STEP * x[j].abs().max(1.0) * if w_cols.contains(&j) { shrink } else { shrink * shrink };
        // a power of two keeps x ± h and x ± 2h exact on both sides of x
        let h = h.log2().round().exp2();
        for (k, offset) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
            probe[j] = x[j] + offset * h;
            dynamics::autonomous_displacement(&map, obj, &probe, &mut evals[k]);
        }
        probe[j] = x[j];
        for i in 0..p {
            let d = (evals[0][i] - 8.0 * evals[1][i] + 8.0 * evals[2][i] - evals[3][i]) / (12.0 * h);
            if !d.is_finite() {
                return Err(Error::Diverged { t, index: i, value: d });
            }
            jac[(i, j)] += d;
        }
    }
    Ok(jac)
}

/// Eigenvalues of a general square matrix (real Schur form).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(eigs: &[Complex64]) -> Result<f64> {
    if eigs.is_empty() {
        return Err(Error::EmptyEigenvalues);
    }
    Ok(eigs.iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Greedy nearest-neighbour pairing of two eigenvalue multisets. Returns the
/// largest paired distance, or infinity when the sizes differ.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0_f64;
    for x in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, y)| (k, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .expect("equal lengths");
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSource {
    /// Per-family bound from the fixed-point eigenvalues.
    Ours,
    /// `β₁² < √β₂`
    Kingma,
    /// `β₁ < √β₂`
    Reddi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Satisfied,
    Violated,
    NotApplicable,
}

/// A strict inequality `lhs < rhs` evaluated for one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundVerdict {
    pub family: Family,
    pub source: BoundSource,
    pub verdict: Verdict,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    /// `rhs - lhs`
    pub margin: Option<f64>,
    /// `rhs - lhs_i` for each Hessian eigenvalue (ours only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_mode_margins: Vec<f64>,
    /// Set when the Hessian spectrum is not positive definite (saddle or
    /// maximum); the verdict is still computed but carries no guarantee.
    #[serde(default)]
    pub non_positive_definite: bool,
}

impl BoundVerdict {
    fn strict(family: Family, source: BoundSource, lhs: f64, rhs: f64) -> Self {
        BoundVerdict {
            family,
            source,
            verdict: if lhs < rhs { Verdict::Satisfied } else { Verdict::Violated },
            lhs: Some(lhs),
            rhs: Some(rhs),
            margin: Some(rhs - lhs),
            per_mode_margins: Vec::new(),
            non_positive_definite: false,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.verdict == Verdict::Satisfied
    }

    pub fn applicable(&self) -> bool {
        self.verdict != Verdict::NotApplicable
    }
}

/// The per-family bound on `max μᵢ`:
///
/// | family   | inequality                    |
/// |----------|-------------------------------|
/// | SGD      | `max μ < 2/α`                 |
/// | RMSProp  | `max μ < 2ε/α`                |
/// | AdaDelta | `max μ < 2/α`                 |
/// | ADAM     | `(α/ε)·max μ·(1-β₁) < 2β₁+2`  |
/// | AdaGrad  | not applicable                |
pub fn bound_check(spec: &OptimizerSpec, spectrum: &HessianSpectrum) -> BoundVerdict {
    let hp = &spec.hyper;
    let mu_max = spectrum.max();
    let (lhs_of, rhs): (Box<dyn Fn(f64) -> f64>, f64) = match spec.family {
        Family::Sgd | Family::AdaDelta => (Box::new(|mu| mu), 2.0 / hp.alpha),
        Family::RmsProp => (Box::new(|mu| mu), 2.0 * hp.epsilon / hp.alpha),
        Family::Adam => (
            Box::new(|mu| hp.alpha / hp.epsilon * mu * (1.0 - hp.beta1)),
            2.0 * hp.beta1 + 2.0,
        ),
        Family::AdaGrad => {
            return BoundVerdict {
                family: spec.family,
                source: BoundSource::Ours,
                verdict: Verdict::NotApplicable,
                lhs: None,
                rhs: None,
                margin: None,
                per_mode_margins: Vec::new(),
                non_positive_definite: !spectrum.positive_definite,
            }
        }
    };
    let mut verdict = BoundVerdict::strict(spec.family, BoundSource::Ours, lhs_of(mu_max), rhs);
    verdict.per_mode_margins = spectrum.eigenvalues.iter().map(|&mu| rhs - lhs_of(mu)).collect();
    verdict.non_positive_definite = !spectrum.positive_definite;
    verdict
}

/// Kingma (`β₁² < √β₂`) and Reddi (`β₁ < √β₂`) verdicts.
pub fn classical_bounds(hp: &HyperParams) -> (BoundVerdict, BoundVerdict) {
    let rhs = hp.beta2.sqrt();
    (
        BoundVerdict::strict(Family::Adam, BoundSource::Kingma, hp.beta1 * hp.beta1, rhs),
        BoundVerdict::strict(Family::Adam, BoundSource::Reddi, hp.beta1, rhs),
    )
}

/// The ADAM bound solved for `ε`: `ε⋆ = α·μ_max·(1-β₁)/(2β₁+2)`. Any
/// `ε > ε⋆` satisfies it.
pub fn epsilon_boundary(hp: &HyperParams, mu_max: f64) -> f64 {
    hp.alpha * mu_max * (1.0 - hp.beta1) / (2.0 * hp.beta1 + 2.0)
}

/// Everything `analyze` reports about one fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spec: OptimizerSpec,
    pub objective: String,
    pub w_star: Vec<f64>,
    pub hessian_eigenvalues: Vec<f64>,
    /// Closed-form eigenvalues as `[re, im]` pairs.
    pub eigenvalues: Vec<Complex64>,
    /// Eigenvalues of the finite-difference Jacobian, for comparison.
    pub numerical_eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    pub ours: BoundVerdict,
    pub kingma: Option<BoundVerdict>,
    pub reddi: Option<BoundVerdict>,
    pub epsilon_boundary: Option<f64>,
}

pub fn analyze(spec: &OptimizerSpec, obj: &dyn Objective, w_star: &[f64]) -> Result<StabilityReport> {
    let fp = dynamics::fixed_point(spec, obj, w_star)?;
    let spectrum = objectives::hessian_spectrum(obj, w_star)?;
    let closed = closed_form_eigs(spec, &spectrum);
    let numerical = eigenvalues(&numerical_jacobian(spec, obj, &fp)?);
    let rho = spectral_radius(&closed.eigenvalues)?;
    let (kingma, reddi, eps_star) = if spec.family == Family::Adam {
        let (k, r) = classical_bounds(&spec.hyper);
        (Some(k), Some(r), Some(epsilon_boundary(&spec.hyper, spectrum.max())))
    } else {
        (None, None, None)
    };
    Ok(StabilityReport {
        spec: *spec,
        objective: obj.id(),
        w_star: w_star.to_vec(),
        hessian_eigenvalues: spectrum.eigenvalues.clone(),
        eigenvalues: closed.eigenvalues,
        numerical_eigenvalues: numerical,
        spectral_radius: rho,
        ours: bound_check(spec, &spectrum),
        kingma,
        reddi,
        epsilon_boundary: eps_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{fixed_point, AdamVariant};
    use crate::objectives::Builtin;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec(family: Family, hp: HyperParams) -> OptimizerSpec {
        OptimizerSpec::new(family, AdamVariant::Eps2Bias, hp).unwrap()
    }

    /// Roots of `λ² - (1-φ+β₁)λ + β₁` via the quadratic formula in complex
    /// arithmetic.
    fn quadratic_oracle(phi: f64, b1: f64) -> [Complex64; 2] {
        let p = 1.0 - phi + b1;
        let disc = Complex64::new(p * p - 4.0 * b1, 0.0).sqrt();
        [(c(p, 0.0) + disc) / 2.0, (c(p, 0.0) - disc) / 2.0]
    }

    #[test]
    fn adam_example_eigenvalues() {
        let hp = HyperParams::adam(0.01, 0.01, 0.9, 0.99);
        let eigs = adam_closed_form_eigs(&hp, &HessianSpectrum::new(vec![1.0]));
        let oracle = quadratic_oracle(0.1, 0.9);
        let expected = [c(0.99, 0.0), oracle[0], oracle[1]];
        assert!(multiset_distance(&eigs, &expected) < 1e-12);
        assert!(multiset_distance(&eigs, &[c(0.99, 0.0), c(0.9, 0.3), c(0.9, -0.3)]) < 1e-12);
        assert!((eigs[1].norm() - 0.9_f64.sqrt()).abs() < 1e-12);
        assert!((spectral_radius(&eigs).unwrap() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_learning_rate_and_boundary() {
        let mut hp = HyperParams::adam(0.0, 0.01, 0.7, 0.5);
        let eigs = adam_closed_form_eigs(&hp, &HessianSpectrum::new(vec![3.0]));
        assert!(multiset_distance(&eigs, &[c(0.5, 0.0), c(1.0, 0.0), c(0.7, 0.0)]) < 1e-12);

        // φ = 2β₁ + 2 puts an eigenvalue at -1: pick α so that φ = 3.4 for μ = 1
        hp.alpha = 3.4 * hp.epsilon / (1.0 - hp.beta1);
        let eigs = adam_closed_form_eigs(&hp, &HessianSpectrum::new(vec![1.0]));
        let min_re = eigs.iter().map(|l| l.re).fold(f64::INFINITY, f64::min);
        assert!((min_re + 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_family_closed_forms() {
        let rms = closed_form_eigs(&spec(Family::RmsProp, HyperParams::single(0.01, 0.01, 0.1)), &HessianSpectrum::new(vec![2.0]));
        assert_eq!(rms.eigenvalues, vec![c(0.1, 0.0), c(-1.0, 0.0)]);

        let ada = closed_form_eigs(&spec(Family::AdaDelta, HyperParams::single(1.0, 1e-6, 0.95)), &HessianSpectrum::new(vec![1.9]));
        assert!(multiset_distance(&ada.eigenvalues, &[c(0.95, 0.0), c(0.95, 0.0), c(-0.9, 0.0)]) < 1e-15);
        assert!((spectral_radius(&ada.eigenvalues).unwrap() - 0.95).abs() < 1e-15);

        let grad = closed_form_eigs(&spec(Family::AdaGrad, HyperParams::single(0.01, 0.01, 1.0)), &HessianSpectrum::new(vec![1.0]));
        assert!(!grad.applicable);
        assert!(grad.eigenvalues.contains(&c(1.0, 0.0)));
    }

    #[test]
    fn spectral_radius_examples() {
        let eigs = [c(0.99, 0.0), c(0.9, 0.3), c(0.9, -0.3)];
        assert_eq!(spectral_radius(&eigs).unwrap(), 0.99);
        assert_eq!(spectral_radius(&[c(1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(spectral_radius(&[]), Err(Error::EmptyEigenvalues));
    }

    #[test]
    fn bound_examples() {
        let adam = spec(Family::Adam, HyperParams::adam(0.01, 0.01, 0.9, 0.99));
        let v = bound_check(&adam, &HessianSpectrum::new(vec![1.0]));
        assert!(v.satisfied());
        assert!((v.lhs.unwrap() - 0.1).abs() < 1e-15);
        assert!((v.rhs.unwrap() - 3.8).abs() < 1e-15);

        let ada = spec(Family::AdaDelta, HyperParams::single(1.0, 1e-6, 0.9));
        assert!(!bound_check(&ada, &HessianSpectrum::new(vec![2.1])).satisfied());
        assert!(bound_check(&ada, &HessianSpectrum::new(vec![1.9])).satisfied());

        let rms = spec(Family::RmsProp, HyperParams::single(0.01, 0.01, 0.9));
        let v = bound_check(&rms, &HessianSpectrum::new(vec![2.0]));
        assert_eq!(v.verdict, Verdict::Violated);
        assert_eq!(v.margin, Some(0.0));

        let grad = spec(Family::AdaGrad, HyperParams::single(0.01, 0.01, 1.0));
        assert_eq!(bound_check(&grad, &HessianSpectrum::new(vec![1.0])).verdict, Verdict::NotApplicable);
    }

    #[test]
    fn saddle_spectrum_is_flagged() {
        let sgd = spec(Family::Sgd, HyperParams::single(0.1, 0.01, 1.0));
        let v = bound_check(&sgd, &HessianSpectrum::new(vec![-1.0, 2.0]));
        assert!(v.non_positive_definite);
        assert_eq!(v.per_mode_margins.len(), 2);
    }

    #[test]
    fn classical_bound_examples() {
        let (k, r) = classical_bounds(&HyperParams::adam(0.01, 0.01, 0.9, 0.99));
        assert!(k.satisfied() && r.satisfied());
        assert!((k.lhs.unwrap() - 0.81).abs() < 1e-15);
        assert!((k.rhs.unwrap() - 0.994987437).abs() < 1e-9);

        let (_, r) = classical_bounds(&HyperParams::adam(0.01, 0.01, 0.99, 0.5));
        assert!(!r.satisfied());
        let (k, _) = classical_bounds(&HyperParams::adam(0.01, 0.01, 0.9, 0.1));
        assert!(!k.satisfied());
    }

    #[test]
    fn epsilon_boundary_examples() {
        let hp = HyperParams::adam(0.01, 1.0, 0.9, 0.99);
        assert!((epsilon_boundary(&hp, 1.0) - 2.631578947368421e-4).abs() < 1e-15);
        assert_eq!(epsilon_boundary(&HyperParams { alpha: 0.0, ..hp }, 1.0), 0.0);
        let hp = HyperParams::adam(0.001, 1.0, 0.9, 0.99);
        assert!((epsilon_boundary(&hp, 2.0) - 5.263157894736842e-5).abs() < 1e-17);
    }

    #[test]
    fn numerical_jacobian_at_fixed_points() {
        let hp = HyperParams::adam(0.01, 0.01, 0.9, 0.99);
        let adam = spec(Family::Adam, hp);
        let fp = fixed_point(&adam, &Builtin::Quad1d, &[0.0]).unwrap();
        let j = numerical_jacobian(&adam, &Builtin::Quad1d, &fp).unwrap();
        let closed = adam_closed_form_eigs(&hp, &HessianSpectrum::new(vec![1.0]));
        assert!(multiset_distance(&eigenvalues(&j), &closed) < 1e-8);

        // RMSProp: blockdiag(βI, I - (α/ε)H)
        let rms = spec(Family::RmsProp, HyperParams::single(0.001, 0.01, 0.3));
        let fp = fixed_point(&rms, &Builtin::TwoDim, &[-2.0, -1.0]).unwrap();
        let j = numerical_jacobian(&rms, &Builtin::TwoDim, &fp).unwrap();
        let h = Builtin::TwoDim.hessian(&[-2.0, -1.0]);
        let mut expected = DMatrix::zeros(4, 4);
        expected.view_mut((0, 0), (2, 2)).fill_with_identity();
        expected.view_mut((0, 0), (2, 2)).scale_mut(0.3);
        let lower = DMatrix::identity(2, 2) - h * (0.001 / 0.01);
        expected.view_mut((2, 2), (2, 2)).copy_from(&lower);
        assert!((j - expected).amax() < 1e-8);

        // AdaDelta: diag(βI, βI, I - αH)
        let ada = spec(Family::AdaDelta, HyperParams::single(0.5, 1e-3, 0.8));
        let fp = fixed_point(&ada, &Builtin::Quartic, &[-0.75]).unwrap();
        let j = numerical_jacobian(&ada, &Builtin::Quartic, &fp).unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.8, 0.8, 1.0 - 0.5 * 2.25]));
        assert!((j - expected).amax() < 1e-8);
    }

    #[test]
    fn analyze_report_serializes_pairs() {
        let adam = spec(Family::Adam, HyperParams::adam(0.01, 0.01, 0.9, 0.99));
        let report = analyze(&adam, &Builtin::Quad1d, &[0.0]).unwrap();
        assert!((report.spectral_radius - 0.99).abs() < 1e-12);
        assert!(report.ours.satisfied());
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["eigenvalues"][0].as_array().unwrap().len(), 2);
        assert!(json["epsilon_boundary"].as_f64().unwrap() > 0.0);
    }
}
