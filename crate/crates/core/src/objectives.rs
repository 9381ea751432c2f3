//! Test objectives with analytic derivatives.
//!
//! Every objective exposes its value, gradient and Hessian. The built-ins
//! carry their analytic minimum so that fixed points can be constructed
//! without a search. Central finite differences serve as the independent
//! derivative oracle ([`fd_check`]).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A twice continuously differentiable scalar field `f: R^n -> R`.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifier used in CSV output and on the command line.
    fn id(&self) -> String;

    fn value(&self, w: &[f64]) -> f64;

    /// Writes `∇f(w)` into `out`. Both slices have length [`Objective::dim`].
    fn gradient_into(&self, w: &[f64], out: &mut [f64]);

    fn hessian(&self, w: &[f64]) -> DMatrix<f64>;

    /// Analytic minimizer, when known.
    fn minimum(&self) -> Option<Vec<f64>> {
        None
    }
}

/// The objectives used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Builtin {
    /// `w²/2 + 10`
    Quad1d,
    /// `w⁴ + w³`, minimum at `-3/4`
    Quartic,
    /// `(w₁+2)²(w₂+1)² + (w₁+2)² + 0.1(w₂+1)²`, minimum at `(-2, -1)`
    TwoDim,
    /// `c·w²/2`
    ScaledQuad(f64),
}

impl Builtin {
    pub fn minimizer(&self) -> Vec<f64> {
        match self {
            Builtin::Quad1d | Builtin::ScaledQuad(_) => vec![0.0],
            Builtin::Quartic => vec![-0.75],
            Builtin::TwoDim => vec![-2.0, -1.0],
        }
    }
}

impl Objective for Builtin {
    fn dim(&self) -> usize {
        match self {
            Builtin::TwoDim => 2,
            _ => 1,
        }
    }

    fn id(&self) -> String {
        self.to_string()
    }

    fn value(&self, w: &[f64]) -> f64 {
        match *self {
            Builtin::Quad1d => 0.5 * w[0] * w[0] + 10.0,
            Builtin::Quartic => w[0].powi(4) + w[0].powi(3),
            Builtin::TwoDim => {
                let a = w[0] + 2.0;
                let b = w[1] + 1.0;
                a * a * b * b + a * a + 0.1 * b * b
            }
            Builtin::ScaledQuad(c) => 0.5 * c * w[0] * w[0],
        }
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        match *self {
            Builtin::Quad1d => out[0] = w[0],
            Builtin::Quartic => {
                let x = w[0];
                out[0] = 4.0 * x * x * x + 3.0 * x * x;
            }
            Builtin::TwoDim => {
                let a = w[0] + 2.0;
                let b = w[1] + 1.0;
                out[0] = 2.0 * a * b * b + 2.0 * a;
                out[1] = 2.0 * a * a * b + 0.2 * b;
            }
            Builtin::ScaledQuad(c) => out[0] = c * w[0],
        }
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        match *self {
            Builtin::Quad1d => DMatrix::from_element(1, 1, 1.0),
            Builtin::Quartic => {
                let x = w[0];
                DMatrix::from_element(1, 1, 12.0 * x * x + 6.0 * x)
            }
            Builtin::TwoDim => {
                let a = w[0] + 2.0;
                let b = w[1] + 1.0;
                let cross = 4.0 * a * b;
                DMatrix::from_row_slice(2, 2, &[2.0 * b * b + 2.0, cross, cross, 2.0 * a * a + 0.2])
            }
            Builtin::ScaledQuad(c) => DMatrix::from_element(1, 1, c),
        }
    }

    fn minimum(&self) -> Option<Vec<f64>> {
        Some(self.minimizer())
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Builtin::Quad1d => f.write_str("quad1d"),
            Builtin::Quartic => f.write_str("quartic"),
            Builtin::TwoDim => f.write_str("twodim"),
            Builtin::ScaledQuad(c) => write!(f, "scaled_quad:{c}"),
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quad1d" => Ok(Builtin::Quad1d),
            "quartic" => Ok(Builtin::Quartic),
            "twodim" => Ok(Builtin::TwoDim),
            _ => {
                let c = s
                    .strip_prefix("scaled_quad:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|c| c.is_finite())
                    .ok_or_else(|| Error::UnknownObjective(s.to_owned()))?;
                Ok(Builtin::ScaledQuad(c))
            }
        }
    }
}

impl TryFrom<String> for Builtin {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Builtin> for String {
    fn from(b: Builtin) -> String {
        b.to_string()
    }
}

/// Eigenvalues of a symmetric Hessian, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSpectrum {
    pub eigenvalues: Vec<f64>,
    pub positive_definite: bool,
}

impl HessianSpectrum {
    pub fn new(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        let positive_definite = eigenvalues.first().is_some_and(|&m| m > 0.0);
        HessianSpectrum {
            eigenvalues,
            positive_definite,
        }
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }
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

pub fn grad(obj: &dyn Objective, w: &[f64]) -> Result<Vec<f64>> {
    check_dim(obj, w)?;
    let mut g = vec![0.0; w.len()];
    obj.gradient_into(w, &mut g);
    Ok(g)
}

/// Sorted eigenvalues of `∇²f(w)` from a symmetric eigensolver.
pub fn hessian_spectrum(obj: &dyn Objective, w: &[f64]) -> Result<HessianSpectrum> {
    check_dim(obj, w)?;
    let h = obj.hessian(w);
    Ok(HessianSpectrum::new(symmetric_eigenvalues(h)))
}

pub(crate) fn symmetric_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)]];
    }
    m.symmetric_eigen().eigenvalues.iter().copied().collect()
}

/// Default central-difference step for coordinate value `x`.
pub fn default_fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Worst mixed relative errors `|a - b| / max(1, |a|)` between analytic and
/// central-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err_grad: f64,
    pub max_rel_err_hess: f64,
}

impl FdReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err_grad < tol && self.max_rel_err_hess < tol
    }
}

fn mixed_rel_err(analytic: f64, approx: f64) -> f64 {
    (analytic - approx).abs() / analytic.abs().max(1.0)
}

/// Compares the analytic gradient and Hessian against central differences of
/// the value and the gradient respectively. `step = None` uses
/// [`default_fd_step`] per coordinate.
pub fn fd_check(obj: &dyn Objective, w: &[f64], step: Option<f64>) -> Result<FdReport> {
    check_dim(obj, w)?;
    if let Some(h) = step {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
        }
    }
    let n = w.len();
    let g = grad(obj, w)?;
    let hess = obj.hessian(w);

    let mut probe = w.to_vec();
    let mut g_plus = vec![0.0; n];
    let mut g_minus = vec![0.0; n];
    let mut report = FdReport {
        max_rel_err_grad: 0.0,
        max_rel_err_hess: 0.0,
    };
    for i in 0..n {
        let h = step.unwrap_or_else(|| default_fd_step(w[i]));
        probe[i] = w[i] + h;
        let up = probe[i];
        let f_plus = obj.value(&probe);
        obj.gradient_into(&probe, &mut g_plus);
        probe[i] = w[i] - h;
        let down = probe[i];
        let f_minus = obj.value(&probe);
        obj.gradient_into(&probe, &mut g_minus);
        probe[i] = w[i];

        let width = up - down;
        let dg = (f_plus - f_minus) / width;
        report.max_rel_err_grad = report.max_rel_err_grad.max(mixed_rel_err(g[i], dg));
        for r in 0..n {
            let dh = (g_plus[r] - g_minus[r]) / width;
            report.max_rel_err_hess = report.max_rel_err_hess.max(mixed_rel_err(hess[(r, i)], dh));
        }
    }
    Ok(report)
}
