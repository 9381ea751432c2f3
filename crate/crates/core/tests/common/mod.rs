//! Random draws shared by the integration tests.
#![allow(dead_code)]

use adastab::dynamics::{AdamVariant, Family, HyperParams, OptimizerSpec};
use adastab::objectives::{hessian_spectrum, Builtin, HessianSpectrum};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn objective(rng: &mut ChaCha8Rng) -> Builtin {
    match rng.gen_range(0..4) {
        0 => Builtin::Quad1d,
        1 => Builtin::Quartic,
        2 => Builtin::TwoDim,
        _ => Builtin::ScaledQuad(rng.gen_range(0.5..3.0)),
    }
}

pub fn spectrum_at_min(obj: &Builtin) -> HessianSpectrum {
    hessian_spectrum(obj, &obj.minimizer()).unwrap()
}

/// Hyperparameters spread over both sides of every family's bound.
pub fn hyper(rng: &mut ChaCha8Rng) -> HyperParams {
    HyperParams {
        alpha: log_uniform(rng, 1e-3, 1.0),
        epsilon: log_uniform(rng, 1e-3, 1.0),
        beta1: rng.gen_range(0.05..0.95),
        beta2: rng.gen_range(0.05..0.999),
        beta: rng.gen_range(0.05..0.95),
    }
}

pub fn spec(family: Family, hp: HyperParams) -> OptimizerSpec {
    OptimizerSpec::new(family, AdamVariant::Eps2Bias, hp).unwrap()
}

pub fn family(rng: &mut ChaCha8Rng) -> Family {
    Family::ALL[rng.gen_range(0..Family::ALL.len())]
}
