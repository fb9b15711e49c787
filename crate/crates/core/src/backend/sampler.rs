//! Deterministic sampling primitives: forward noising, classifier-free
//! guidance and the η = 0 reverse update.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Cumulative signal rates `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_t = 1 − t/(T+1)`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("step count must be positive".into()));
        }
        let denom = (steps + 1) as f64;
        let alpha_bar = (0..=steps).map(|t| 1.0 - t as f64 / denom).collect();
        Ok(Self { alpha_bar })
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.first() != Some(&1.0) {
            return Err(Error::Config("schedule must start at ᾱ_0 = 1".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config("ᾱ must be positive and strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Contract(format!("step {t} outside schedule 0..={}", self.steps())))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn zip_map(a: &Matrix, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    a.check_same_shape(b, op)?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(f64::from(x), f64::from(y)) as f32)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(z0: &Matrix, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    let ab = schedule.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map(z0, eps, "forward_noise", |z, e| s * z + n * e)
}

/// `w·ε_c + (1−w)·ε_∅`.
pub fn cfg_combine(eps_c: &Matrix, eps_null: &Matrix, w: f32) -> Result<Matrix> {
    let w = f64::from(w);
    zip_map(eps_c, eps_null, "cfg_combine", |c, u| w * c + (1.0 - w) * u)
}

/// Deterministic update from `t` to `t − 1`: predict `ẑ_0` from the noise
/// estimate, then re-noise it to level `t − 1` with the same estimate.
pub fn reverse_step(z_t: &Matrix, noise_pred: &Matrix, t: usize, schedule: &NoiseSchedule) -> Result<Matrix> {
    if t == 0 {
        return Err(Error::Contract("reverse_step needs t ≥ 1".into()));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    zip_map(z_t, noise_pred, "reverse_step", |z, e| {
        let z0 = (z - n_t * e) / s_t;
        s_p * z0 + n_p * e
    })
}
