//! Gumbel-softmax sampling with an optional straight-through one-hot output.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{kernels, Tape, Var};

const U_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Emit `onehot(argmax)` in the forward pass, soft gradient backward.
    pub hard: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self { temperature: 1.0, hard: true }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config {
                field: "gumbel.temperature".into(),
                reason: alloc::format!("must be a finite positive number, got {}", self.temperature),
            });
        }
        Ok(())
    }
}

/// `n` draws of `−ln(−ln U)` with `U` clamped to `[1e-12, 1 − 1e-12]`.
pub fn sample_gumbel(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.uniform().clamp(U_CLAMP, 1.0 - U_CLAMP);
            -libm::log(-libm::log(u))
        })
        .collect()
}

/// Relaxed sample `softmax((z + g) / τ)` for a single logit vector.
pub fn soft_sample(z: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    let mut y: Vec<f64> = z.iter().zip(noise).map(|(a, g)| (a + g) / temperature).collect();
    kernels::softmax_in_place(&mut y);
    y
}

/// Plain (off-tape) Gumbel-softmax of one logit vector.
pub fn gumbel_softmax(z: &[f64], cfg: &GumbelConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    cfg.validate()?;
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits".into()));
    }
    let g = sample_gumbel(rng, z.len());
    let mut y = soft_sample(z, &g, cfg.temperature);
    if cfg.hard {
        let j = kernels::argmax(&y);
        y.iter_mut().enumerate().for_each(|(i, v)| *v = if i == j { 1.0 } else { 0.0 });
    }
    Ok(y)
}

/// Row-wise Gumbel-softmax of `logits` (`n x K`) on the tape, drawing fresh
/// noise from `rng`.
pub fn gumbel_softmax_on_tape(
    tape: &mut Tape,
    logits: Var,
    cfg: &GumbelConfig,
    rng: &mut RngStream,
) -> Result<Var> {
    let (n, k) = tape.dims(logits);
    let noise = sample_gumbel(rng, n * k);
    gumbel_softmax_with_noise(tape, logits, &noise, cfg)
}

/// As [`gumbel_softmax_on_tape`] with caller-provided noise (zeros give the
/// noise-free relaxation).
pub fn gumbel_softmax_with_noise(
    tape: &mut Tape,
    logits: Var,
    noise: &[f64],
    cfg: &GumbelConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, k) = tape.dims(logits);
    let g = tape.constant(n, k, noise.to_vec())?;
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / cfg.temperature);
    let soft = tape.softmax(scaled)?;
    Ok(if cfg.hard { tape.straight_through(soft) } else { soft })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_noise() {
        let a = sample_gumbel(&mut RngStream::new(9), 32);
        let b = sample_gumbel(&mut RngStream::new(9), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let z = [0.2, 1.0, -0.3, 0.9];
        let g = [0.1, -0.5, 0.0, 0.2];
        let y = soft_sample(&z, &g, 1e-4);
        // z + g = (0.3, 0.5, -0.3, 1.1)
        assert!(y[3] > 0.999);
    }

    #[test]
    fn high_temperature_is_uniform() {
        let y = soft_sample(&[3.0, -2.0, 0.5], &[0.4, 0.1, -1.0], 1e9);
        assert!(y.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-8));
    }

    #[test]
    fn hard_sample_is_one_hot() {
        let mut rng = RngStream::new(4);
        let cfg = GumbelConfig { temperature: 0.7, hard: true };
        for _ in 0..100 {
            let y = gumbel_softmax(&[0.1, 0.5, -1.0, 2.0, 0.0], &cfg, &mut rng).unwrap();
            assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), 4);
            assert_eq!(y.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        let cfg = GumbelConfig { temperature: 0.0, hard: false };
        assert!(gumbel_softmax(&[0.0, 1.0], &cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn soft_sample_on_simplex() {
        let mut rng = RngStream::new(5);
        for &t in &[0.05, 0.5, 1.0, 10.0] {
            let cfg = GumbelConfig { temperature: t, hard: false };
            let y = gumbel_softmax(&[1.0, -2.0, 0.3], &cfg, &mut rng).unwrap();
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(y.iter().all(|&p| p >= 0.0));
        }
    }
}
