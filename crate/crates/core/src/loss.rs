//! Angular regression loss with an origin-repelling regularizer.
//!
//! For a raw prediction `(x', y')` with `r² = x'² + y'²` and truth point
//! `(x, y)` on the unit circle:
//!
//! ```text
//! ℓ = α (r² + 1/max(r², ε)) + (x − x')² + (y − y')²
//! ```
//!
//! The first term is minimized on the unit circle and grows without bound at
//! the origin, which is where plain MSE settles when the targets look uniform.
//! `α = 0` is plain MSE.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::modring::{encode_angle, CirclePoint, Modulus};

/// `α` used for modular addition.
pub const ALPHA_MODADD: f64 = 1e-4;
/// `α` used for the LWE experiments.
pub const ALPHA_LWE: f64 = 1e-2;
/// Default `ε` inside `1/max(r², ε)`.
pub const DEFAULT_ORIGIN_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    #[serde(default = "default_guard")]
    pub origin_guard: f64,
}

fn default_guard() -> f64 {
    DEFAULT_ORIGIN_GUARD
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: ALPHA_MODADD,
            origin_guard: DEFAULT_ORIGIN_GUARD,
        }
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        Self {
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return domain(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.origin_guard > 0.0) || !self.origin_guard.is_finite() {
            return domain(format!(
                "origin guard must be finite and > 0, got {}",
                self.origin_guard
            ));
        }
        Ok(())
    }
}

/// Loss against a truth point given directly.
#[inline]
pub fn loss_at(pred: CirclePoint, truth: CirclePoint, cfg: &LossConfig) -> f64 {
    let r2 = pred.norm_sq();
    cfg.alpha * (r2 + 1.0 / r2.max(cfg.origin_guard))
        + (truth.x - pred.x).powi(2)
        + (truth.y - pred.y).powi(2)
}

/// Gradient of [`loss_at`] with respect to `(x', y')`.
#[inline]
pub fn grad_at(pred: CirclePoint, truth: CirclePoint, cfg: &LossConfig) -> (f64, f64) {
    let r2 = pred.norm_sq();
    // d/dx' of r² + 1/r² is 2x' − 2x'/r⁴; the guarded branch is constant.
    let reg_scale = if r2 >= cfg.origin_guard {
        2.0 * cfg.alpha * (1.0 - 1.0 / (r2 * r2))
    } else {
        2.0 * cfg.alpha
    };
    (
        reg_scale * pred.x - 2.0 * (truth.x - pred.x),
        reg_scale * pred.y - 2.0 * (truth.y - pred.y),
    )
}

pub fn loss_value(pred: CirclePoint, truth: u64, q: Modulus, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_at(pred, encode_angle(truth, q)?, cfg))
}

pub fn loss_grad(pred: CirclePoint, truth: u64, q: Modulus, cfg: &LossConfig) -> Result<(f64, f64)> {
    Ok(grad_at(pred, encode_angle(truth, q)?, cfg))
}

/// Mean loss over a batch, with per-sample gradients of that mean.
pub fn batch_loss(
    preds: &[CirclePoint],
    truths: &[u64],
    q: Modulus,
    cfg: &LossConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if preds.is_empty() || preds.len() != truths.len() {
        return domain(format!(
            "batch loss needs equal non-empty inputs ({} vs {})",
            preds.len(),
            truths.len()
        ));
    }
    let scale = 1.0 / preds.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(truths) {
        let truth = encode_angle(t, q)?;
        total += loss_at(p, truth, cfg);
        let (gx, gy) = grad_at(p, truth, cfg);
        grads.push((gx * scale, gy * scale));
    }
    Ok((total * scale, grads))
}

/// `|((cos φ − cos φ')² + (sin φ − sin φ')²) − (2 − 2 cos(φ − φ'))|`.
pub fn mse_identity_check(phi: f64, phi_prime: f64) -> f64 {
    let chord = (phi.cos() - phi_prime.cos()).powi(2) + (phi.sin() - phi_prime.sin()).powi(2);
    (chord - (2.0 - 2.0 * (phi - phi_prime).cos())).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn q(v: u64) -> Modulus {
        Modulus::new(v).unwrap()
    }

    #[test]
    fn value_examples() {
        let m = q(257);
        let cfg = LossConfig::default();
        let truth = encode_angle(17, m).unwrap();
        let v = loss_value(truth, 17, m, &cfg).unwrap();
        assert!((v - 2e-4).abs() < 1e-15);

        let v = loss_value(CirclePoint::new(0.0, 1.0), 0, m, &LossConfig::mse()).unwrap();
        assert!((v - 2.0).abs() < 1e-15);

        let guard = LossConfig { alpha: 1e-4, origin_guard: 1e-8 };
        let v = loss_value(CirclePoint::new(0.0, 0.0), 0, m, &guard).unwrap();
        // 1e-4 * 1e8 regularizer + MSE of 1
        assert!((v - (1e4 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_truth() {
        let m = q(257);
        for alpha in [0.0, 1e-4, 1e-2] {
            let cfg = LossConfig::with_alpha(alpha);
            for t in [0, 1, 100, 256] {
                let p = encode_angle(t, m).unwrap();
                let (gx, gy) = loss_grad(p, t, m, &cfg).unwrap();
                assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularizer_unique_minimum_at_unit_radius() {
        let alpha = 1e-2;
        let reg = |r: f64| alpha * (r * r + 1.0 / (r * r));
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..=40_000 {
            let r = i as f64 * 1e-4;
            let v = reg(r);
            if v < best.0 {
                best = (v, r);
            }
        }
        assert!((best.1 - 1.0).abs() < 1e-4);
        assert!((best.0 - 2.0 * alpha).abs() < 1e-12);
    }

    #[test]
    fn minimum_value_is_two_alpha_only_at_truth() {
        let m = q(101);
        let cfg = LossConfig::with_alpha(1e-3);
        let truth = encode_angle(5, m).unwrap();
        assert!((loss_value(truth, 5, m, &cfg).unwrap() - 2e-3).abs() < 1e-15);
        for (dx, dy) in [(1e-3, 0.0), (0.0, -1e-3), (0.1, 0.1)] {
            let p = CirclePoint::new(truth.x + dx, truth.y + dy);
            assert!(loss_value(p, 5, m, &cfg).unwrap() > 2e-3);
        }
    }

    #[test]
    fn wrap_truths_are_close() {
        let m = q(3329);
        let cfg = LossConfig::default();
        for phi in [-0.01, -0.001, 0.0, 0.001, 0.01] {
            let p = CirclePoint::from_angle(phi);
            let a = loss_value(p, 0, m, &cfg).unwrap();
            let b = loss_value(p, 3328, m, &cfg).unwrap();
            // chord between neighbouring residues is 2 sin(π/q) ~ 2π/q
            assert!((a - b).abs() < 4.0 * TAU / 3329.0);
        }
    }

    #[test]
    fn mse_identity_examples() {
        assert_eq!(mse_identity_check(1.3, 1.3), 0.0);
        assert!(mse_identity_check(0.0, PI) < 1e-15);
    }

    #[test]
    fn loss_non_negative() {
        let m = q(257);
        let cfg = LossConfig::with_alpha(1e-2);
        for i in 0..1000 {
            let p = CirclePoint::new((i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.11).cos() * 3.0);
            assert!(loss_value(p, i % 257, m, &cfg).unwrap() >= 0.0);
        }
    }

    #[test]
    fn batch_reduction_is_mean() {
        let m = q(257);
        let cfg = LossConfig::default();
        let p = [CirclePoint::new(0.3, 0.4), CirclePoint::new(-1.0, 0.2)];
        let t = [3u64, 200];
        let (mean, grads) = batch_loss(&p, &t, m, &cfg).unwrap();
        let direct = (loss_value(p[0], 3, m, &cfg).unwrap() + loss_value(p[1], 200, m, &cfg).unwrap()) / 2.0;
        assert!((mean - direct).abs() < 1e-15);
        let g0 = loss_grad(p[0], 3, m, &cfg).unwrap();
        assert!((grads[0].0 - g0.0 / 2.0).abs() < 1e-15);
        assert!(batch_loss(&p, &t[..1], m, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::with_alpha(-1.0).validate().is_err());
        assert!(LossConfig { alpha: 0.0, origin_guard: 0.0 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
