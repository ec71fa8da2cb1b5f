//! Residues mod q as points on the unit circle.
//!
//! A residue `t` maps to the angle `2πt/q`, so `0` and `q - 1` sit next to each
//! other. Decoding goes the other way: project a raw `(x, y)` onto the circle,
//! read its angle, and round to the nearest residue. The two evaluation
//! metrics (angular MSE and τ-accuracy) are defined here as well.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Points closer than this to the origin have no usable angle.
pub const ORIGIN_TOLERANCE: f64 = 1e-12;

/// The modulus `q`, at least 2. Primality is not required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Modulus(u64);

impl Modulus {
    pub fn new(q: u64) -> Result<Self> {
        if q < 2 {
            return domain(format!("modulus must be at least 2, got {q}"));
        }
        Ok(Self(q))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    pub fn check(self, t: u64) -> Result<u64> {
        if t < self.0 {
            Ok(t)
        } else {
            domain(format!("residue {t} out of range for q = {}", self.0))
        }
    }

    #[inline]
    pub fn add(self, a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % self.0 as u128) as u64
    }

    #[inline]
    pub fn mul(self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.0 as u128) as u64
    }

    pub fn pow(self, base: u64, mut exp: u32) -> u64 {
        let mut acc = 1 % self.0;
        let mut b = base % self.0;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            exp >>= 1;
        }
        acc
    }
}

impl TryFrom<u64> for Modulus {
    type Error = Error;
    fn try_from(q: u64) -> Result<Self> {
        Self::new(q)
    }
}

impl From<Modulus> for u64 {
    fn from(q: Modulus) -> u64 {
        q.0
    }
}

impl fmt::Display for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A point in the plane. Decoded points lie on the unit circle; raw model
/// outputs carry no norm constraint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CirclePoint {
    pub x: f64,
    pub y: f64,
}

impl CirclePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(phi: f64) -> Self {
        let (y, x) = phi.sin_cos();
        Self { x, y }
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_degenerate(self) -> bool {
        !(self.norm() > ORIGIN_TOLERANCE)
    }

    /// Angle in `[0, 2π)`.
    pub fn angle(self) -> f64 {
        let phi = self.y.atan2(self.x);
        if phi < 0.0 {
            // atan2 can return -0.0 or tiny negatives that round up to TAU.
            let wrapped = phi + TAU;
            if wrapped >= TAU {
                0.0
            } else {
                wrapped
            }
        } else {
            phi
        }
    }

    /// Radial projection onto the unit circle.
    pub fn project(self) -> Result<Self> {
        if self.is_degenerate() {
            return Err(Error::DegeneratePoint { x: self.x, y: self.y });
        }
        let r = self.norm();
        Ok(Self::new(self.x / r, self.y / r))
    }
}

/// `t ↦ (cos 2πt/q, sin 2πt/q)`.
pub fn encode_angle(t: u64, q: Modulus) -> Result<CirclePoint> {
    q.check(t)?;
    Ok(CirclePoint::from_angle(residue_angle(t, q)))
}

#[inline]
pub(crate) fn residue_angle(t: u64, q: Modulus) -> f64 {
    TAU * (t as f64) / (q.get() as f64)
}

/// Nearest residue to the angle of `p`. Ties round up in angle.
pub fn decode_angle(p: CirclePoint, q: Modulus) -> Result<u64> {
    if p.is_degenerate() {
        return Err(Error::DegeneratePoint { x: p.x, y: p.y });
    }
    let q_f = q.get() as f64;
    let scaled = (q_f * p.angle() / TAU + 0.5).floor();
    Ok((scaled as u64) % q.get())
}

/// `min(|s - s'|, q - |s - s'|)`.
pub fn circ_dist(s: u64, s_prime: u64, q: Modulus) -> Result<u64> {
    q.check(s)?;
    q.check(s_prime)?;
    let d = s.abs_diff(s_prime);
    Ok(d.min(q.get() - d))
}

/// Whether a prediction lands within `tau * q` of the truth, circularly.
#[inline]
pub fn within_tau(pred: u64, truth: u64, q: Modulus, tau: f64) -> bool {
    let d = pred.abs_diff(truth);
    let d = d.min(q.get() - d);
    d as f64 <= tau * q.get() as f64
}

/// Fraction of predictions whose circular distance to the truth is at most `tau * q`.
pub fn tau_accuracy(predictions: &[u64], truths: &[u64], q: Modulus, tau: f64) -> Result<f64> {
    check_pair_lengths(predictions.len(), truths.len())?;
    if !(tau > 0.0 && tau < 0.5) {
        return domain(format!("tau must lie in (0, 0.5), got {tau}"));
    }
    let mut hits = 0usize;
    for (&p, &t) in predictions.iter().zip(truths) {
        q.check(p)?;
        q.check(t)?;
        if within_tau(p, t, q, tau) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean of `(cos φ - cos φ')² + (sin φ - sin φ')²` over the batch.
///
/// `predicted` must already be projected onto the unit circle.
pub fn angle_mse(predicted: &[CirclePoint], truths: &[u64], q: Modulus) -> Result<f64> {
    check_pair_lengths(predicted.len(), truths.len())?;
    let mut total = 0.0;
    for (p, &t) in predicted.iter().zip(truths) {
        let truth = encode_angle(t, q)?;
        total += (truth.x - p.x).powi(2) + (truth.y - p.y).powi(2);
    }
    Ok(total / predicted.len() as f64)
}

fn check_pair_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return domain("empty input");
    }
    if a != b {
        return domain(format!("length mismatch: {a} predictions vs {b} truths"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn q(v: u64) -> Modulus {
        Modulus::new(v).unwrap()
    }

    #[test]
    fn modulus_rejects_small() {
        assert!(Modulus::new(0).is_err());
        assert!(Modulus::new(1).is_err());
        assert!(Modulus::new(2).is_ok());
    }

    #[test]
    fn encode_examples() {
        let p = encode_angle(0, q(257)).unwrap();
        assert_eq!((p.x, p.y), (1.0, 0.0));
        let p = encode_angle(1, q(4)).unwrap();
        assert!(p.x.abs() < 1e-15 && (p.y - 1.0).abs() < 1e-15);
        let p = encode_angle(128, q(256)).unwrap();
        assert!((p.x + 1.0).abs() < 1e-15 && p.y.abs() < 1e-15);
        assert!(encode_angle(257, q(257)).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_angle(CirclePoint::new(2.0, 0.0), q(257)).unwrap(), 0);
        assert_eq!(decode_angle(CirclePoint::new(0.70, 0.72), q(4)).unwrap(), 1);
        assert!(matches!(
            decode_angle(CirclePoint::new(1e-13, 0.0), q(7)),
            Err(Error::DegeneratePoint { .. })
        ));
    }

    #[test]
    fn decode_matches_exhaustive_nearest_residue() {
        // Nearest residue by brute force over all candidates.
        let modulus = q(4);
        let p = CirclePoint::new(0.70, 0.72);
        let phi = p.y.atan2(p.x);
        let best = (0..4u64)
            .min_by(|&a, &b| {
                let da = (phi - TAU * a as f64 / 4.0).sin_cos();
                let db = (phi - TAU * b as f64 / 4.0).sin_cos();
                // larger cosine = closer angle
                db.1.partial_cmp(&da.1).unwrap()
            })
            .unwrap();
        assert_eq!(decode_angle(p, modulus).unwrap(), best);
    }

    #[test]
    fn round_trip_exhaustive() {
        for qv in [2u64, 3, 7, 257, 3329, 9973, 10000] {
            let m = q(qv);
            for t in 0..qv {
                let p = encode_angle(t, m).unwrap();
                assert!((p.norm() - 1.0).abs() < 1e-9);
                assert_eq!(decode_angle(p, m).unwrap(), t, "q={qv} t={t}");
            }
        }
    }

    #[test]
    fn round_trip_all_moduli_up_to_200() {
        for qv in 2..=200u64 {
            let m = q(qv);
            for t in 0..qv {
                assert_eq!(decode_angle(encode_angle(t, m).unwrap(), m).unwrap(), t);
            }
        }
    }

    #[test]
    fn angle_near_two_pi_wraps_to_zero() {
        let p = CirclePoint::new(1.0, -1e-300);
        assert!(p.angle() < TAU);
        assert_eq!(decode_angle(p, q(257)).unwrap(), 0);
    }

    #[test]
    fn circ_dist_examples() {
        assert_eq!(circ_dist(0, 1, q(257)).unwrap(), 1);
        assert_eq!(circ_dist(0, 256, q(257)).unwrap(), 1);
        assert_eq!(circ_dist(100, 200, q(257)).unwrap(), 100);
        assert!(circ_dist(0, 257, q(257)).is_err());
    }

    #[test]
    fn circ_dist_is_a_metric() {
        for qv in 2..=101u64 {
            let m = q(qv);
            for a in 0..qv {
                assert_eq!(circ_dist(a, a, m).unwrap(), 0);
                for b in 0..qv {
                    let ab = circ_dist(a, b, m).unwrap();
                    assert_eq!(ab, circ_dist(b, a, m).unwrap());
                    if a != b {
                        assert!(ab > 0);
                    }
                }
            }
            for a in 0..qv {
                for b in 0..qv {
                    let ab = circ_dist(a, b, m).unwrap();
                    for c in 0..qv {
                        assert!(circ_dist(a, c, m).unwrap() <= ab + circ_dist(b, c, m).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn tau_accuracy_examples() {
        let m = q(257);
        let xs = [3u64, 100, 256];
        assert_eq!(tau_accuracy(&xs, &xs, m, 0.005).unwrap(), 1.0);
        assert_eq!(tau_accuracy(&[1], &[0], m, 0.005).unwrap(), 1.0);
        assert_eq!(tau_accuracy(&[2], &[0], m, 0.005).unwrap(), 0.0);
        assert_eq!(tau_accuracy(&[256], &[0], m, 0.005).unwrap(), 1.0);
        assert!(tau_accuracy(&[], &[], m, 0.005).is_err());
        assert!(tau_accuracy(&[1], &[0], m, 0.5).is_err());
    }

    #[test]
    fn angle_mse_examples() {
        let m = q(257);
        let truths = [0u64, 17, 200];
        let exact: Vec<_> = truths.iter().map(|&t| encode_angle(t, m).unwrap()).collect();
        assert_eq!(angle_mse(&exact, &truths, m).unwrap(), 0.0);
        let antipodal: Vec<_> = exact.iter().map(|p| CirclePoint::new(-p.x, -p.y)).collect();
        assert!((angle_mse(&antipodal, &truths, m).unwrap() - 4.0).abs() < 1e-12);
        assert!(angle_mse(&[], &[], m).is_err());
    }

    #[test]
    fn angle_mse_matches_chord_identity_per_sample() {
        let m = q(3329);
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..1000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = (state >> 33) % 3329;
            let phi_p = (state >> 11) as f64 / (1u64 << 53) as f64 * TAU;
            let pred = CirclePoint::from_angle(phi_p);
            let phi = TAU * t as f64 / 3329.0;
            let expected = 2.0 - 2.0 * (phi - phi_p).cos();
            let got = angle_mse(&[pred], &[t], m).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn angle_mse_rotation_invariant(
            phi_p in 0.0..TAU, t in 0u64..1000, shift in 0u64..1000
        ) {
            let m = q(1000);
            let pred = CirclePoint::from_angle(phi_p);
            let base = angle_mse(&[pred], &[t], m).unwrap();
            let delta = TAU * shift as f64 / 1000.0;
            let rotated = CirclePoint::from_angle(phi_p + delta);
            let moved = angle_mse(&[rotated], &[(t + shift) % 1000], m).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn tau_accuracy_monotone_in_tau(
            preds in proptest::collection::vec(0u64..257, 1..40),
            seed in 0u64..1000,
            tau_a in 0.001f64..0.49,
            tau_b in 0.001f64..0.49,
        ) {
            let m = q(257);
            let truths: Vec<u64> = preds.iter().enumerate()
                .map(|(i, _)| (seed * 31 + i as u64 * 17) % 257)
                .collect();
            let (lo, hi) = if tau_a <= tau_b { (tau_a, tau_b) } else { (tau_b, tau_a) };
            let acc_lo = tau_accuracy(&preds, &truths, m, lo).unwrap();
            let acc_hi = tau_accuracy(&preds, &truths, m, hi).unwrap();
            prop_assert!(acc_lo <= acc_hi);
        }

        #[test]
        fn decode_of_scaled_point_ignores_radius(t in 0u64..3329, r in 1e-6f64..1e6) {
            let m = q(3329);
            let p = encode_angle(t, m).unwrap();
            let scaled = CirclePoint::new(p.x * r, p.y * r);
            prop_assert_eq!(decode_angle(scaled, m).unwrap(), t);
        }
    }

    #[test]
    fn half_turn_on_q2() {
        assert_eq!(decode_angle(CirclePoint::new(-3.0, 0.0), q(2)).unwrap(), 1);
        assert!((CirclePoint::new(-1.0, 0.0).angle() - PI).abs() < 1e-15);
    }
}
