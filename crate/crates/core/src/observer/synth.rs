use serde::{Deserialize, Serialize};

use super::entropy::{entropy_unchecked, AttentionFrame};
use super::{ObserverCalibration, ObserverError};
use crate::dynamics::NoiseStream;

/// Targets closer than this to zero produce exactly one-hot rows.
const ONE_HOT_BELOW: f64 = 1e-9;
const ENTROPY_TOL: f64 = 1e-10;
const MAX_BISECT: usize = 200;

/// Layout of a synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
}

impl Default for FrameShape {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            context_len: 64,
        }
    }
}

impl FrameShape {
    pub fn max_entropy(&self) -> f64 {
        (self.context_len as f64).ln()
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        if self.context_len < 2 || self.layers == 0 || self.heads == 0 {
            return Err(ObserverError::Infeasible(format!(
                "need context_len >= 2 and at least one layer and head, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// The entropy the generator aims for: the inverse of the drift proxy plus
/// observation noise, clamped to what the context can express.
pub fn entropy_target(lambda_true: f64, cal: &ObserverCalibration, eps: f64, shape: &FrameShape) -> f64 {
    let raw = (lambda_true - cal.beta) / cal.alpha + eps;
    if raw.is_nan() {
        return 0.0;
    }
    raw.clamp(0.0, shape.max_entropy())
}

/// Synthetic attention whose mean entropy encodes `lambda_true` through the
/// calibrated linear proxy.
///
/// Draws exactly one value from `noise` (the observation error, scaled by
/// `obs_noise`) whatever the outcome. Every row is the same temperature
/// softmax over the logit pattern `z_i = -i`, rotated by its row index, so all
/// rows share the target entropy.
pub fn synth_attention(
    lambda_true: f64,
    cal: &ObserverCalibration,
    obs_noise: f64,
    noise: &mut NoiseStream,
    shape: &FrameShape,
) -> Result<AttentionFrame, ObserverError> {
    shape.validate()?;
    if !(cal.alpha.is_finite() && cal.alpha != 0.0) || !lambda_true.is_finite() || !(obs_noise >= 0.0) {
        return Err(ObserverError::Infeasible(format!(
            "cannot invert proxy with alpha={}, lambda={lambda_true}, obs_noise={obs_noise}",
            cal.alpha
        )));
    }
    let eps = obs_noise * noise.next_standard();
    let target = entropy_target(lambda_true, cal, eps, shape);
    let base = row_with_entropy(target, shape.context_len);
    let n = shape.context_len;
    let rows = (0..shape.layers * shape.heads)
        .map(|r| {
            let k = r % n;
            let mut row = Vec::with_capacity(n);
            row.extend_from_slice(&base[n - k..]);
            row.extend_from_slice(&base[..n - k]);
            row
        })
        .collect();
    Ok(AttentionFrame::from_valid_rows(shape.layers, shape.heads, rows))
}

/// Softmax of `-beta * i` with `beta` bisected so the entropy hits `target`.
pub(crate) fn row_with_entropy(target: f64, n: usize) -> Vec<f64> {
    let h_max = (n as f64).ln();
    if target >= h_max - ENTROPY_TOL {
        return vec![1.0 / n as f64; n];
    }
    if target < ONE_HOT_BELOW {
        let mut row = vec![0.0; n];
        row[0] = 1.0;
        return row;
    }
    // entropy falls monotonically as beta grows
    let mut hi = 1.0;
    while entropy_unchecked(&softmax_ramp(hi, n)) > target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let mut row = softmax_ramp(hi, n);
    for _ in 0..MAX_BISECT {
        let mid = 0.5 * (lo + hi);
        row = softmax_ramp(mid, n);
        let h = entropy_unchecked(&row);
        if (h - target).abs() <= ENTROPY_TOL {
            break;
        }
        if h > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    row
}

fn softmax_ramp(beta: f64, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|i| (-beta * i as f64).exp()).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::{drift_proxy, mean_attention_entropy, validate_distribution};

    fn stream(seed: u64) -> NoiseStream {
        NoiseStream::new(1.0, seed)
    }

    #[test]
    fn zero_drift_sits_on_the_boundary() {
        let cal = ObserverCalibration::reference();
        let frame = synth_attention(0.0, &cal, 0.0, &mut stream(1), &FrameShape::default()).unwrap();
        let h = mean_attention_entropy(&frame).unwrap();
        assert!((h - 2.5 / 0.85).abs() < 1e-6);
        assert!((h - 2.9412).abs() < 1e-4);
    }

    #[test]
    fn intercept_gives_one_hot_rows() {
        let cal = ObserverCalibration::reference();
        let frame = synth_attention(-2.5, &cal, 0.0, &mut stream(1), &FrameShape::default()).unwrap();
        assert_eq!(mean_attention_entropy(&frame).unwrap(), 0.0);
        assert!(frame.rows().iter().all(|r| r.iter().filter(|&&p| p == 1.0).count() == 1));
    }

    #[test]
    fn round_trip_across_feasible_band() {
        let cal = ObserverCalibration::reference();
        let shape = FrameShape::default();
        for k in 0..=40 {
            let lambda = -2.4 + k as f64 * 0.08;
            let frame = synth_attention(lambda, &cal, 0.0, &mut stream(2), &shape).unwrap();
            let back = drift_proxy(mean_attention_entropy(&frame).unwrap(), &cal);
            assert!((back - lambda).abs() < 1e-5, "{lambda} -> {back}");
        }
    }

    #[test]
    fn clamps_to_context_capacity() {
        let cal = ObserverCalibration::reference();
        let shape = FrameShape {
            layers: 1,
            heads: 2,
            context_len: 8,
        };
        let frame = synth_attention(5.0, &cal, 0.0, &mut stream(3), &shape).unwrap();
        assert!((mean_attention_entropy(&frame).unwrap() - 8f64.ln()).abs() < 1e-12);
        let tiny = FrameShape { context_len: 1, ..shape };
        assert!(matches!(
            synth_attention(0.0, &cal, 0.0, &mut stream(3), &tiny),
            Err(ObserverError::Infeasible(_))
        ));
    }

    #[test]
    fn consumes_one_draw_and_perturbs_target() {
        let cal = ObserverCalibration::reference();
        let shape = FrameShape::default();
        let mut s = stream(9);
        let noisy = synth_attention(0.0, &cal, 0.3, &mut s, &shape).unwrap();
        assert_eq!(s.draws(), 1);
        let mut oracle = stream(9);
        let eps = 0.3 * oracle.next_standard();
        let h = mean_attention_entropy(&noisy).unwrap();
        assert!((h - (2.5 / 0.85 + eps)).abs() < 1e-6);
        synth_attention(0.0, &cal, 0.0, &mut s, &shape).unwrap();
        assert_eq!(s.draws(), 2);
    }

    #[test]
    fn rows_are_valid_distributions() {
        let cal = ObserverCalibration::reference();
        let shape = FrameShape {
            layers: 2,
            heads: 3,
            context_len: 16,
        };
        let mut s = stream(11);
        for k in 0..1000 {
            let lambda = -3.0 + (k as f64) * 0.005;
            let frame = synth_attention(lambda, &cal, 0.5, &mut s, &shape).unwrap();
            for row in frame.rows() {
                validate_distribution(row).unwrap();
            }
        }
    }
}
