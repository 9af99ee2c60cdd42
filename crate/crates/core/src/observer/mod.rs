//! Entropy observer.
//!
//! Mean attention entropy `H` is mapped to a drift estimate through the
//! affine proxy `lambda_hat = beta + alpha * H`. Entropies are in nats
//! throughout. A synthetic generator produces attention frames whose entropy
//! encodes a known drift, and [`calibrate`] recovers `(alpha, beta)` from
//! labelled samples by logistic regression.

mod calibrate;
mod entropy;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{
    calibrate, linear_planted_dataset, planted_dataset, read_samples, write_samples, CalibrationConfig, DriftLabel,
    DriftSample, FitDiagnostics, SlopeConvention,
};
pub use entropy::{mean_attention_entropy, shannon_entropy, validate_distribution, AttentionFrame};
pub use synth::{entropy_target, synth_attention, FrameShape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObserverError {
    #[error("invalid distribution: {reason}{}", .index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    InvalidDistribution { index: Option<usize>, reason: String },
    #[error("invalid attention frame: {0}")]
    InvalidFrame(String),
    #[error("infeasible entropy target: {0}")]
    Infeasible(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("calibration did not converge after {iterations} iterations (w={weight}, b={intercept}, log loss {log_loss})")]
    NotConverged {
        weight: f64,
        intercept: f64,
        log_loss: f64,
        iterations: usize,
    },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverCalibration {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub fit: Option<FitDiagnostics>,
}

impl ObserverCalibration {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, fit: None }
    }

    /// `alpha = 0.85`, `beta = -2.5`: zero drift at `H = 2.9412` nats.
    pub fn reference() -> Self {
        Self::new(0.85, -2.5)
    }

    /// Entropy at which the proxy reads zero drift.
    pub fn boundary_entropy(&self) -> f64 {
        -self.beta / self.alpha
    }
}

impl Default for ObserverCalibration {
    fn default() -> Self {
        Self::reference()
    }
}

pub fn drift_proxy(h_bar: f64, cal: &ObserverCalibration) -> f64 {
    cal.beta + cal.alpha * h_bar
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proxy_examples() {
        let cal = ObserverCalibration::reference();
        assert!(drift_proxy(2.9412, &cal).abs() < 1e-4);
        assert_eq!(drift_proxy(0.0, &cal), -2.5);
        assert!((drift_proxy(3.2, &cal) - 0.22).abs() < 1e-12);
        assert!((cal.boundary_entropy() - 2.941_176_470_588).abs() < 1e-12);
    }

    #[test]
    fn error_message_names_index() {
        let e = ObserverError::InvalidDistribution {
            index: Some(3),
            reason: "negative".into(),
        };
        assert_eq!(e.to_string(), "invalid distribution: negative at index 3");
    }
}
