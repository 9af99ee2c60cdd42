use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ObserverCalibration, ObserverError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftLabel {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub entropy: f64,
    pub label: DriftLabel,
}

/// How the fitted logistic slope becomes a drift slope.
///
/// The fit pins the boundary `-b/w` exactly but leaves the scale open. Both
/// conventions keep `beta + alpha * boundary = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlopeConvention {
    /// `alpha = w / k`, `beta = b / k`: each unit of drift is worth `k`
    /// logits of instability. Recovers the planted slope exactly when labels
    /// come from `sigmoid(k * (beta + alpha H))`.
    LogOdds { logits_per_drift: f64 },
    /// `alpha` fixed to a reference value; only the boundary is fitted.
    ReferenceAlpha { alpha: f64 },
}

impl Default for SlopeConvention {
    fn default() -> Self {
        SlopeConvention::LogOdds { logits_per_drift: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub max_iters: usize,
    /// Convergence threshold on the largest parameter update.
    pub tol: f64,
    /// Ridge penalty on the slope (the intercept is not penalized).
    pub l2: f64,
    pub convention: SlopeConvention,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-10,
            l2: 1e-3,
            convention: SlopeConvention::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_samples: usize,
    /// Mean negative log-likelihood (penalty excluded).
    pub log_loss: f64,
    pub boundary_entropy: f64,
    pub weight: f64,
    pub intercept: f64,
    pub iterations: usize,
}

/// Logistic regression of `P(unstable | H) = sigmoid(w H + b)` by damped
/// Newton iterations (IRLS), mapped to `(alpha, beta)` by the configured
/// [`SlopeConvention`].
pub fn calibrate(samples: &[DriftSample], cfg: &CalibrationConfig) -> Result<ObserverCalibration, ObserverError> {
    if let Some(i) = samples.iter().position(|s| !(s.entropy.is_finite() && s.entropy >= 0.0)) {
        return Err(ObserverError::Calibration(format!("sample {i} has invalid entropy {}", samples[i].entropy)));
    }
    let n_unstable = samples.iter().filter(|s| s.label == DriftLabel::Unstable).count();
    if n_unstable == 0 || n_unstable == samples.len() {
        return Err(ObserverError::Calibration(format!(
            "need both labels, got {n_unstable} unstable of {}",
            samples.len()
        )));
    }
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.entropy), hi.max(s.entropy)));
    if hi - lo <= 0.0 {
        return Err(ObserverError::Calibration("all samples share one entropy value".into()));
    }
    if !(cfg.l2 >= 0.0 && cfg.tol > 0.0 && cfg.max_iters > 0) {
        return Err(ObserverError::Calibration(format!("invalid configuration {cfg:?}")));
    }

    let xs: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| (s.entropy, if s.label == DriftLabel::Unstable { 1.0 } else { 0.0 }))
        .collect();
    let n = xs.len() as f64;
    let objective = |w: f64, b: f64| log_loss(&xs, w, b) + 0.5 * cfg.l2 * w * w / n;

    let (mut w, mut b) = (0.0, 0.0);
    let mut obj = objective(w, b);
    for iter in 1..=cfg.max_iters {
        // gradient and Hessian of n * objective
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (cfg.l2 * w, 0.0, cfg.l2, 0.0, 0.0);
        for &(x, y) in &xs {
            let p = sigmoid(w * x + b);
            let r = p * (1.0 - p);
            gw += (p - y) * x;
            gb += p - y;
            hww += r * x * x;
            hwb += r * x;
            hbb += r;
        }
        let det = hww * hbb - hwb * hwb;
        if !(det.is_finite() && det > 0.0) {
            return Err(ObserverError::NotConverged {
                weight: w,
                intercept: b,
                log_loss: log_loss(&xs, w, b),
                iterations: iter,
            });
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        // halve the Newton step until the objective stops increasing
        let mut t = 1.0;
        let (mut nw, mut nb) = (w - dw, b - db);
        let mut next = objective(nw, nb);
        while next > obj && t > 1e-10 {
            t *= 0.5;
            nw = w - t * dw;
            nb = b - t * db;
            next = objective(nw, nb);
        }
        let step = (t * dw).abs().max((t * db).abs());
        w = nw;
        b = nb;
        obj = next;
        if step <= cfg.tol * (1.0 + w.abs().max(b.abs())) {
            return finish(w, b, &xs, iter, cfg);
        }
    }
    Err(ObserverError::NotConverged {
        weight: w,
        intercept: b,
        log_loss: log_loss(&xs, w, b),
        iterations: cfg.max_iters,
    })
}

fn finish(
    w: f64,
    b: f64,
    xs: &[(f64, f64)],
    iterations: usize,
    cfg: &CalibrationConfig,
) -> Result<ObserverCalibration, ObserverError> {
    if !(w.is_finite() && b.is_finite()) || w.abs() < 1e-12 {
        return Err(ObserverError::Calibration(format!("fit has no usable slope (w={w}, b={b})")));
    }
    let boundary = -b / w;
    let (alpha, beta) = match cfg.convention {
        SlopeConvention::LogOdds { logits_per_drift: k } => {
            if !(k.is_finite() && k > 0.0) {
                return Err(ObserverError::Calibration(format!("logits_per_drift must be positive, got {k}")));
            }
            (w / k, b / k)
        }
        SlopeConvention::ReferenceAlpha { alpha } => {
            if !(alpha.is_finite() && alpha != 0.0) {
                return Err(ObserverError::Calibration(format!("reference alpha must be non-zero, got {alpha}")));
            }
            (alpha, -alpha * boundary)
        }
    };
    Ok(ObserverCalibration {
        alpha,
        beta,
        fit: Some(FitDiagnostics {
            n_samples: xs.len(),
            log_loss: log_loss(xs, w, b),
            boundary_entropy: boundary,
            weight: w,
            intercept: b,
            iterations,
        }),
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_loss(xs: &[(f64, f64)], w: f64, b: f64) -> f64 {
    // -[y ln p + (1-y) ln(1-p)] = softplus(z) - y z
    let total: f64 = xs
        .iter()
        .map(|&(x, y)| {
            let z = w * x + b;
            softplus(z) - y * z
        })
        .sum();
    (total / xs.len() as f64).max(0.0)
}

/// Labels `unstable` iff `H >= boundary`, each flipped with probability
/// `label_noise`; entropies uniform on `[boundary - 1.5, boundary + 1.5]`
/// clipped at zero.
pub fn planted_dataset(n: usize, boundary: f64, label_noise: f64, seed: u64) -> Vec<DriftSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let h = (boundary + 3.0 * uniform(&mut rng) - 1.5).max(0.0);
            let mut unstable = h >= boundary;
            if uniform(&mut rng) < label_noise {
                unstable = !unstable;
            }
            DriftSample {
                entropy: h,
                label: if unstable { DriftLabel::Unstable } else { DriftLabel::Stable },
            }
        })
        .collect()
}

/// Labels drawn from `sigmoid(k * (beta + alpha H))` with `H` uniform on
/// `h_range`.
pub fn linear_planted_dataset(
    n: usize,
    cal: &ObserverCalibration,
    logits_per_drift: f64,
    h_range: (f64, f64),
    seed: u64,
) -> Vec<DriftSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let h = h_range.0 + (h_range.1 - h_range.0) * uniform(&mut rng);
            let p = sigmoid(logits_per_drift * (cal.beta + cal.alpha * h));
            DriftSample {
                entropy: h,
                label: if uniform(&mut rng) < p { DriftLabel::Unstable } else { DriftLabel::Stable },
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rand::RngExt::random::<f64>(rng)
}

/// CSV columns `entropy,label`.
pub fn write_samples<W: Write>(samples: &[DriftSample], writer: W) -> Result<(), ObserverError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s).map_err(|e| ObserverError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| ObserverError::Io(e.to_string()))
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<DriftSample>, ObserverError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let s: DriftSample = row.map_err(|e| ObserverError::Io(format!("row {}: {e}", i + 1)))?;
        if !(s.entropy.is_finite() && s.entropy >= 0.0) {
            return Err(ObserverError::Io(format!("row {}: entropy must be >= 0", i + 1)));
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::drift_proxy;

    #[test]
    fn recovers_planted_boundary() {
        let data = planted_dataset(2000, 2.5 / 0.85, 0.05, 42);
        let cal = calibrate(&data, &CalibrationConfig::default()).unwrap();
        let fit = cal.fit.unwrap();
        assert!((fit.boundary_entropy - 2.9412).abs() < 0.1, "{}", fit.boundary_entropy);
        assert!(cal.alpha > 0.0);
        assert!(drift_proxy(fit.boundary_entropy, &cal).abs() < 1e-9);
    }

    #[test]
    fn recovers_linear_slope_under_log_odds() {
        let truth = ObserverCalibration::reference();
        let data = linear_planted_dataset(20_000, &truth, 4.0, (1.0, 5.0), 8);
        let cfg = CalibrationConfig {
            l2: 0.0,
            convention: SlopeConvention::LogOdds { logits_per_drift: 4.0 },
            ..CalibrationConfig::default()
        };
        let cal = calibrate(&data, &cfg).unwrap();
        assert!((cal.alpha - 0.85).abs() < 0.06, "{}", cal.alpha);
        assert!((cal.beta + 2.5).abs() < 0.2, "{}", cal.beta);
    }

    #[test]
    fn reference_alpha_keeps_boundary() {
        let data = planted_dataset(1000, 2.0, 0.1, 1);
        let cfg = CalibrationConfig {
            convention: SlopeConvention::ReferenceAlpha { alpha: 0.85 },
            ..CalibrationConfig::default()
        };
        let cal = calibrate(&data, &cfg).unwrap();
        assert_eq!(cal.alpha, 0.85);
        let boundary = cal.fit.unwrap().boundary_entropy;
        assert!(drift_proxy(boundary, &cal).abs() < 1e-9);
        assert!((cal.boundary_entropy() - boundary).abs() < 1e-12);
    }

    #[test]
    fn separable_clusters_with_ridge() {
        let mut data = vec![
            DriftSample {
                entropy: 1.0,
                label: DriftLabel::Stable
            };
            50
        ];
        data.extend(vec![
            DriftSample {
                entropy: 3.0,
                label: DriftLabel::Unstable
            };
            50
        ]);
        let cfg = CalibrationConfig {
            l2: 0.01,
            ..CalibrationConfig::default()
        };
        let cal = calibrate(&data, &cfg).unwrap();
        let fit = cal.fit.unwrap();
        assert!(fit.boundary_entropy > 1.0 && fit.boundary_entropy < 3.0);
        assert!(fit.weight.is_finite() && fit.log_loss >= 0.0);
        let unpenalized = CalibrationConfig {
            l2: 0.0,
            ..CalibrationConfig::default()
        };
        assert!(matches!(calibrate(&data, &unpenalized), Err(ObserverError::NotConverged { .. })));
    }

    #[test]
    fn single_class_is_rejected() {
        let data = vec![
            DriftSample {
                entropy: 1.0,
                label: DriftLabel::Stable
            };
            10
        ];
        assert!(matches!(calibrate(&data, &CalibrationConfig::default()), Err(ObserverError::Calibration(_))));
    }

    #[test]
    fn samples_csv_round_trip() {
        let data = planted_dataset(20, 2.0, 0.0, 4);
        let mut buf = Vec::new();
        write_samples(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("entropy,label\n"));
        assert!(text.contains(",stable") || text.contains(",unstable"));
        assert_eq!(read_samples(buf.as_slice()).unwrap(), data);
        assert!(read_samples("entropy,label\n-1.0,stable\n".as_bytes()).is_err());
    }

    #[test]
    fn log_loss_is_stable_for_large_logits() {
        let xs = [(100.0, 1.0), (0.0, 0.0)];
        let l = log_loss(&xs, 50.0, -10.0);
        assert!(l.is_finite() && l >= 0.0);
    }
}
