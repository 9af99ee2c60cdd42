//! Second-moment error propagation.
//!
//! The analytic side pushes the error covariance through the linearized
//! dynamics, `Sigma' = A Sigma A^T + sigma^2 I`, and evaluates the closed-form
//! trace growth
//!
//! ```text
//! Tr(Sigma_n) = rho^{2n} Tr(Sigma_0) + sigma^2 * sum_{k<n} rho^{2k}
//! ```
//!
//! The empirical side estimates the same traces from independent seeded
//! open-loop runs. Each side is the oracle for the other.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{derive_seed, simulate_open_loop, DynamicsError, NoiseModel, StateVector, TransitionMap};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-10;
/// `|rho - 1|` below which the geometric sum is evaluated as `n`.
const UNIT_RHO_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ErrorPropError {
    #[error("dimension mismatch: covariance is {cov}x{cov}, transition is {rows}x{cols}")]
    DimensionMismatch { cov: usize, rows: usize, cols: usize },
    #[error("covariance is not symmetric (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("covariance is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{count} of {total} samples diverged; first: {first}")]
    Diverged {
        count: usize,
        total: usize,
        first: DynamicsError,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io error: {0}")]
    Io(String),
}

/// Error covariance `Sigma_t` after `step` propagations.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    sigma: DMatrix<f64>,
    step: usize,
}

impl CovarianceState {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, ErrorPropError> {
        if sigma.nrows() == 0 || sigma.nrows() != sigma.ncols() {
            return Err(ErrorPropError::InvalidArgument("covariance must be square and non-empty".into()));
        }
        let asym = (&sigma - sigma.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(ErrorPropError::NotSymmetric(asym));
        }
        let state = Self { sigma, step: 0 };
        let min = state.min_eigenvalue();
        if min < PSD_TOL {
            return Err(ErrorPropError::NotPsd(min));
        }
        Ok(state)
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            sigma: DMatrix::zeros(d, d),
            step: 0,
        }
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone()).eigenvalues.min()
    }

    /// Largest eigenvalue, which for a PSD matrix is `||Sigma||_2`.
    pub fn spectral_norm(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone()).eigenvalues.max()
    }
}

/// `A Sigma A^T + sigma2 I`, re-symmetrized.
pub fn propagate_covariance(
    cov: &CovarianceState,
    a: &DMatrix<f64>,
    sigma2: f64,
) -> Result<CovarianceState, ErrorPropError> {
    let d = cov.dim();
    if a.nrows() != d || a.ncols() != d {
        return Err(ErrorPropError::DimensionMismatch {
            cov: d,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let mut next = a * &cov.sigma * a.transpose();
    for i in 0..d {
        next[(i, i)] += sigma2;
    }
    let sym = (&next + next.transpose()) * 0.5;
    Ok(CovarianceState {
        sigma: sym,
        step: cov.step + 1,
    })
}

/// Traces of `Sigma_0 .. Sigma_n` under a constant transition matrix.
pub fn analytic_traces(
    a: &DMatrix<f64>,
    sigma2: f64,
    cov0: &CovarianceState,
    n_steps: usize,
) -> Result<Vec<f64>, ErrorPropError> {
    let mut cov = cov0.clone();
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(cov.trace());
    for _ in 0..n_steps {
        cov = propagate_covariance(&cov, a, sigma2)?;
        out.push(cov.trace());
    }
    Ok(out)
}

/// Parameters of the closed-form growth bound.
///
/// `rho` should be the spectral norm of the transition matrix for the bound
/// to be guaranteed; the spectral radius only describes asymptotic growth and
/// misses transient amplification by non-normal matrices. `sigma2` is the
/// noise injected per step into the measured quantity, i.e. `d * sigma^2`
/// when tracking the trace of a `d`-dimensional isotropic system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBoundParams {
    pub rho: f64,
    pub sigma2: f64,
    pub trace0: f64,
    pub psi: f64,
}

impl GrowthBoundParams {
    pub fn new(rho: f64, sigma2: f64, trace0: f64, psi: f64) -> Result<Self, ErrorPropError> {
        let ok = rho.is_finite() && rho > 0.0 && sigma2 >= 0.0 && trace0 >= 0.0 && psi > 0.0;
        if !ok || !(sigma2.is_finite() && trace0.is_finite()) {
            return Err(ErrorPropError::InvalidArgument(format!(
                "need rho > 0, sigma2 >= 0, trace0 >= 0, psi > 0; got rho={rho} sigma2={sigma2} trace0={trace0} psi={psi}"
            )));
        }
        Ok(Self {
            rho,
            sigma2,
            trace0,
            psi,
        })
    }
}

/// `rho^{2n} Tr(Sigma_0) + sigma2 * sum_{k=0}^{n-1} rho^{2k}`.
pub fn trace_bound(n: usize, p: &GrowthBoundParams) -> f64 {
    let r2 = p.rho * p.rho;
    let growth = r2.powi(n as i32);
    let series = if (p.rho - 1.0).abs() < UNIT_RHO_GUARD {
        n as f64
    } else {
        (growth - 1.0) / (r2 - 1.0)
    };
    growth * p.trace0 + p.sigma2 * series
}

/// `trace_bound(0..=n_steps)` as a series.
pub fn trace_bound_series(n_steps: usize, p: &GrowthBoundParams) -> Vec<f64> {
    (0..=n_steps).map(|n| trace_bound(n, p)).collect()
}

/// First index whose trace reaches `psi`, if any.
pub fn crossing_step(traces: &[f64], psi: f64) -> Option<usize> {
    traces.iter().position(|&t| t >= psi)
}

/// Monte Carlo trace estimate at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Standard error of the trace estimate.
    pub stderr: f64,
}

/// Per-step trace of the unbiased sample covariance of `delta_t` over
/// `n_samples` independent runs (steps `0..=n_steps`).
///
/// Sample `i` uses noise seed `derive_seed(noise.seed(), i)`, so the result
/// does not depend on how the samples are scheduled across threads.
pub fn empirical_trace(
    map: &TransitionMap,
    noise: &NoiseModel,
    s0: &StateVector,
    n_steps: usize,
    n_samples: usize,
) -> Result<Vec<f64>, ErrorPropError> {
    Ok(empirical_trace_stats(map, noise, s0, n_steps, n_samples)?
        .into_iter()
        .map(|e| e.trace)
        .collect())
}

/// [`empirical_trace`] with standard errors.
pub fn empirical_trace_stats(
    map: &TransitionMap,
    noise: &NoiseModel,
    s0: &StateVector,
    n_steps: usize,
    n_samples: usize,
) -> Result<Vec<TraceEstimate>, ErrorPropError> {
    if n_samples < 2 {
        return Err(ErrorPropError::InvalidArgument("n_samples must be >= 2".into()));
    }
    let d = s0.dim();
    let runs: Vec<Result<Vec<f64>, DynamicsError>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let seeded = noise.with_seed(derive_seed(noise.seed(), i as u64));
            let traj = simulate_open_loop(map, s0, &seeded, n_steps)?;
            let mut flat = Vec::with_capacity((n_steps + 1) * d);
            for t in 0..=n_steps {
                flat.extend(traj.deviation(t).iter());
            }
            Ok(flat)
        })
        .collect();

    let total = runs.len();
    let mut deviations = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for r in runs {
        match r {
            Ok(v) => deviations.push(v),
            Err(e) => failures.push(e),
        }
    }
    if let Some(first) = failures.first() {
        return Err(ErrorPropError::Diverged {
            count: failures.len(),
            total,
            first: first.clone(),
        });
    }

    let n = deviations.len() as f64;
    let mut out = Vec::with_capacity(n_steps + 1);
    for t in 0..=n_steps {
        let base = t * d;
        let mut mean = vec![0.0; d];
        for dev in &deviations {
            for (m, x) in mean.iter_mut().zip(&dev[base..base + d]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        // squared distances to the mean; their average is the (biased) trace
        let sq: Vec<f64> = deviations
            .iter()
            .map(|dev| dev[base..base + d].iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum())
            .collect();
        let sum_sq: f64 = sq.iter().sum();
        let trace = sum_sq / (n - 1.0);
        let mean_sq = sum_sq / n;
        let var_sq = sq.iter().map(|q| (q - mean_sq).powi(2)).sum::<f64>() / (n - 1.0);
        out.push(TraceEstimate {
            trace,
            stderr: (var_sq / n).sqrt(),
        });
    }
    Ok(out)
}

/// One row of the exported trace series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub analytic_trace: f64,
    pub empirical_trace: f64,
    pub stderr: f64,
}

pub fn trace_rows(analytic: &[f64], empirical: &[TraceEstimate]) -> Vec<TraceRow> {
    analytic
        .iter()
        .zip(empirical)
        .enumerate()
        .map(|(step, (a, e))| TraceRow {
            step,
            analytic_trace: *a,
            empirical_trace: e.trace,
            stderr: e.stderr,
        })
        .collect()
}

/// CSV columns `step,analytic_trace,empirical_trace,stderr`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<(), ErrorPropError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| ErrorPropError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| ErrorPropError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearResidual;

    fn scalar_matrix(a: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, a)
    }

    /// Direct summation of the geometric series, independent of both routes.
    fn geometric_oracle(rho: f64, sigma2: f64, n: usize) -> f64 {
        (0..n).map(|k| sigma2 * rho.powi(2 * k as i32)).sum()
    }

    #[test]
    fn identity_propagation() {
        let next = propagate_covariance(&CovarianceState::zeros(3), &DMatrix::identity(3, 3), 1.0).unwrap();
        assert_eq!(next.trace(), 3.0);
        assert_eq!(next.step(), 1);
    }

    #[test]
    fn scalar_recursion_matches_closed_form() {
        let traces = analytic_traces(&scalar_matrix(1.1), 0.01, &CovarianceState::zeros(1), 10).unwrap();
        let oracle = geometric_oracle(1.1, 0.01, 10);
        assert!((traces[10] - oracle).abs() < 1e-14);
        assert!((traces[10] - 0.272_738_09).abs() < 1e-8);
    }

    #[test]
    fn pure_contraction() {
        let mut cov = CovarianceState::new(DMatrix::identity(2, 2)).unwrap();
        let a = DMatrix::identity(2, 2) * 0.5;
        for n in 1..=8 {
            cov = propagate_covariance(&cov, &a, 0.0).unwrap();
            assert!((cov.trace() - 2.0 * 4f64.powi(-n)).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let err = propagate_covariance(&CovarianceState::zeros(2), &DMatrix::identity(3, 3), 0.1).unwrap_err();
        assert!(matches!(err, ErrorPropError::DimensionMismatch { .. }));
    }

    #[test]
    fn rejects_invalid_covariances() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(CovarianceState::new(asym), Err(ErrorPropError::NotSymmetric(_))));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(CovarianceState::new(indefinite), Err(ErrorPropError::NotPsd(_))));
    }

    #[test]
    fn trace_bound_examples() {
        let p = GrowthBoundParams::new(1.3, 0.2, 4.0, 1.0).unwrap();
        assert_eq!(trace_bound(0, &p), 4.0);
        let unit = GrowthBoundParams::new(1.0, 0.01, 0.0, 1.0).unwrap();
        assert!((trace_bound(50, &unit) - 0.5).abs() < 1e-12);
        let p = GrowthBoundParams::new(1.1, 0.01, 0.0, 1.0).unwrap();
        assert!((trace_bound(10, &p) - geometric_oracle(1.1, 0.01, 10)).abs() < 1e-15);
    }

    #[test]
    fn trace_bound_is_continuous_across_unit_rho() {
        let near = GrowthBoundParams::new(1.0 + 1e-7, 0.01, 0.0, 1.0).unwrap();
        let at = GrowthBoundParams::new(1.0, 0.01, 0.0, 1.0).unwrap();
        assert!((trace_bound(40, &near) - trace_bound(40, &at)).abs() < 1e-5);
    }

    #[test]
    fn growth_params_validated() {
        assert!(GrowthBoundParams::new(0.0, 0.1, 0.0, 1.0).is_err());
        assert!(GrowthBoundParams::new(1.0, -0.1, 0.0, 1.0).is_err());
        assert!(GrowthBoundParams::new(1.0, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn crossing_examples() {
        assert_eq!(crossing_step(&[0.1, 0.3, 0.9], 0.5), Some(2));
        assert_eq!(crossing_step(&[0.1, 0.3], 0.5), None);
        let p = GrowthBoundParams::new(1.1, 0.01, 0.0, 0.2729).unwrap();
        // series for n = 1, 2, ...; index 10 holds n = 11, the first step above 0.2729
        let series: Vec<f64> = (1..=20).map(|n| trace_bound(n, &p)).collect();
        assert_eq!(crossing_step(&series, 0.2729), Some(10));
    }

    #[test]
    fn zero_noise_gives_zero_empirical_trace() {
        let map: TransitionMap = LinearResidual::scalar(1.1).into();
        let s0 = StateVector::new(vec![1.0]).unwrap();
        let traces = empirical_trace(&map, &NoiseModel::silent(1), &s0, 12, 20).unwrap();
        assert!(traces.iter().all(|t| *t == 0.0));
        assert!(empirical_trace(&map, &NoiseModel::silent(1), &s0, 12, 1).is_err());
    }

    #[test]
    fn scalar_monte_carlo_matches_recursion() {
        let map: TransitionMap = LinearResidual::scalar(1.1).into();
        let s0 = StateVector::new(vec![0.5]).unwrap();
        let traces = empirical_trace(&map, &NoiseModel::new(0.01, 77).unwrap(), &s0, 10, 10_000).unwrap();
        let oracle = geometric_oracle(1.1, 0.01, 10);
        assert!((traces[10] - oracle).abs() / oracle < 0.05, "{} vs {}", traces[10], oracle);
    }

    #[test]
    fn contractive_variance_plateaus() {
        let rho: f64 = 0.5;
        let sigma2 = 0.3;
        let map: TransitionMap = LinearResidual::scalar(rho).into();
        let s0 = StateVector::new(vec![0.0]).unwrap();
        let traces = empirical_trace(&map, &NoiseModel::new(sigma2, 5).unwrap(), &s0, 40, 10_000).unwrap();
        let stationary = sigma2 / (1.0 - rho * rho);
        for t in 20..=40 {
            assert!((traces[t] - stationary).abs() / stationary < 0.05);
        }
    }

    #[test]
    fn divergence_is_aggregated() {
        let map: TransitionMap = LinearResidual::scalar(1e200).into();
        let s0 = StateVector::new(vec![1.0]).unwrap();
        let err = empirical_trace(&map, &NoiseModel::new(0.1, 1).unwrap(), &s0, 5, 4).unwrap_err();
        assert!(matches!(err, ErrorPropError::Diverged { count: 4, total: 4, .. }));
    }

    #[test]
    fn trace_csv_columns() {
        let rows = trace_rows(&[0.0, 0.1], &[TraceEstimate { trace: 0.0, stderr: 0.0 }, TraceEstimate { trace: 0.11, stderr: 0.01 }]);
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,analytic_trace,empirical_trace,stderr");
        assert_eq!(text.lines().count(), 3);
    }
}
