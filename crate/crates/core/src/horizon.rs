//! Critical horizon and phase-transition sweeps.
//!
//! For a system expanding at rate `lambda` per step with per-step noise
//! `sigma2` (measured in the same units as the threshold `psi`), the horizon
//! at which accumulated variance reaches `psi` is
//!
//! ```text
//! N* = ln(1 + psi (e^{2 lambda} - 1) / sigma2) / (2 lambda)
//! ```
//!
//! Horizon math uses the trace of the covariance. For `d > 1` the tightest
//! per-direction statement would use `||Sigma||_2` instead; for isotropic
//! noise under a scaled orthogonal plant the two differ by exactly a factor
//! `d`, which [`matched_params`] folds into `sigma2` and `psi`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{derive_seed, ideal_step, step, DynamicsError, LinearResidual, NoiseModel, StateVector, TransitionMap};
use crate::error_prop::{crossing_step, trace_bound, GrowthBoundParams};

/// Lower and upper end of the planted-rate range used as the difficulty axis.
pub const DIFFICULTY_RANGE: (f64, f64) = (0.02, 0.3);
const MIN_SEEDS: usize = 30;
const MAP_LANE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HorizonError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonParams {
    pub lambda: f64,
    pub sigma2: f64,
    pub psi: f64,
}

impl HorizonParams {
    pub fn new(lambda: f64, sigma2: f64, psi: f64) -> Result<Self, HorizonError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(lambda) && ok(sigma2) && ok(psi)) {
            return Err(HorizonError::InvalidArgument(format!(
                "lambda, sigma2 and psi must be positive and finite; got {lambda}, {sigma2}, {psi}"
            )));
        }
        Ok(Self { lambda, sigma2, psi })
    }
}

/// Parameters whose `psi` matches the success criterion
/// `||delta||_2 / sqrt(d) <= success_tol` for a `d`-dimensional system with
/// per-coordinate noise `sigma2`.
pub fn matched_params(lambda: f64, sigma2: f64, d: usize, success_tol: f64) -> Result<HorizonParams, HorizonError> {
    let d = d as f64;
    HorizonParams::new(lambda, d * sigma2, d * success_tol * success_tol)
}

/// Success criterion shared by every experiment: per-coordinate RMS error
/// at most `tol`.
pub fn within_tolerance(error_norm: f64, d: usize, tol: f64) -> bool {
    error_norm.is_finite() && error_norm <= tol * (d as f64).sqrt()
}

pub fn critical_horizon(p: &HorizonParams) -> f64 {
    let two_l = 2.0 * p.lambda;
    (p.psi * two_l.exp_m1() / p.sigma2).ln_1p() / two_l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_star: f64,
    pub floor: usize,
    pub ceil: usize,
    /// First `n >= 0` whose trace bound (from a zero initial covariance)
    /// reaches `psi`.
    pub crossing: usize,
    /// `|crossing - n_star|`.
    pub gap: f64,
}

pub fn horizon_consistency(p: &HorizonParams) -> ConsistencyReport {
    let n_star = critical_horizon(p);
    let bound = GrowthBoundParams {
        rho: p.lambda.exp(),
        sigma2: p.sigma2,
        trace0: 0.0,
        psi: p.psi,
    };
    let limit = n_star.ceil() as usize + 2;
    let series: Vec<f64> = (0..=limit).map(|n| trace_bound(n, &bound)).collect();
    let crossing = crossing_step(&series, p.psi).unwrap_or(limit + 1);
    ConsistencyReport {
        n_star,
        floor: n_star.floor() as usize,
        ceil: n_star.ceil() as usize,
        crossing,
        gap: (crossing as f64 - n_star).abs(),
    }
}

/// `k` planted rates log-spaced over [`DIFFICULTY_RANGE`], easiest first.
pub fn difficulty_lambdas(k: usize) -> Vec<f64> {
    let (lo, hi) = DIFFICULTY_RANGE;
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..k)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp())
            .collect(),
    }
}

/// How a planted rate becomes a transition matrix with `||A||_2 = e^lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// `A = e^lambda Q` with `Q` orthogonal; every direction grows at the
    /// same rate, so the trace recursion is exact.
    #[default]
    ScaledOrthogonal,
    /// A Gaussian matrix rescaled to the target spectral norm; only the
    /// leading direction grows at the full rate.
    Gaussian,
}

pub fn planted_map(kind: PlantKind, d: usize, lambda: f64, seed: u64) -> Result<TransitionMap, HorizonError> {
    let rho = lambda.exp();
    let map = match kind {
        PlantKind::ScaledOrthogonal => LinearResidual::scaled_orthogonal(d, rho, seed)?,
        PlantKind::Gaussian => LinearResidual::with_spectral_norm(d, rho, seed)?,
    };
    Ok(map.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub d: usize,
    /// Per-coordinate noise variance.
    pub sigma2: f64,
    pub plant: PlantKind,
    /// Every coordinate of the initial state.
    pub s0: f64,
    pub lengths: Vec<usize>,
    /// Planted rate per difficulty row.
    pub lambdas: Vec<f64>,
    pub n_seeds: usize,
    pub success_tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub lengths: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// `success_rates[i][j]`: length `lengths[i]`, difficulty `lambdas[j]`.
    pub success_rates: Vec<Vec<f64>>,
    pub n_seeds: usize,
    pub success_tol: f64,
    /// Runs per difficulty row that diverged; they count as failures.
    pub diverged: Vec<usize>,
    /// Matched-threshold critical horizon per difficulty row; `None` for a
    /// noiseless system.
    pub n_star: Vec<Option<f64>>,
}

impl PhaseGrid {
    pub fn row(&self, j: usize) -> Vec<f64> {
        self.success_rates.iter().map(|r| r[j]).collect()
    }

    /// Interpolated length at which difficulty row `j` drops below 50%.
    pub fn fifty_percent_length(&self, j: usize) -> Option<f64> {
        fifty_percent_length(&self.lengths, &self.row(j))
    }

    /// CSV columns `length,difficulty,success_rate,n_seeds`; the difficulty
    /// column holds the planted rate.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), HorizonError> {
        let io = |e: csv::Error| HorizonError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["length", "difficulty", "success_rate", "n_seeds"]).map_err(io)?;
        for (i, len) in self.lengths.iter().enumerate() {
            for (j, lambda) in self.lambdas.iter().enumerate() {
                w.write_record([
                    len.to_string(),
                    lambda.to_string(),
                    self.success_rates[i][j].to_string(),
                    self.n_seeds.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| HorizonError::Io(e.to_string()))
    }

    /// CSV columns `difficulty,n_star,fifty_percent_length` for overlaying
    /// the predicted horizon on the grid.
    pub fn write_n_star_csv<W: Write>(&self, writer: W) -> Result<(), HorizonError> {
        let io = |e: csv::Error| HorizonError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["difficulty", "n_star", "fifty_percent_length"]).map_err(io)?;
        for (j, lambda) in self.lambdas.iter().enumerate() {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([lambda.to_string(), opt(self.n_star[j]), opt(self.fifty_percent_length(j))])
                .map_err(io)?;
        }
        w.flush().map_err(|e| HorizonError::Io(e.to_string()))
    }
}

/// First downward crossing of 0.5, linearly interpolated between grid
/// lengths. `None` when the rate never drops below one half, or starts there.
pub fn fifty_percent_length(lengths: &[usize], rates: &[f64]) -> Option<f64> {
    for k in 1..lengths.len().min(rates.len()) {
        let (r0, r1) = (rates[k - 1], rates[k]);
        if r0 >= 0.5 && r1 < 0.5 {
            let (n0, n1) = (lengths[k - 1] as f64, lengths[k] as f64);
            return Some(n0 + (r0 - 0.5) / (r0 - r1) * (n1 - n0));
        }
    }
    None
}

/// Open-loop success rate over a grid of chain lengths and planted rates.
///
/// One run per (row, seed) is simulated to the longest length and scored at
/// every grid length on the way. Row `j` uses plant seed
/// `derive_seed(derive_seed(seed, MAX), j)` and run `i` of that row uses
/// noise seed `derive_seed(derive_seed(seed, j), i)`.
pub fn phase_sweep(spec: &SweepSpec) -> Result<PhaseGrid, HorizonError> {
    if spec.n_seeds < MIN_SEEDS {
        return Err(HorizonError::InvalidArgument(format!(
            "n_seeds must be at least {MIN_SEEDS}, got {}",
            spec.n_seeds
        )));
    }
    if spec.d == 0 || spec.lengths.is_empty() || spec.lambdas.is_empty() {
        return Err(HorizonError::InvalidArgument("need d >= 1 and non-empty lengths and lambdas".into()));
    }
    if spec.lengths.windows(2).any(|w| w[0] >= w[1]) || spec.lengths[0] == 0 {
        return Err(HorizonError::InvalidArgument("lengths must be positive and strictly increasing".into()));
    }
    if !(spec.success_tol > 0.0) || spec.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(HorizonError::InvalidArgument("success_tol and lambdas must be positive".into()));
    }
    NoiseModel::new(spec.sigma2, 0)?;
    let s0 = StateVector::filled(spec.d, spec.s0);
    let max_len = *spec.lengths.last().expect("non-empty");

    let maps = spec
        .lambdas
        .iter()
        .enumerate()
        .map(|(j, &l)| planted_map(spec.plant, spec.d, l, derive_seed(derive_seed(spec.seed, MAP_LANE), j as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, usize)> =
        (0..spec.lambdas.len()).flat_map(|j| (0..spec.n_seeds).map(move |i| (j, i))).collect();
    // Per run: success flag at every grid length, or None if it diverged.
    let outcomes: Vec<Option<Vec<bool>>> = jobs
        .par_iter()
        .map(|&(j, i)| {
            let noise = NoiseModel::new(spec.sigma2, derive_seed(derive_seed(spec.seed, j as u64), i as u64))
                .expect("validated above");
            scored_run(&maps[j], &s0, &noise, &spec.lengths, max_len, spec.success_tol).ok()
        })
        .collect();

    let mut success = vec![vec![0usize; spec.lambdas.len()]; spec.lengths.len()];
    let mut diverged = vec![0usize; spec.lambdas.len()];
    for (&(j, _), outcome) in jobs.iter().zip(&outcomes) {
        match outcome {
            Some(flags) => {
                for (li, ok) in flags.iter().enumerate() {
                    success[li][j] += usize::from(*ok);
                }
            }
            None => diverged[j] += 1,
        }
    }
    let n = spec.n_seeds as f64;
    let n_star = spec
        .lambdas
        .iter()
        .map(|&l| {
            matched_params(l, spec.sigma2, spec.d, spec.success_tol)
                .ok()
                .map(|p| critical_horizon(&p))
        })
        .collect();
    Ok(PhaseGrid {
        lengths: spec.lengths.clone(),
        lambdas: spec.lambdas.clone(),
        success_rates: success.iter().map(|row| row.iter().map(|&c| c as f64 / n).collect()).collect(),
        n_seeds: spec.n_seeds,
        success_tol: spec.success_tol,
        diverged,
        n_star,
    })
}

fn scored_run(
    map: &TransitionMap,
    s0: &StateVector,
    noise: &NoiseModel,
    lengths: &[usize],
    max_len: usize,
    tol: f64,
) -> Result<Vec<bool>, DynamicsError> {
    let mut stream = noise.stream();
    let mut state = s0.clone();
    let mut ideal = s0.clone();
    let mut flags = Vec::with_capacity(lengths.len());
    let mut next = 0;
    for t in 0..max_len {
        state = step(map, &state, t, &mut stream)?;
        ideal = ideal_step(map, &ideal, t)?;
        if lengths[next] == t + 1 {
            let err = (state.as_vector() - ideal.as_vector()).norm();
            flags.push(within_tolerance(err, s0.dim(), tol));
            next += 1;
        }
    }
    Ok(flags)
}
