use serde::{Deserialize, Serialize};

use crate::controller::RunStatus;
use crate::dynamics::{StepEvent, Trajectory};
use crate::horizon::within_tolerance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    OpenLoop,
    Halo,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::OpenLoop => "open_loop",
            Arm::Halo => "halo",
        }
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub group: String,
    pub arm: Arm,
    /// Logical steps the run was asked to complete.
    pub target_steps: usize,
    /// `None` when the run diverged.
    pub final_error: Option<f64>,
    pub success: bool,
    pub logical_steps: usize,
    pub executed_steps: usize,
    pub resets: usize,
    /// `None` when the run diverged.
    pub status: Option<RunStatus>,
    pub diverged: bool,
    pub rsr_succeeded: usize,
    pub rsr_total: usize,
    pub pearson_r: Option<f64>,
    pub lead_time: Option<f64>,
}

/// Statistics of one (group, arm) cell, recomputable from its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub rectification_success_rate: Option<f64>,
    /// Executed steps over target steps; resets are the only overhead.
    pub relative_step_overhead: Option<f64>,
    pub mean_resets: f64,
    /// Mean of the per-run correlations that are defined.
    pub pearson_r: Option<f64>,
    pub lead_time: Option<f64>,
    pub diverged: usize,
}

impl Aggregates {
    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a RunRecord>,
    {
        let recs: Vec<&RunRecord> = records.into_iter().collect();
        let n = recs.len();
        let successes = recs.iter().filter(|r| r.success).count();
        let executed: usize = recs.iter().map(|r| r.executed_steps).sum();
        let target: usize = recs.iter().map(|r| r.target_steps).sum();
        Self {
            n_runs: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            rectification_success_rate: rectification_success_rate(recs.iter().copied()),
            relative_step_overhead: (target > 0).then(|| executed as f64 / target as f64),
            mean_resets: if n == 0 {
                0.0
            } else {
                recs.iter().map(|r| r.resets).sum::<usize>() as f64 / n as f64
            },
            pearson_r: mean_defined(recs.iter().map(|r| r.pearson_r)),
            lead_time: mean_defined(recs.iter().map(|r| r.lead_time)),
            diverged: recs.iter().filter(|r| r.diverged).count(),
        }
    }
}

/// Cell label plus its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregates {
    pub group: String,
    pub arm: Arm,
    #[serde(flatten)]
    pub stats: Aggregates,
}

/// One entry per distinct (group, arm) in order of first appearance.
pub fn group_aggregates(records: &[RunRecord]) -> Vec<GroupAggregates> {
    let mut keys: Vec<(&str, Arm)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(g, a)| *g == r.group && *a == r.arm) {
            keys.push((&r.group, r.arm));
        }
    }
    keys.into_iter()
        .map(|(g, a)| GroupAggregates {
            group: g.to_string(),
            arm: a,
            stats: Aggregates::from_records(records.iter().filter(|r| r.group == g && r.arm == a)),
        })
        .collect()
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fraction of resets, pooled over runs, after which the error stayed in the
/// success band. `None` when no run reset.
pub fn rectification_success_rate<'a, I>(records: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a RunRecord>,
{
    let (ok, total) = records
        .into_iter()
        .fold((0usize, 0usize), |(o, t), r| (o + r.rsr_succeeded, t + r.rsr_total));
    (total > 0).then(|| ok as f64 / total as f64)
}

/// Total closed-loop steps, resets included, over total open-loop steps.
pub fn relative_step_overhead<'a, C, O>(closed: C, open: O) -> Option<f64>
where
    C: IntoIterator<Item = &'a RunRecord>,
    O: IntoIterator<Item = &'a RunRecord>,
{
    let c: usize = closed.into_iter().map(|r| r.executed_steps).sum();
    let o: usize = open.into_iter().map(|r| r.executed_steps).sum();
    (o > 0).then(|| c as f64 / o as f64)
}

/// Counts resets and how many of them held: the error stayed within the
/// band from the projected state up to the state that triggered the next
/// reset, or to the end of the run.
pub fn reset_outcomes(traj: &Trajectory, tol: f64) -> (usize, usize) {
    if !traj.has_states() {
        return (0, 0);
    }
    let errors = traj.error_norms();
    let resets: Vec<usize> = traj
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.event == StepEvent::Reset)
        .map(|(i, _)| i)
        .collect();
    let mut held = 0;
    for (k, &i) in resets.iter().enumerate() {
        let end = resets.get(k + 1).copied().unwrap_or(errors.len() - 1);
        if errors[i + 1..=end].iter().all(|&e| within_tolerance(e, traj.d, tol)) {
            held += 1;
        }
    }
    (held, resets.len())
}

/// Sample Pearson correlation; `None` for fewer than two points or a
/// constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return None;
    }
    let r = sxy / (sxx * syy).sqrt();
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

/// Correlation between each record's `omega` and the error of the state it
/// leads to.
pub fn omega_error_correlation(traj: &Trajectory) -> Option<f64> {
    if !traj.has_states() {
        return None;
    }
    let errors = traj.error_norms();
    let (omega, err): (Vec<f64>, Vec<f64>) = traj
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.omega.map(|o| (o, errors[i + 1])))
        .unzip();
    pearson(&omega, &err)
}

/// Steps between the first observation above `boundary_entropy` and the
/// first state whose error leaves the success band. Positive when entropy
/// warns first; `None` unless both happen.
pub fn lead_time(traj: &Trajectory, boundary_entropy: f64, tol: f64) -> Option<f64> {
    if !traj.has_states() {
        return None;
    }
    let warn = traj
        .records
        .iter()
        .position(|r| r.entropy.is_some_and(|h| h > boundary_entropy))?;
    let errors = traj.error_norms();
    let breach = errors.iter().position(|&e| !within_tolerance(e, traj.d, tol))?;
    Some(breach as f64 - warn as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{StateVector, StepRecord};

    fn rec(success: bool, executed: usize, resets: usize, rsr: (usize, usize), r: Option<f64>) -> RunRecord {
        RunRecord {
            seed: 0,
            group: "g".into(),
            arm: Arm::Halo,
            target_steps: 10,
            final_error: Some(0.1),
            success,
            logical_steps: 10,
            executed_steps: executed,
            resets,
            status: Some(RunStatus::Finished),
            diverged: false,
            rsr_succeeded: rsr.0,
            rsr_total: rsr.1,
            pearson_r: r,
            lead_time: None,
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let x = [0.3, 1.2, 0.7, 2.5];
        let y: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    #[test]
    fn overhead_examples() {
        let open = [rec(true, 10, 0, (0, 0), None)];
        assert_eq!(relative_step_overhead(&open, &open), Some(1.0));
        let closed = [rec(true, 13, 3, (3, 3), None)];
        assert_eq!(relative_step_overhead(&closed, &open), Some(1.3));
        assert_eq!(relative_step_overhead(&closed, &[]), None);
    }

    #[test]
    fn rsr_pools_resets_and_needs_one() {
        assert_eq!(rectification_success_rate(&[rec(true, 10, 0, (0, 0), None)]), None);
        let rs = [rec(true, 12, 2, (2, 2), None), rec(false, 13, 3, (1, 3), None)];
        assert_eq!(rectification_success_rate(&rs), Some(0.6));
    }

    #[test]
    fn aggregates_recompute() {
        let rs = vec![rec(true, 12, 2, (2, 2), Some(0.5)), rec(false, 13, 3, (1, 3), None)];
        let a = Aggregates::from_records(&rs);
        assert_eq!(a.n_runs, 2);
        assert_eq!(a.success_rate, 0.5);
        assert_eq!(a.relative_step_overhead, Some(1.25));
        assert_eq!(a.mean_resets, 2.5);
        assert_eq!(a.pearson_r, Some(0.5));
        assert_eq!(a.lead_time, None);
        assert_eq!(group_aggregates(&rs)[0].stats, a);
    }

    fn traj_with_errors(errors: &[f64], resets: &[usize]) -> Trajectory {
        let zero = StateVector::zeros(1);
        let mut t = Trajectory::new(StateVector::new(vec![errors[0]]).unwrap(), vec![]);
        for (i, &e) in errors[1..].iter().enumerate() {
            let mut r = StepRecord::open_loop();
            r.omega = Some(e);
            r.entropy = Some(if e > 0.5 { 4.0 } else { 1.0 });
            if resets.contains(&i) {
                r.event = StepEvent::Reset;
            }
            t.push(StateVector::new(vec![e]).unwrap(), zero.clone(), r);
        }
        t
    }

    #[test]
    fn reset_windows() {
        // resets at records 1 and 4; band is |e| <= 1
        let t = traj_with_errors(&[0.0, 0.8, 0.1, 0.5, 2.0, 0.1, 0.2], &[1, 4]);
        // first reset: states 2..=4 include 2.0, fails; second: states 5..=6 hold
        assert_eq!(reset_outcomes(&t, 1.0), (1, 2));
        assert_eq!(reset_outcomes(&traj_with_errors(&[0.0, 0.3], &[]), 1.0), (0, 0));
    }

    #[test]
    fn lead_time_and_correlation() {
        let t = traj_with_errors(&[0.0, 0.2, 0.6, 0.9, 1.5], &[]);
        // entropy first exceeds 2.0 at record 1, error leaves the band at state 4
        assert_eq!(lead_time(&t, 2.0, 1.0), Some(3.0));
        assert!((omega_error_correlation(&t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lead_time(&traj_with_errors(&[0.0, 0.1], &[]), 2.0, 1.0), None);
    }
}
