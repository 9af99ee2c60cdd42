use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::noise::NoiseStream;
use super::spectral::spectral_norm;
use super::DynamicsError;

/// Latent state `S_t` of dimension `d`. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DynamicsError> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self, DynamicsError> {
        if values.is_empty() {
            return Err(DynamicsError::InvalidArgument("state dimension must be >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidArgument(format!(
                "state entry {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "state dimension must be >= 1");
        Self(DVector::zeros(d))
    }

    pub fn filled(d: usize, value: f64) -> Self {
        assert!(d >= 1 && value.is_finite());
        Self(DVector::from_element(d, value))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Which family a [`TransitionMap`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFamily {
    LinearResidual,
    RandomTanhNet,
    PiecewiseSwitched,
}

/// `G(S) = J S`; the transition matrix is `A = I + J`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResidual {
    jacobian: DMatrix<f64>,
    transition_norm: f64,
}

impl LinearResidual {
    pub fn from_jacobian(jacobian: DMatrix<f64>) -> Result<Self, DynamicsError> {
        check_square(&jacobian)?;
        let d = jacobian.nrows();
        let transition = DMatrix::identity(d, d) + &jacobian;
        let transition_norm = spectral_norm(&transition, 5_000, 1e-14).value;
        Ok(Self {
            jacobian,
            transition_norm,
        })
    }

    pub fn from_transition(transition: DMatrix<f64>) -> Result<Self, DynamicsError> {
        check_square(&transition)?;
        let d = transition.nrows();
        Self::from_jacobian(transition - DMatrix::identity(d, d))
    }

    /// One-dimensional map `S -> a S`.
    pub fn scalar(a: f64) -> Self {
        Self {
            jacobian: DMatrix::from_element(1, 1, a - 1.0),
            transition_norm: a.abs(),
        }
    }

    /// `A = rho Q` with `Q` a seeded random orthogonal matrix. Every singular
    /// value of `A` equals `rho`, so the covariance of the error stays
    /// isotropic and `ln rho` is both the Lyapunov exponent and the log of the
    /// spectral norm.
    pub fn scaled_orthogonal(d: usize, rho: f64, seed: u64) -> Result<Self, DynamicsError> {
        check_plant(d, rho)?;
        let q = random_orthogonal(d, seed);
        let jacobian = q * rho - DMatrix::identity(d, d);
        Ok(Self {
            jacobian,
            transition_norm: rho,
        })
    }

    /// Dense Gaussian `A` rescaled so that `||A||_2 = rho`. Generally non-normal.
    pub fn with_spectral_norm(d: usize, rho: f64, seed: u64) -> Result<Self, DynamicsError> {
        check_plant(d, rho)?;
        let mut stream = NoiseStream::new(1.0, seed);
        let raw = DMatrix::from_fn(d, d, |_, _| stream.next_standard());
        let norm = spectral_norm(&raw, 10_000, 1e-15).value;
        let transition = raw * (rho / norm);
        let jacobian = &transition - DMatrix::identity(d, d);
        Ok(Self {
            jacobian,
            transition_norm: rho,
        })
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn transition(&self) -> DMatrix<f64> {
        let d = self.jacobian.nrows();
        DMatrix::identity(d, d) + &self.jacobian
    }

    pub fn transition_norm(&self) -> f64 {
        self.transition_norm
    }
}

/// `G(S) = W tanh(S) + b` with `||W||_2 <= L`, so `G` is `L`-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhNet {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    lipschitz: f64,
}

impl TanhNet {
    /// Clips `weights` to spectral norm at most `lipschitz`.
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, lipschitz: f64) -> Result<Self, DynamicsError> {
        check_square(&weights)?;
        if bias.len() != weights.nrows() {
            return Err(DynamicsError::DimensionMismatch {
                expected: weights.nrows(),
                got: bias.len(),
            });
        }
        if !(lipschitz.is_finite() && lipschitz > 0.0) {
            return Err(DynamicsError::InvalidArgument(format!(
                "Lipschitz bound must be positive, got {lipschitz}"
            )));
        }
        let norm = spectral_norm(&weights, 10_000, 1e-14).value;
        let weights = if norm > lipschitz {
            weights * (lipschitz / norm)
        } else {
            weights
        };
        Ok(Self {
            weights,
            bias,
            lipschitz,
        })
    }

    /// Gaussian weights scaled by `gain / sqrt(d)`, then clipped to `lipschitz`.
    pub fn random(d: usize, gain: f64, lipschitz: f64, seed: u64) -> Result<Self, DynamicsError> {
        if d == 0 {
            return Err(DynamicsError::InvalidArgument("dimension must be >= 1".into()));
        }
        let mut stream = NoiseStream::new(1.0, seed);
        let scale = gain / (d as f64).sqrt();
        let weights = DMatrix::from_fn(d, d, |_, _| scale * stream.next_standard());
        let bias = DVector::from_fn(d, |_, _| 0.1 * stream.next_standard());
        Self::new(weights, bias, lipschitz)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Time-varying linear residual map: piece `k` is active for `dwell`
/// consecutive steps, cycling through `pieces`.
#[derive(Debug, Clone, PartialEq)]
pub struct Switched {
    pieces: Vec<LinearResidual>,
    dwell: usize,
}

impl Switched {
    pub fn new(pieces: Vec<LinearResidual>, dwell: usize) -> Result<Self, DynamicsError> {
        let first = pieces
            .first()
            .ok_or_else(|| DynamicsError::InvalidArgument("switched map needs at least one piece".into()))?;
        let d = first.jacobian.nrows();
        if let Some(p) = pieces.iter().find(|p| p.jacobian.nrows() != d) {
            return Err(DynamicsError::DimensionMismatch {
                expected: d,
                got: p.jacobian.nrows(),
            });
        }
        if dwell == 0 {
            return Err(DynamicsError::InvalidArgument("dwell must be >= 1".into()));
        }
        Ok(Self { pieces, dwell })
    }

    pub fn piece_at(&self, t: usize) -> &LinearResidual {
        &self.pieces[(t / self.dwell) % self.pieces.len()]
    }

    pub fn pieces(&self) -> &[LinearResidual] {
        &self.pieces
    }
}

/// The update function `G` of the residual system `S' = S + G(S, t) + xi`.
///
/// Evaluation is deterministic; all randomness enters through the noise stream.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionMap {
    LinearResidual(LinearResidual),
    RandomTanhNet(TanhNet),
    PiecewiseSwitched(Switched),
}

impl TransitionMap {
    pub fn family(&self) -> MapFamily {
        match self {
            TransitionMap::LinearResidual(_) => MapFamily::LinearResidual,
            TransitionMap::RandomTanhNet(_) => MapFamily::RandomTanhNet,
            TransitionMap::PiecewiseSwitched(_) => MapFamily::PiecewiseSwitched,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TransitionMap::LinearResidual(m) => m.jacobian.nrows(),
            TransitionMap::RandomTanhNet(m) => m.weights.nrows(),
            TransitionMap::PiecewiseSwitched(m) => m.pieces[0].jacobian.nrows(),
        }
    }

    /// `G(S, t)`. Only the switched family depends on `t`.
    pub fn evaluate(&self, state: &DVector<f64>, t: usize) -> DVector<f64> {
        match self {
            TransitionMap::LinearResidual(m) => &m.jacobian * state,
            TransitionMap::RandomTanhNet(m) => &m.weights * state.map(f64::tanh) + &m.bias,
            TransitionMap::PiecewiseSwitched(m) => &m.piece_at(t).jacobian * state,
        }
    }

    /// Analytic Jacobian `dG/dS` at `(S, t)`.
    pub fn jacobian(&self, state: &DVector<f64>, t: usize) -> DMatrix<f64> {
        match self {
            TransitionMap::LinearResidual(m) => m.jacobian.clone(),
            TransitionMap::RandomTanhNet(m) => {
                let slope = state.map(|x| 1.0 - x.tanh().powi(2));
                let mut j = m.weights.clone();
                for (mut col, s) in j.column_iter_mut().zip(slope.iter()) {
                    col *= *s;
                }
                j
            }
            TransitionMap::PiecewiseSwitched(m) => m.piece_at(t).jacobian.clone(),
        }
    }

    /// `||I + J(S, t)||_2`, the local one-step expansion factor.
    pub fn local_expansion(&self, state: &DVector<f64>, t: usize) -> f64 {
        match self {
            TransitionMap::LinearResidual(m) => m.transition_norm,
            TransitionMap::PiecewiseSwitched(m) => m.piece_at(t).transition_norm,
            TransitionMap::RandomTanhNet(_) => {
                let d = self.dim();
                let a = DMatrix::identity(d, d) + self.jacobian(state, t);
                spectral_norm(&a, 2_000, 1e-12).value
            }
        }
    }
}

impl From<LinearResidual> for TransitionMap {
    fn from(m: LinearResidual) -> Self {
        TransitionMap::LinearResidual(m)
    }
}

impl From<TanhNet> for TransitionMap {
    fn from(m: TanhNet) -> Self {
        TransitionMap::RandomTanhNet(m)
    }
}

impl From<Switched> for TransitionMap {
    fn from(m: Switched) -> Self {
        TransitionMap::PiecewiseSwitched(m)
    }
}

/// Seeded Haar-ish orthogonal matrix from the QR factors of a Gaussian matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut stream = NoiseStream::new(1.0, seed);
    let g = DMatrix::from_fn(d, d, |_, _| stream.next_standard());
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (i, mut col) in q.column_iter_mut().enumerate() {
        if r[(i, i)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

fn check_square(m: &DMatrix<f64>) -> Result<(), DynamicsError> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(DynamicsError::InvalidArgument(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::InvalidArgument("matrix has non-finite entries".into()));
    }
    Ok(())
}

fn check_plant(d: usize, rho: f64) -> Result<(), DynamicsError> {
    if d == 0 {
        return Err(DynamicsError::InvalidArgument("dimension must be >= 1".into()));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(DynamicsError::InvalidArgument(format!(
            "planted spectral norm must be positive, got {rho}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_rejects_non_finite_and_empty() {
        assert!(StateVector::new(vec![]).is_err());
        assert!(StateVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert_eq!(StateVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn orthogonal_factor_is_orthogonal() {
        let q = random_orthogonal(6, 11);
        let err = (q.transpose() * &q - DMatrix::identity(6, 6)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn planted_norms_hold() {
        let m = LinearResidual::scaled_orthogonal(5, 1.2, 3).unwrap();
        let n = spectral_norm(&m.transition(), 1000, 1e-14).value;
        assert!((n - 1.2).abs() < 1e-10);
        let m = LinearResidual::with_spectral_norm(4, 1.05, 9).unwrap();
        let svd = m.transition().svd(false, false);
        let top = svd.singular_values.max();
        assert!((top - 1.05).abs() < 1e-9);
    }

    #[test]
    fn tanh_weights_are_clipped() {
        let net = TanhNet::random(6, 5.0, 0.5, 1).unwrap();
        let norm = net.weights().clone().svd(false, false).singular_values.max();
        assert!(norm <= 0.5 + 1e-9);
    }

    #[test]
    fn switched_cycles_with_dwell() {
        let m = Switched::new(vec![LinearResidual::scalar(1.2), LinearResidual::scalar(0.9)], 2).unwrap();
        let norms: Vec<f64> = (0..6).map(|t| m.piece_at(t).transition_norm()).collect();
        assert_eq!(norms, vec![1.2, 1.2, 0.9, 0.9, 1.2, 1.2]);
        assert!(Switched::new(vec![], 1).is_err());
    }
}
