use nalgebra::{DMatrix, DVector};

/// Result of a power-iteration estimate of `||M||_2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `m` by power iteration on `M^T M`.
///
/// Stops once the relative change of the estimate drops below `tol`. When
/// `iters` runs out first, the best estimate is returned with
/// `converged == false`. The Rayleigh quotient approaches the true value from
/// below, so the estimate never exceeds `||M||_2` beyond rounding.
pub fn spectral_norm(m: &DMatrix<f64>, iters: usize, tol: f64) -> SpectralNorm {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return SpectralNorm {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let gram = m.transpose() * m;

    let mut v = start_vector(&gram);
    let Some(mut v_norm) = nonzero_norm(&v) else {
        return SpectralNorm {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    };
    v /= v_norm;

    let mut estimate = 0.0_f64;
    for it in 1..=iters.max(1) {
        let w = &gram * &v;
        // Rayleigh quotient of the Gram matrix: sigma_max^2 from below.
        let rq = v.dot(&w).max(0.0);
        let next = rq.sqrt();
        let delta = (next - estimate).abs();
        estimate = next;
        match nonzero_norm(&w) {
            Some(n) => v_norm = n,
            None => {
                return SpectralNorm {
                    value: 0.0,
                    converged: true,
                    iterations: it,
                }
            }
        }
        v = w / v_norm;
        if it > 1 && delta <= tol * estimate.max(f64::MIN_POSITIVE) {
            return SpectralNorm {
                value: estimate,
                converged: true,
                iterations: it,
            };
        }
    }
    SpectralNorm {
        value: estimate,
        converged: false,
        iterations: iters.max(1),
    }
}

// Ones vector, falling back to the Gram column with the largest diagonal
// when the ones vector lies in the null space.
fn start_vector(gram: &DMatrix<f64>) -> DVector<f64> {
    let n = gram.ncols();
    let ones = DVector::from_element(n, 1.0);
    if (gram * &ones).norm() > 0.0 {
        return ones;
    }
    let (best, _) = gram
        .diagonal()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let mut e = DVector::zeros(n);
    e[best] = 1.0;
    e
}

fn nonzero_norm(v: &DVector<f64>) -> Option<f64> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then_some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_norm() {
        for d in 1..6 {
            let r = spectral_norm(&DMatrix::identity(d, d), 100, 1e-14);
            assert!((r.value - 1.0).abs() < 1e-14);
            assert!(r.converged);
        }
    }

    #[test]
    fn diagonal_returns_largest_entry() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.5]));
        let r = spectral_norm(&m, 500, 1e-15);
        assert!((r.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_and_null_start() {
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3), 10, 1e-12).value, 0.0);
        // ones vector is in the null space of this matrix
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        let r = spectral_norm(&m, 200, 1e-14);
        assert!((r.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flags_non_convergence() {
        // nearly equal top singular values converge slowly
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.999_999, 0.5]));
        let r = spectral_norm(&m, 2, 1e-16);
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.value <= 1.0 + 1e-12);
    }
}
