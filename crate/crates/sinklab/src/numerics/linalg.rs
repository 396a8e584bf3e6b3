use super::{NumericsError, Result, Scalar, Tensor};

/// C = A · B for matrix-shaped tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.as_matrix("matmul lhs")?;
    let (k2, n) = b.as_matrix("matmul rhs")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims {k} vs {k2}"),
        });
    }
    let mut c = Tensor::zeros(&[m, n]);
    S::gemm(
        m,
        k,
        n,
        S::ONE,
        a.data(),
        false,
        b.data(),
        false,
        S::ZERO,
        c.data_mut(),
    );
    Ok(c)
}

/// Result of a power-iteration spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Largest singular value of a matrix via power iteration on MᵀM,
/// carried out in double precision regardless of the input scalar type.
///
/// Convergence is certified by the symmetric-eigenvalue residual
/// ‖MᵀMv − λv‖ ≤ tol·λ; if the budget of 10k iterations runs out the best
/// estimate is still returned, flagged `converged: false`.
pub fn spectral_norm<S: Scalar>(m: &Tensor<S>) -> Result<SpectralNorm> {
    let (rows, cols) = m.as_matrix("spectral_norm")?;
    m.ensure_finite("spectral_norm input")?;
    let a: Vec<f64> = m.data().iter().map(|x| x.to_f64()).collect();

    if rows == 0 || cols == 0 {
        return Ok(SpectralNorm {
            value: 0.0,
            converged: true,
            iterations: 0,
        });
    }

    // Deterministic pseudo-random start, with basis-vector restarts in case
    // the start lands in the null space of M.
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(cols + 1);
    starts.push((0..cols).map(|_| next()).collect());
    for k in 0..cols {
        let mut e = vec![0.0; cols];
        e[k] = 1.0;
        starts.push(e);
    }

    let mut iterations = 0usize;
    for start in starts {
        let mut v = start;
        normalize(&mut v);
        let mut u = vec![0.0; rows];
        let mut w = vec![0.0; cols];
        let mut lambda = 0.0f64;
        while iterations < SPECTRAL_MAX_ITERS {
            iterations += 1;
            matvec(&a, rows, cols, &v, &mut u);
            matvec_t(&a, rows, cols, &u, &mut w);
            lambda = dot(&v, &w);
            let residual = (0..cols)
                .map(|i| {
                    let r = w[i] - lambda * v[i];
                    r * r
                })
                .sum::<f64>()
                .sqrt();
            if residual <= SPECTRAL_TOL * lambda.max(f64::MIN_POSITIVE) {
                return Ok(SpectralNorm {
                    value: lambda.max(0.0).sqrt(),
                    converged: true,
                    iterations,
                });
            }
            let norm_w = dot(&w, &w).sqrt();
            if norm_w == 0.0 {
                // v is in the null space of MᵀM; try the next start vector.
                break;
            }
            for i in 0..cols {
                v[i] = w[i] / norm_w;
            }
        }
        if iterations >= SPECTRAL_MAX_ITERS {
            return Ok(SpectralNorm {
                value: lambda.max(0.0).sqrt(),
                converged: false,
                iterations,
            });
        }
    }
    // Every basis vector was annihilated: M is the zero matrix.
    Ok(SpectralNorm {
        value: 0.0,
        converged: true,
        iterations,
    })
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// u = A v where A is rows×cols row-major.
fn matvec(a: &[f64], rows: usize, cols: usize, v: &[f64], u: &mut [f64]) {
    for i in 0..rows {
        u[i] = dot(&a[i * cols..(i + 1) * cols], v);
    }
}

/// w = Aᵀ u.
fn matvec_t(a: &[f64], rows: usize, cols: usize, u: &[f64], w: &mut [f64]) {
    w.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let ui = u[i];
        for j in 0..cols {
            w[j] += ui * row[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn identity_has_unit_norm() {
        let m: Tensor<f64> = Tensor::eye(3);
        let s = spectral_norm(&m).unwrap();
        assert!(s.converged, "power iteration should converge on I_3");
        assert!(
            (s.value - 1.0).abs() < 1e-10,
            "spectral norm of identity should be 1.0, got {}",
            s.value
        );
    }

    #[test]
    fn diagonal_norm_is_largest_abs_entry() {
        let m = Tensor::from_vec(&[2, 2], vec![2.0f64, 0.0, 0.0, -5.0]).unwrap();
        let s = spectral_norm(&m).unwrap();
        assert!(
            (s.value - 5.0).abs() < 1e-8,
            "spectral norm of diag(2, -5) should be 5.0, got {}",
            s.value
        );
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let m: Tensor<f64> = Tensor::zeros(&[4, 3]);
        let s = spectral_norm(&m).unwrap();
        assert!(s.converged);
        assert_eq!(s.value, 0.0, "zero matrix must report exactly 0");
    }

    #[test]
    fn random_rectangular_matches_svd_oracle() {
        // Fixed pseudo-random 5x4 matrix; oracle is the Jacobi SVD.
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let m: Tensor<f64> = Tensor::from_fn(&[5, 4], |_| next());
        let s = spectral_norm(&m).unwrap();
        let oracle = reference::jacobi_singular_values(&m);
        let top = oracle[0];
        assert!(
            (s.value - top).abs() <= 1e-8 * top,
            "power iteration {} disagreed with Jacobi SVD {} beyond 1e-8 relative",
            s.value,
            top
        );
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(
            c.data(),
            &[58.0, 64.0, 139.0, 154.0],
            "2x3 · 3x2 product disagreed with the hand-computed result"
        );
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err(), "inner dims 3 vs 4 must be rejected");
    }
}
