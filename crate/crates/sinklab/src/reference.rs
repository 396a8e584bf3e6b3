//! Slow, independent oracle implementations used to verify the fast paths.
//! Nothing here is called by production code; tests compare against it.

use crate::model::{Model, Nonlinearity, Normalization, Positional};
use crate::numerics::{Mask, Scalar, Tensor};

/// All singular values of a matrix, descending, via one-sided Jacobi
/// rotations. O(n³) per sweep and deliberately naive — this is the oracle
/// the power-iteration spectral norm is checked against.
pub fn jacobi_singular_values(m: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = m
        .as_matrix("jacobi_singular_values")
        .expect("oracle input must be a matrix");
    // Work on the tall orientation; singular values are transpose-invariant.
    let (work_rows, work_cols, mut a) = if rows >= cols {
        (rows, cols, m.data().to_vec())
    } else {
        let t = m.transposed();
        (cols, rows, t.data().to_vec())
    };
    let col = |a: &[f64], j: usize, k: usize| a[k * work_cols + j];

    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..work_cols {
            for j in i + 1..work_cols {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for k in 0..work_rows {
                    let x = col(&a, i, k);
                    let y = col(&a, j, k);
                    aii += x * x;
                    ajj += y * y;
                    aij += x * y;
                }
                if aij.abs() <= tol * (aii * ajj).sqrt() || aii * ajj == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..work_rows {
                    let x = a[k * work_cols + i];
                    let y = a[k * work_cols + j];
                    a[k * work_cols + i] = c * x - s * y;
                    a[k * work_cols + j] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..work_cols)
        .map(|j| {
            (0..work_rows)
                .map(|k| {
                    let x = col(&a, j, k);
                    x * x
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Largest singular value via the Jacobi oracle, for convenience.
pub fn svd_spectral_norm(m: &Tensor<f64>) -> f64 {
    jacobi_singular_values(m).first().copied().unwrap_or(0.0)
}

/// Naive row-wise softmax over the allowed entries of a causal mask,
/// computed exactly as written: exp then normalize, no stabilization.
pub fn naive_masked_softmax<S: Scalar>(
    logits: &Tensor<S>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Tensor<f64> {
    let (rows, cols) = logits
        .as_matrix("naive_masked_softmax")
        .expect("oracle input must be a matrix");
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let mut denom = 0.0;
        for j in 0..cols {
            if allowed(i, j) {
                denom += logits.get2(i, j).to_f64().exp();
            }
        }
        for j in 0..cols {
            if allowed(i, j) {
                out.set2(i, j, logits.get2(i, j).to_f64().exp() / denom);
            }
        }
    }
    out
}

/// Straight-line reimplementation of the block equations, written directly
/// from the math with scalar loops: no gemm, no stabilized softmax, no
/// shared kernels. Returns the residual stream v^(0)..v^(L) and attention
/// maps per layer and head.
#[allow(clippy::needless_range_loop)]
pub fn straight_line_forward(
    model: &Model<f64>,
    tokens: &[usize],
    mask: &Mask,
) -> (Vec<Tensor<f64>>, Vec<Vec<Tensor<f64>>>) {
    let cfg = &model.config;
    let t = tokens.len();
    let d = cfg.d_model;
    let rms_eps = 1e-6;

    let matvec_rows = |x: &[Vec<f64>], w: &Tensor<f64>| -> Vec<Vec<f64>> {
        let (rows_w, cols_w) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), rows_w);
                (0..cols_w)
                    .map(|b| (0..rows_w).map(|a| row[a] * w.get2(a, b)).sum())
                    .collect()
            })
            .collect()
    };
    let normalize = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let r = (mean_sq + rms_eps).sqrt();
                row.iter().map(|v| v / r).collect()
            })
            .collect()
    };
    let rotate = |x: &mut [Vec<f64>]| {
        for (pos, row) in x.iter_mut().enumerate() {
            for j in 0..d / 2 {
                let theta = 10_000f64.powf(-2.0 * j as f64 / d as f64);
                let (s, c) = (pos as f64 * theta).sin_cos();
                let (x0, x1) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = x0 * c - x1 * s;
                row[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    };

    let mut v: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&id| model.embed.row(id).to_vec())
        .collect();
    let mut hidden = vec![rows_to_tensor(&v)];
    let mut attention = Vec::new();

    for layer in &model.layers {
        let attn_in = match cfg.normalization {
            Normalization::Rms => normalize(&v),
            Normalization::None => v.clone(),
        };
        let mut layer_alphas = Vec::new();
        let mut head_outs: Vec<Vec<Vec<f64>>> = Vec::new();
        for head in &layer.heads {
            let mut q = matvec_rows(&attn_in, &head.wq);
            let mut k = matvec_rows(&attn_in, &head.wk);
            if cfg.positional == Positional::Rope {
                rotate(&mut q);
                rotate(&mut k);
            }
            let vals = matvec_rows(&attn_in, &head.wv);
            let mut alpha = Tensor::<f64>::zeros(&[t, t]);
            for i in 0..t {
                let mut denom = 0.0;
                for j in 0..t {
                    if mask.allowed(i, j) {
                        let dot: f64 = (0..d).map(|b| q[i][b] * k[j][b]).sum();
                        denom += (dot / (d as f64).sqrt()).exp();
                    }
                }
                for j in 0..t {
                    if mask.allowed(i, j) {
                        let dot: f64 = (0..d).map(|b| q[i][b] * k[j][b]).sum();
                        alpha.set2(i, j, (dot / (d as f64).sqrt()).exp() / denom);
                    }
                }
            }
            let z: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    (0..d)
                        .map(|b| (0..t).map(|j| alpha.get2(i, j) * vals[j][b]).sum())
                        .collect()
                })
                .collect();
            layer_alphas.push(alpha);
            head_outs.push(z);
        }
        let concat: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                head_outs
                    .iter()
                    .flat_map(|z| z[i].iter().copied())
                    .collect()
            })
            .collect();
        let attn_out = matvec_rows(&concat, &layer.w_out);
        let z_res: Vec<Vec<f64>> = (0..t)
            .map(|i| (0..d).map(|b| attn_out[i][b] + v[i][b]).collect())
            .collect();
        let mlp_in = match cfg.normalization {
            Normalization::Rms => normalize(&z_res),
            Normalization::None => z_res.clone(),
        };
        let h1 = matvec_rows(&mlp_in, &layer.w1);
        let act: Vec<Vec<f64>> = h1
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&x| match cfg.nonlinearity {
                        Nonlinearity::Relu => x.max(0.0),
                        Nonlinearity::Gelu => {
                            let u = (2.0 / std::f64::consts::PI).sqrt()
                                * (x + 0.044715 * x * x * x);
                            0.5 * x * (1.0 + u.tanh())
                        }
                    })
                    .collect()
            })
            .collect();
        let h2 = matvec_rows(&act, &layer.w2);
        v = (0..t)
            .map(|i| (0..d).map(|b| h2[i][b] + z_res[i][b]).collect())
            .collect();
        hidden.push(rows_to_tensor(&v));
        attention.push(layer_alphas);
    }
    (hidden, attention)
}

/// Exhaustive walk-enumeration oracle for the over-squashing bound:
/// sums C_max^L · Π_ℓ ā^(ℓ) over every causal-or-not walk
/// i = k₀ → k₁ → … → k_L = j, where ā^(ℓ)[b][a] = Σ_h α^(ℓ,h)[b][a] plus
/// `delta` on the diagonal. The fast path computes the same thing as a
/// matrix product; this one literally enumerates paths.
pub fn walk_sum_bound(
    attention: &[Vec<Tensor<f64>>],
    c_max: f64,
    i: usize,
    j: usize,
    delta: f64,
) -> f64 {
    let l_total = attention.len();
    let t = attention[0][0].shape()[0];
    let edge = |layer: usize, b: usize, a: usize| -> f64 {
        let alpha_sum: f64 = attention[layer].iter().map(|h| h.get2(b, a)).sum();
        alpha_sum + if a == b { delta } else { 0.0 }
    };
    fn rec(
        edge: &dyn Fn(usize, usize, usize) -> f64,
        layer: usize,
        l_total: usize,
        t: usize,
        prev: usize,
        j: usize,
    ) -> f64 {
        if layer == l_total - 1 {
            return edge(layer, j, prev);
        }
        (0..t)
            .map(|k| edge(layer, k, prev) * rec(edge, layer + 1, l_total, t, k, j))
            .sum()
    }
    c_max.powi(l_total as i32) * rec(&edge, 0, l_total, t, i, j)
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let t = rows.len();
    let d = rows[0].len();
    Tensor::from_vec(&[t, d], rows.iter().flatten().copied().collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal_singular_values() {
        let m = Tensor::from_vec(&[3, 3], vec![3.0, 0.0, 0.0, 0.0, -7.0, 0.0, 0.0, 0.0, 0.5])
            .unwrap();
        let sv = jacobi_singular_values(&m);
        assert!((sv[0] - 7.0).abs() < 1e-12, "largest should be 7, got {}", sv[0]);
        assert!((sv[1] - 3.0).abs() < 1e-12);
        assert!((sv[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn jacobi_is_transpose_invariant() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = jacobi_singular_values(&m);
        let b = jacobi_singular_values(&m.transposed());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "σ(M) {x} vs σ(Mᵀ) {y}");
        }
    }

    #[test]
    fn jacobi_satisfies_frobenius_identity() {
        // ‖M‖_F² = Σ σ_i² ties the oracle to an independently computable
        // quantity.
        let mut s = 99u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let m: Tensor<f64> = Tensor::from_fn(&[4, 6], |_| next());
        let sv = jacobi_singular_values(&m);
        let sum_sq: f64 = sv.iter().map(|x| x * x).sum();
        let fro = m.frobenius_norm();
        assert!(
            (sum_sq.sqrt() - fro).abs() < 1e-10,
            "sqrt(Σσ²)={} must equal ‖M‖_F={}",
            sum_sq.sqrt(),
            fro
        );
    }
}
