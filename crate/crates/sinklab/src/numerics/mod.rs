//! Dense tensor arithmetic, masked softmax, spectral norms, and a
//! reverse-mode gradient tape. Everything downstream builds on this layer.

mod linalg;
mod mask;
mod scalar;
mod tape;
mod tensor;

pub use linalg::{matmul, spectral_norm, SpectralNorm};
pub use mask::Mask;
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("softmax row {row} is fully masked")]
    RowFullyMasked { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("value id {0} does not exist on this tape")]
    UnknownValue(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-wise masked softmax with per-row max subtraction.
///
/// Masked entries are exactly zero in the output and every surviving row
/// sums to one. A row with no unmasked entry is an error.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>, mask: &Mask) -> Result<Tensor<S>> {
    let (rows, cols) = logits.as_matrix("softmax_rows")?;
    if rows != mask.len() || cols != mask.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_rows",
            detail: format!("logits {rows}x{cols} vs mask {0}x{0}", mask.len()),
        });
    }
    logits.ensure_finite("softmax_rows input")?;
    let mut out = Tensor::zeros(&[rows, cols]);
    softmax_rows_into(logits.data(), mask, out.data_mut())?;
    Ok(out)
}

/// In-place kernel shared by the public op and the tape's attention node.
pub(crate) fn softmax_rows_into<S: Scalar>(
    logits: &[S],
    mask: &Mask,
    out: &mut [S],
) -> Result<()> {
    let t = mask.len();
    for i in 0..t {
        let row = &logits[i * t..(i + 1) * t];
        let mut max: Option<S> = None;
        for j in 0..t {
            if mask.allowed(i, j) {
                max = Some(match max {
                    Some(m) => m.maximum(row[j]),
                    None => row[j],
                });
            }
        }
        let max = max.ok_or(NumericsError::RowFullyMasked { row: i })?;
        let mut denom = S::ZERO;
        let out_row = &mut out[i * t..(i + 1) * t];
        for j in 0..t {
            if mask.allowed(i, j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                denom += e;
            } else {
                out_row[j] = S::ZERO;
            }
        }
        for v in out_row.iter_mut() {
            *v = *v / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_is_uniform_over_allowed() {
        let t = 5;
        let logits = Tensor::<f64>::zeros(&[t, t]);
        let mask = Mask::causal(t);
        let sm = softmax_rows(&logits, &mask).unwrap();
        for i in 0..t {
            for j in 0..t {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((sm.get2(i, j) - expect).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn softmax_single_unmasked_entry_is_one() {
        let logits = Tensor::<f64>::from_vec(&[3, 3], vec![5.0, -2.0, 0.3, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = Mask::causal(3);
        let sm = softmax_rows(&logits, &mask).unwrap();
        assert_eq!(sm.get2(0, 0), 1.0);
    }

    #[test]
    fn softmax_matches_naive_direct_evaluation() {
        // Naive exp/normalize oracle in double precision on a fixed 4x4 input.
        let vals = vec![
            0.31, -1.2, 2.4, 0.05, //
            1.7, 0.33, -0.91, 2.2, //
            -0.4, 0.12, 0.9, -2.5, //
            0.66, 1.05, -0.3, 0.8,
        ];
        let logits = Tensor::<f64>::from_vec(&[4, 4], vals.clone()).unwrap();
        let mask = Mask::causal(4);
        let sm = softmax_rows(&logits, &mask).unwrap();
        for i in 0..4 {
            let denom: f64 = (0..=i).map(|j| vals[i * 4 + j].exp()).sum();
            for j in 0..=i {
                let naive = vals[i * 4 + j].exp() / denom;
                assert!((sm.get2(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut mask = Mask::causal(2);
        mask.forbid(0, 0);
        let logits = Tensor::<f64>::zeros(&[2, 2]);
        match softmax_rows(&logits, &mask) {
            Err(NumericsError::RowFullyMasked { row: 0 }) => {}
            other => panic!("expected RowFullyMasked, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
        };
        for t in 1..10 {
            let logits = Tensor::<f64>::from_fn(&[t, t], |_| next());
            let sm = softmax_rows(&logits, &Mask::causal(t)).unwrap();
            for i in 0..t {
                let sum: f64 = (0..t).map(|j| sm.get2(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            }
        }
    }
}
