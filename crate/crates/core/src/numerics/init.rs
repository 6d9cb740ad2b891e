use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::tensor::{Scalar, Tensor};

/// Orthogonal-style initialization: Gram-Schmidt on a Gaussian draw, scaled
/// by `gain`. Computed in f64 and cast, so f32 and f64 layers initialized
/// from the same stream agree on their values.
pub fn orthogonal_init<S: Scalar>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let n = rows.max(cols);
    let m = rows.min(cols);
    // Columns of g get orthonormalized; n >= m keeps them independent a.s.
    let mut g = vec![0.0f64; n * m];
    for v in g.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for j in 0..m {
        for prev in 0..j {
            let mut dot = 0.0;
            for r in 0..n {
                dot += g[r * m + j] * g[r * m + prev];
            }
            for r in 0..n {
                g[r * m + j] -= dot * g[r * m + prev];
            }
        }
        let mut norm = 0.0;
        for r in 0..n {
            norm += g[r * m + j] * g[r * m + j];
        }
        let norm = norm.sqrt();
        if norm > 1e-12 {
            for r in 0..n {
                g[r * m + j] /= norm;
            }
        } else {
            // Degenerate draw; fall back to a unit basis column.
            for r in 0..n {
                g[r * m + j] = if r == j { 1.0 } else { 0.0 };
            }
        }
    }
    let mut out = vec![0.0f64; rows * cols];
    if rows >= cols {
        // q is already [rows, cols]
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = gain * g[i * m + j];
            }
        }
    } else {
        // transpose of q
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = gain * g[j * m + i];
            }
        }
    }
    Tensor::from_f64_slice(&[rows, cols], &out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn max_abs_offdiag_gram(t: &Tensor<f64>, rows: usize, cols: usize) -> (f64, f64) {
        // Gram matrix of the shorter axis should be ~identity (up to gain²).
        let m = rows.min(cols);
        let mut worst_diag = 0.0f64;
        let mut worst_off = 0.0f64;
        for a in 0..m {
            for b in 0..m {
                let mut dot = 0.0;
                for r in 0..rows.max(cols) {
                    let (x, y) = if rows >= cols {
                        (t.data()[r * cols + a], t.data()[r * cols + b])
                    } else {
                        (t.data()[a * cols + r], t.data()[b * cols + r])
                    };
                    dot += x * y;
                }
                if a == b {
                    worst_diag = worst_diag.max((dot - 1.0).abs());
                } else {
                    worst_off = worst_off.max(dot.abs());
                }
            }
        }
        (worst_diag, worst_off)
    }

    #[test]
    fn rows_or_columns_are_orthonormal() {
        let mut rng = stream(0, &[1]);
        for &(r, c) in &[(8usize, 20usize), (20, 8), (16, 16)] {
            let t = orthogonal_init::<f64>(r, c, 1.0, &mut rng);
            let (d, o) = max_abs_offdiag_gram(&t, r, c);
            assert!(d < 1e-10 && o < 1e-10, "r={r} c={c} d={d} o={o}");
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = orthogonal_init::<f32>(4, 7, 1.4142, &mut stream(5, &[2]));
        let b = orthogonal_init::<f32>(4, 7, 1.4142, &mut stream(5, &[2]));
        assert_eq!(a, b);
    }
}
