//! Deterministic dense math helpers shared by kernels and references.
//!
//! All reductions run in ascending index order so that a reference and an
//! overlapped kernel that follow the same order agree bit-for-bit on integer
//! inputs.

/// `out[m x n] += a[m x k] * b[k x n]`, row-major.
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// Largest elementwise error of `got` against `want`, relative to the larger
/// magnitude (absolute near zero).
pub fn max_rel_err(got: &[f32], want: &[f32]) -> f32 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            let scale = g.abs().max(w.abs()).max(1.0);
            (g - w).abs() / scale
        })
        .fold(0.0f32, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_matmul() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let got = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(got, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_roundtrip() {
        let a = vec![2.0, -1.0, 0.5, 3.0, 0.0, -2.0];
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 3, 3), a);
    }

    #[test]
    fn rel_err_scales() {
        assert_eq!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(max_rel_err(&[100.0], &[101.0]) < 0.011);
    }
}
