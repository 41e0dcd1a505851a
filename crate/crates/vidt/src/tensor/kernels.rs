//! Raw f64 compute kernels shared by the tape ops and their backward passes.
//!
//! All matmul variants accumulate into `c` so backward passes can reuse them
//! for gradient accumulation. Inner loops run over contiguous slices and are
//! blocked four rows at a time to keep the accumulator row in registers.

/// c[m x n] += a[m x k] . b[k x n]
pub fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let acc = b0[j].mul_add(a0, c_row[j]);
                let acc = b1[j].mul_add(a1, acc);
                let acc = b2[j].mul_add(a2, acc);
                c_row[j] = b3[j].mul_add(a3, acc);
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
            p += 1;
        }
    }
}

/// c[m x r] += a[m x n] . b^T, with b stored as [r x n]
pub fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, r: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * r);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * r..(i + 1) * r];
        let mut j = 0;
        while j + 4 <= r {
            let b0 = &b[j * n..(j + 1) * n];
            let b1 = &b[(j + 1) * n..(j + 2) * n];
            let b2 = &b[(j + 2) * n..(j + 3) * n];
            let b3 = &b[(j + 3) * n..(j + 4) * n];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for (p, &av) in a_row.iter().enumerate() {
                s0 = av.mul_add(b0[p], s0);
                s1 = av.mul_add(b1[p], s1);
                s2 = av.mul_add(b2[p], s2);
                s3 = av.mul_add(b3[p], s3);
            }
            c_row[j] += s0;
            c_row[j + 1] += s1;
            c_row[j + 2] += s2;
            c_row[j + 3] += s3;
            j += 4;
        }
        while j < r {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c_row[j] += s;
            j += 1;
        }
    }
}

/// c[k x n] += a^T . g, with a stored as [m x k] and g as [m x n]
pub fn mm_tn_acc(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let g0 = &g[i * n..(i + 1) * n];
        let g1 = &g[(i + 1) * n..(i + 2) * n];
        let g2 = &g[(i + 2) * n..(i + 3) * n];
        let g3 = &g[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let c_row = &mut c[p * n..(p + 1) * n];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let acc = g0[j].mul_add(v0, c_row[j]);
                let acc = g1[j].mul_add(v1, acc);
                let acc = g2[j].mul_add(v2, acc);
                c_row[j] = g3[j].mul_add(v3, acc);
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
        i += 1;
    }
}

/// Numerically stabilized softmax over one contiguous slice, in place.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn mm_variants_agree_with_direct_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        mm_nn_acc(&mut c, &a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // a . b^T with b^T supplied as b itself laid out [2 x 3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = vec![0.0; 4];
        mm_nt_acc(&mut c2, &a, &bt, 2, 3, 2);
        assert_eq!(c2, c);

        // a^T . g where a is [2 x 3], g is [2 x 2]
        let g = [1.0, 0.0, 0.0, 1.0];
        let mut c3 = vec![0.0; 6];
        mm_tn_acc(&mut c3, &a, &g, 2, 3, 2);
        assert_eq!(c3, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn blocked_kernels_match_naive_reference_on_odd_sizes() {
        let mut r = ChaCha20Rng::seed_from_u64(9);
        for (m, k, n) in [(1, 1, 1), (5, 7, 3), (6, 9, 11), (13, 4, 8), (4, 5, 4)] {
            let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut naive = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    for j in 0..n {
                        naive[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let mut c = vec![0.0; m * n];
            mm_nn_acc(&mut c, &a, &b, m, k, n);
            assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

            // bt holds b transposed [n x k]
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            mm_nt_acc(&mut c2, &a, &bt, m, k, n);
            assert!(c2.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

            // a^T stored as a itself: c3[k x n] = a^T . (a . b) exercise
            let mut c3 = vec![0.0; k * n];
            mm_tn_acc(&mut c3, &a, &naive, m, k, n);
            let mut naive3 = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    for j in 0..n {
                        naive3[p * n + j] += a[i * k + p] * naive[i * n + j];
                    }
                }
            }
            assert!(c3.iter().zip(&naive3).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_slice_is_stable_for_large_inputs() {
        let mut row = [1000.0, 0.0];
        softmax_slice(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-12);
        assert!(row[1].abs() < 1e-12);
    }
}
