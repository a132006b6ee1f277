//! Raw row-major matrix kernels shared by the tape and the solvers.

use crate::exec::Exec;

/// Below this many multiply-adds the row loop stays on the calling thread.
pub const PARALLEL_MIN_FLOPS: usize = 1 << 16;

fn pick(exec: Exec, flops: usize) -> Exec {
    if flops >= PARALLEL_MIN_FLOPS {
        exec
    } else {
        Exec::Sequential
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pick(exec, m * k * n).for_each_row(&mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pick(exec, m * k * n).for_each_row(&mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn(exec: Exec, a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, k, m);
    matmul(exec, &at, b, m, k, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(Exec::Sequential, &a, &b, m, k, n);
        let bt = transpose(&b, k, n);
        let nt = matmul_nt(Exec::Sequential, &a, &bt, m, k, n);
        let at = transpose(&a, m, k);
        let tn = matmul_tn(Exec::Sequential, &at, &b, k, m, n);
        for i in 0..m * n {
            assert!((want[i] - got[i]).abs() < 1e-12);
            assert!((want[i] - nt[i]).abs() < 1e-12);
            assert!((want[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_rows_are_bit_identical() {
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.13).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();
        assert_eq!(
            matmul(Exec::Sequential, &a, &b, m, k, n),
            matmul(Exec::Parallel, &a, &b, m, k, n)
        );
    }
}
