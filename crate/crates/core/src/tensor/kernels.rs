//! Matrix kernels with a rayon path and a sequential fallback.
//!
//! Every kernel computes each output row independently with a fixed
//! accumulation order, so the parallel and sequential paths agree bitwise.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the row loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential when the `parallel` feature is off.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

// multiply-adds per loop before rows are split across threads
const PAR_MIN_WORK: usize = 1 << 15;

/// Applies `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(exec: Exec, out: &mut [f64], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    let rows = out.len() / width;
    let parallel = exec == Exec::Parallel && rows > 1 && rows * work_per_row >= PAR_MIN_WORK;
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel;
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn gemm_nn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(exec, &mut c, n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(exec, &mut c, n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *cv = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    });
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(exec, &mut c, n, k * n, |p, row| {
        for i in 0..k {
            let av = a[i * m + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// Batched `gemm_nn` over `batch` independent `[m×k]·[k×n]` products.
pub fn bgemm_nn(
    exec: Exec,
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for_each_row(exec, &mut c, m * n, m * k * n, |bi, out| {
        let r = gemm_nn(
            Exec::Sequential,
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
        );
        out.copy_from_slice(&r);
    });
    c
}

/// Batched `a · bᵀ` with `a: [batch, m, k]`, `b: [batch, n, k]`.
pub fn bgemm_nt(
    exec: Exec,
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for_each_row(exec, &mut c, m * n, m * k * n, |bi, out| {
        let r = gemm_nt(
            Exec::Sequential,
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * n * k..(bi + 1) * n * k],
            m,
            k,
            n,
        );
        out.copy_from_slice(&r);
    });
    c
}

/// Batched `aᵀ · b` with `a: [batch, k, m]`, `b: [batch, k, n]`.
pub fn bgemm_tn(
    exec: Exec,
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for_each_row(exec, &mut c, m * n, m * k * n, |bi, out| {
        let r = gemm_tn(
            Exec::Sequential,
            &a[bi * k * m..(bi + 1) * k * m],
            &b[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
        );
        out.copy_from_slice(&r);
    });
    c
}
