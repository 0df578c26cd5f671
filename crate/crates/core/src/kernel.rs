//! Dense matrix kernels backing the tape ops.
//!
//! Everything funnels into `ndarray`'s f64 GEMM with beta = 0 into freshly
//! zeroed buffers. Products stay on the calling thread: the tensors here are
//! small enough that fine-grained splits cost more than they save, and the
//! worker pool is reserved for coarse per-sequence and per-run parallelism.
//! A split (when enabled) sits at a fixed shape-derived midpoint, so results
//! never depend on worker count.

use ndarray::{s, ArrayView2, ArrayViewMut2};

/// Minimum output rows before a product splits in two. Effectively disabled;
/// desk-scale products are too small to amortize the fork.
const PAR_MIN_ROWS: usize = usize::MAX;

fn gemm_serial(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut [f64]) {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("kernel: c shape");
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut cv);
}

/// c = a . b for arbitrary (possibly transposed) views.
pub fn gemm_views(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Vec<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    debug_assert_eq!(k, k2, "kernel: inner extents differ");
    let mut c = vec![0.0; m * n];
    gemm_into(a, b, &mut c);
    c
}

fn gemm_into(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut [f64]) {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    if m >= PAR_MIN_ROWS {
        // fixed midpoint rounded to 32 rows; depends on m only
        let half = ((m / 2) + 31) & !31;
        let (c1, c2) = c.split_at_mut(half * n);
        let a1 = a.slice(s![..half, ..]);
        let a2 = a.slice(s![half.., ..]);
        rayon::join(|| gemm_serial(&a1, b, c1), || gemm_serial(&a2, b, c2));
    } else {
        gemm_serial(a, b, c);
    }
}

#[cfg(test)]
fn gemm_views_forced_split(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Vec<f64> {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut c = vec![0.0; m * n];
    let half = ((m / 2) + 31) & !31;
    let (c1, c2) = c.split_at_mut(half * n);
    let a1 = a.slice(s![..half, ..]);
    let a2 = a.slice(s![half.., ..]);
    rayon::join(|| gemm_serial(&a1, b, c1), || gemm_serial(&a2, b, c2));
    c
}

/// c = a[m,k] . b[k,n], row-major slices.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let av = ArrayView2::from_shape((m, k), a).expect("kernel: a shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("kernel: b shape");
    gemm_views(&av, &bv)
}

/// a^T . b where a is [rows_a, cols_a] row-major: result [cols_a, n].
pub fn matmul_ta(a: &[f64], b: &[f64], rows_a: usize, cols_a: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows_a * cols_a);
    debug_assert_eq!(b.len(), rows_a * n);
    let av = ArrayView2::from_shape((rows_a, cols_a), a).expect("kernel: a shape");
    let bv = ArrayView2::from_shape((rows_a, n), b).expect("kernel: b shape");
    gemm_views(&av.t(), &bv)
}

/// a . b^T where b is [n, k] row-major; result [m, n].
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let av = ArrayView2::from_shape((m, k), a).expect("kernel: a shape");
    let bv = ArrayView2::from_shape((n, k), b).expect("kernel: b shape");
    gemm_views(&av, &bv.t())
}

/// Batched product over G groups: out[g] = a[g] . op(b[g]).
/// a: [G, m, k]; b: [G, k, n] (or [G, n, k] when `transpose_b`); out: [G, m, n].
pub fn batch_matmul(
    a: &[f64],
    b: &[f64],
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * n];
    let a_stride = m * k;
    let b_stride = k * n;
    out.chunks_mut(m * n).enumerate().for_each(|(g, og)| {
        let ag = &a[g * a_stride..(g + 1) * a_stride];
        let bg = &b[g * b_stride..(g + 1) * b_stride];
        let av = ArrayView2::from_shape((m, k), ag).expect("kernel: a group");
        let mut cv = ArrayViewMut2::from_shape((m, n), og).expect("kernel: c group");
        if transpose_b {
            let bv = ArrayView2::from_shape((n, k), bg).expect("kernel: b group");
            ndarray::linalg::general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut cv);
        } else {
            let bv = ArrayView2::from_shape((k, n), bg).expect("kernel: b group");
            ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut cv);
        }
    });
    out
}

/// Batched a^T[g] . b[g]: a: [G, r, m], b: [G, r, n] -> out [G, m, n].
pub fn batch_matmul_ta(
    a: &[f64],
    b: &[f64],
    groups: usize,
    r: usize,
    m: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * n];
    out.chunks_mut(m * n).enumerate().for_each(|(g, og)| {
        let ag = &a[g * r * m..(g + 1) * r * m];
        let bg = &b[g * r * n..(g + 1) * r * n];
        let av = ArrayView2::from_shape((r, m), ag).expect("kernel: a group");
        let bv = ArrayView2::from_shape((r, n), bg).expect("kernel: b group");
        let mut cv = ArrayViewMut2::from_shape((m, n), og).expect("kernel: c group");
        ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut cv);
    });
    out
}
