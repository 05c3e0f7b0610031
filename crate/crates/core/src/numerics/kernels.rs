//! Dense f64 matrix kernels used by the tape. All matrices are row-major.
//!
//! On x86-64 the same bodies are also compiled with AVX2 enabled and picked
//! at runtime. Rust never contracts `a * b + c` into a fused multiply-add,
//! so both builds round identically.

/// Calls the AVX2 build of a kernel body when the CPU supports it.
macro_rules! dispatch {
    ($body:ident, $fast:ident, $($arg:expr),*) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn $fast(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
                $body(a, b, out, m, k, n)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime just above.
                return unsafe { $fast($($arg),*) };
            }
        }
        $body($($arg),*)
    }};
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(nn_body, nn_avx2, a, b, out, m, k, n)
}

#[inline(always)]
fn nn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Four output rows at a time so each row of `b` is loaded once per block.
    let blocks = m / 4;
    for blk in 0..blocks {
        let a4 = &a[4 * blk * k..(4 * blk + 4) * k];
        let (o0, rest) = out[4 * blk * n..(4 * blk + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for (p, b_row) in b.chunks_exact(n).enumerate() {
            let (x0, x1, x2, x3) = (a4[p], a4[k + p], a4[2 * k + p], a4[3 * k + p]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += x0 * bv;
                o1[j] += x1 * bv;
                o2[j] += x2 * bv;
                o3[j] += x3 * bv;
            }
        }
    }
    for i in 4 * blocks..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(nt_body, nt_avx2, a, b, out, m, k, n)
}

#[inline(always)]
fn nt_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // Transposing b once is cheap next to the m*k*n product and lets the
    // row-streaming kernel vectorize.
    let mut bt = vec![0.0; k * n];
    for (j, b_row) in b.chunks_exact(k).enumerate() {
        for (p, &v) in b_row.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    nn_body(a, &bt, out, m, k, n)
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(tn_body, tn_avx2, a, b, out, m, k, n)
}

#[inline(always)]
fn tn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // Four input rows per sweep over `out`.
    let blocks = m / 4;
    for blk in 0..blocks {
        let r = 4 * blk;
        let (b0, b1, b2, b3) = (
            &b[r * n..(r + 1) * n],
            &b[(r + 1) * n..(r + 2) * n],
            &b[(r + 2) * n..(r + 3) * n],
            &b[(r + 3) * n..(r + 4) * n],
        );
        for (p, out_row) in out.chunks_exact_mut(n).enumerate() {
            let (x0, x1, x2, x3) = (a[r * k + p], a[(r + 1) * k + p], a[(r + 2) * k + p], a[(r + 3) * k + p]);
            for j in 0..n {
                out_row[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
    }
    for i in 4 * blocks..m {
        let (a_row, b_row) = (&a[i * k..(i + 1) * k], &b[i * n..(i + 1) * n]);
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline(always)]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}
