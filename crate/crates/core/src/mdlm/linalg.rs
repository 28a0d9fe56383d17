//! Row-major f32 kernels used by the transformer.
//!
//! GEMM is delegated to `matrixmultiply`; the helpers below only choose
//! strides so that transposed operands never get materialised.

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit row strides, so column
/// slices of wider matrices (one attention head) can be addressed in place.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: usize,
    a_cs: usize,
    b: &[f32],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f32],
    c_rs: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_rs + (k.max(1) - 1) * a_cs || k == 0);
    debug_assert!(b.len() > (k.max(1) - 1) * b_rs + (n - 1) * b_cs || k == 0);
    debug_assert!(c.len() >= (m - 1) * c_rs + n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above spell out the extents touched; every
    // caller passes slices sized for the given shapes and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `c = a * b`, all contiguous.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, k, 1, b, n, 1, c, n, false);
}

/// `c += a^T * b` where `a` is stored `[k x m]`.
pub fn matmul_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, 1, m, b, n, 1, c, n, true);
}

/// `c (+)= a * b^T` where `b` is stored `[n x k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, a, k, 1, b, 1, k, c, n, acc);
}

pub const RMS_EPS: f32 = 1e-5;

/// RMS-normalises each `dim`-wide row of `x` into `out`, returning the
/// per-row inverse RMS for the backward pass.
pub fn rmsnorm(x: &[f32], gain: &[f32], out: &mut [f32], inv: &mut [f32], dim: usize) {
    for ((row, o), r) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)).zip(inv) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / dim as f32;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        *r = s;
        for ((o, v), g) in o.iter_mut().zip(row).zip(gain) {
            *o = v * s * g;
        }
    }
}

/// Accumulates `dx` and `dgain` for `y = x * inv_rms * gain`.
pub fn rmsnorm_backward(
    x: &[f32],
    gain: &[f32],
    inv: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
    dim: usize,
) {
    let rows = x
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .zip(inv);
    for (((xr, dyr), dxr), &s) in rows {
        let mut dot = 0.0f32;
        for i in 0..dim {
            dot += gain[i] * dyr[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * s;
        }
        let c = s * s * s * dot / dim as f32;
        for i in 0..dim {
            dxr[i] += s * gain[i] * dyr[i] - c * xr[i];
        }
    }
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place numerically stable softmax over a row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln()
}
