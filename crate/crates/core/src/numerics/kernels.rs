//! Slice-level kernels shared by the autodiff tape and the inference path.
//!
//! Both paths call the same functions in the same order, so a tape forward
//! and an inference forward over the same parameters produce identical bits.

use super::tensor::Real;

/// `c = a[m,k] * b[k,n] + beta * c`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a[m,k] * b[n,k]^T + beta * c`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a[k,m]^T * b[k,n] + beta * c`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place max-subtracted softmax of one row; the normalizer is summed in f64.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::from_f64(f64::NEG_INFINITY);
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.to_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns `1 / sqrt(mean(x^2) + eps)` with the mean accumulated in f64.
pub fn inv_rms<T: Real>(x: &[T], eps: f64) -> T {
    let ss: f64 = x.iter().map(|v| v.to_f64() * v.to_f64()).sum();
    T::from_f64(1.0 / (ss / x.len() as f64 + eps).sqrt())
}

/// Row-wise RMS normalization of `x[rows, d]`. Writes per-row inverse RMS into
/// `inv_out` when provided (needed by the backward pass).
pub fn rms_norm_rows<T: Real>(x: &[T], gain: &[T], eps: f64, out: &mut [T], mut inv_out: Option<&mut [T]>) {
    let d = gain.len();
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let inv = inv_rms(xr, eps);
        if let Some(buf) = inv_out.as_deref_mut() {
            buf[r] = inv;
        }
        for ((o, &xv), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = g * (xv * inv);
        }
    }
}

/// Rotation angles for one position: `pos * base^(-2i/d_head)` for each pair `i`.
pub fn rope_angles(position: usize, d_head: usize, base: f64) -> Vec<(f64, f64)> {
    (0..d_head / 2)
        .map(|i| {
            let freq = base.powf(-2.0 * i as f64 / d_head as f64);
            let theta = position as f64 * freq;
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` of every head in `row`.
/// `inverse` applies the transpose rotation (used for gradients).
pub fn rope_row<T: Real>(row: &mut [T], d_head: usize, angles: &[(f64, f64)], inverse: bool) {
    for head in row.chunks_exact_mut(d_head) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(angles) {
            let (c, s) = (T::from_f64(c), T::from_f64(if inverse { -s } else { s }));
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    x / (T::ONE + (-(u + u)).exp())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let s = T::ONE / (T::ONE + (-(u + u)).exp());
    let dinner = c * (T::ONE + T::from_f64(3.0) * a * x * x);
    s + x * (s + s) * (T::ONE - s) * dinner
}

/// Attention for a single query row against keys/values `0..n_keys`.
///
/// `keys` and `values` are row-major with row stride `stride`; head columns
/// start at offset 0 of each row slice passed in. `probs` receives the
/// softmax weights and `out` the weighted value sum.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    n_keys: usize,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let d = q.len();
    for (j, p) in probs.iter_mut().enumerate().take(n_keys) {
        let kr = &keys[j * stride..j * stride + d];
        let mut dot = T::ZERO;
        for (&a, &b) in q.iter().zip(kr) {
            dot += a * b;
        }
        *p = dot * scale;
    }
    softmax_in_place(&mut probs[..n_keys]);
    out.iter_mut().for_each(|o| *o = T::ZERO);
    for (j, &p) in probs.iter().enumerate().take(n_keys) {
        let vr = &values[j * stride..j * stride + d];
        for (o, &v) in out.iter_mut().zip(vr) {
            *o += p * v;
        }
    }
}

/// Causal multi-head attention over `batch` sequences of length `seq`.
///
/// `q`, `k`, `v` and the returned `z` are `[batch*seq, n_heads*d_head]`.
/// When `probs` is given it receives the attention weights laid out as
/// `[batch, n_heads, seq, seq]` (upper triangle zero).
pub fn causal_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    n_heads: usize,
    mut probs: Option<&mut [T]>,
) -> Vec<T> {
    let d_model = q.len() / (batch * seq).max(1);
    let d_head = d_model / n_heads;
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let mut z = vec![T::ZERO; q.len()];
    let mut row_probs = vec![T::ZERO; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let col = h * d_head;
            for i in 0..seq {
                let r = b * seq + i;
                let qr = &q[r * d_model + col..r * d_model + col + d_head];
                let base = b * seq * d_model + col;
                let out = &mut z[r * d_model + col..r * d_model + col + d_head];
                attend_row(qr, &k[base..], &v[base..], d_model, i + 1, scale, &mut row_probs, out);
                if let Some(buf) = probs.as_deref_mut() {
                    let off = ((b * n_heads + h) * seq + i) * seq;
                    buf[off..off + i + 1].copy_from_slice(&row_probs[..i + 1]);
                }
            }
        }
    }
    z
}

/// Gradients of [`causal_attention`] given the saved weights.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dz: &[T],
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d_model = q.len() / (batch * seq).max(1);
    let d_head = d_model / n_heads;
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut dp = vec![T::ZERO; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let col = h * d_head;
            for i in 0..seq {
                let ri = (b * seq + i) * d_model + col;
                let p = &probs[((b * n_heads + h) * seq + i) * seq..][..i + 1];
                let dzi = &dz[ri..ri + d_head];
                // dP_ij = dz_i . v_j ; dV_j += P_ij dz_i
                let mut dot_pd = 0.0f64;
                for j in 0..=i {
                    let rj = (b * seq + j) * d_model + col;
                    let vj = &v[rj..rj + d_head];
                    let mut s = T::ZERO;
                    for (&a, &c) in dzi.iter().zip(vj) {
                        s += a * c;
                    }
                    dp[j] = s;
                    dot_pd += (s * p[j]).to_f64();
                    let pj = p[j];
                    for (g, &a) in dv[rj..rj + d_head].iter_mut().zip(dzi) {
                        *g += pj * a;
                    }
                }
                let dot_pd = T::from_f64(dot_pd);
                let qi = &q[ri..ri + d_head];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot_pd) * scale;
                    let rj = (b * seq + j) * d_model + col;
                    for t in 0..d_head {
                        dq[ri + t] += ds * k[rj + t];
                        dk[rj + t] += ds * qi[t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
