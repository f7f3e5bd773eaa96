//! Small numerical kernels for the hot loops.
//!
//! The slice kernels process fixed 8-wide chunks with straight-line
//! elementwise stages, which the compiler turns into SIMD; scalar tails use
//! the same operation order, so chunked and scalar paths agree bit for bit.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.93145751953125e-1;
const LN2_LO: f64 = 1.42860682030941723212e-6;
/// 1.5 * 2^52: adding it rounds to the nearest integer in the low mantissa
/// bits, and `bits + 1023 << 52` turns those bits into the exponent of
/// `2^n` directly.
const MAGIC: f64 = 6755399441055744.0;

/// Exponential specialized for softmax arguments (max-subtracted, so
/// `x <= 0`; small positive arguments up to ~0.5 are also exact).
///
/// Range reduction `x = n*ln2 + r`, degree-13 Taylor for `exp(r)`, and an
/// exponent-bit reconstruction of `2^n`. Relative error is a few ulp.
/// Arguments at or below -746 flush to zero through a zero scale factor
/// (their true value is subnormal); the clamps keep everything finite.
#[inline]
pub fn exp_nonpos(x: f64) -> f64 {
    let t = x.max(-746.0);
    let shifted = (t * LOG2_E + MAGIC).max(MAGIC - 1023.0);
    let n = shifted - MAGIC;
    let r = (t - n * LN2_HI) - n * LN2_LO;
    let p = taylor13(r);
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
fn taylor13(r: f64) -> f64 {
    let p = 1.0 / 6227020800.0; // 1/13!
    let p = p * r + 1.0 / 479001600.0;
    let p = p * r + 1.0 / 39916800.0;
    let p = p * r + 1.0 / 3628800.0;
    let p = p * r + 1.0 / 362880.0;
    let p = p * r + 1.0 / 40320.0;
    let p = p * r + 1.0 / 5040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    p * r + 1.0
}

/// AVX-512 lanes for the wide kernels; scalar fallbacks perform the same
/// per-element operations in the same order, so both paths agree bit for
/// bit and runtime dispatch never changes results.
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{LN2_HI, LN2_LO, LOG2_E, MAGIC};
    use std::arch::x86_64::*;

    #[inline]
    pub fn available() -> bool {
        is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("avx512dq")
    }

    /// exp(src - sub) elementwise, `sub` either a scalar or a per-element
    /// slice.
    #[target_feature(enable = "avx512f,avx512dq")]
    unsafe fn exp_core(dst: &mut [f64], src: &[f64], sub: Option<&[f64]>, sub_scalar: f64) {
        let n = dst.len();
        let log2e = _mm512_set1_pd(LOG2_E);
        let magic = _mm512_set1_pd(MAGIC);
        let magic_clamp = _mm512_set1_pd(MAGIC - 1023.0);
        let lo_clamp = _mm512_set1_pd(-746.0);
        let ln2_hi = _mm512_set1_pd(LN2_HI);
        let ln2_lo = _mm512_set1_pd(LN2_LO);
        let bias = _mm512_set1_epi64(1023);
        let sub_vec = _mm512_set1_pd(sub_scalar);
        let c: [__m512d; 14] = [
            _mm512_set1_pd(1.0 / 6227020800.0),
            _mm512_set1_pd(1.0 / 479001600.0),
            _mm512_set1_pd(1.0 / 39916800.0),
            _mm512_set1_pd(1.0 / 3628800.0),
            _mm512_set1_pd(1.0 / 362880.0),
            _mm512_set1_pd(1.0 / 40320.0),
            _mm512_set1_pd(1.0 / 5040.0),
            _mm512_set1_pd(1.0 / 720.0),
            _mm512_set1_pd(1.0 / 120.0),
            _mm512_set1_pd(1.0 / 24.0),
            _mm512_set1_pd(1.0 / 6.0),
            _mm512_set1_pd(0.5),
            _mm512_set1_pd(1.0),
            _mm512_set1_pd(1.0),
        ];
        let mut i = 0;
        while i + 8 <= n {
            let x = _mm512_loadu_pd(src.as_ptr().add(i));
            let s = match sub {
                Some(v) => _mm512_loadu_pd(v.as_ptr().add(i)),
                None => sub_vec,
            };
            let t = _mm512_max_pd(_mm512_sub_pd(x, s), lo_clamp);
            let shifted = _mm512_max_pd(
                _mm512_add_pd(_mm512_mul_pd(t, log2e), magic),
                magic_clamp,
            );
            let nf = _mm512_sub_pd(shifted, magic);
            let r = _mm512_sub_pd(
                _mm512_sub_pd(t, _mm512_mul_pd(nf, ln2_hi)),
                _mm512_mul_pd(nf, ln2_lo),
            );
            let mut p = c[0];
            for coeff in &c[1..] {
                p = _mm512_add_pd(_mm512_mul_pd(p, r), *coeff);
            }
            let scale_bits = _mm512_slli_epi64(
                _mm512_add_epi64(_mm512_castpd_si512(shifted), bias),
                52,
            );
            let out = _mm512_mul_pd(p, _mm512_castsi512_pd(scale_bits));
            _mm512_storeu_pd(dst.as_mut_ptr().add(i), out);
            i += 8;
        }
        for j in i..n {
            let s = match sub {
                Some(v) => v[j],
                None => sub_scalar,
            };
            dst[j] = super::exp_nonpos(src[j] - s);
        }
    }

    pub fn exp_sub_scalar(dst: &mut [f64], src: &[f64], sub: f64) {
        unsafe { exp_core(dst, src, None, sub) }
    }

    pub fn exp_sub_vec(dst: &mut [f64], src: &[f64], sub: &[f64]) {
        unsafe { exp_core(dst, src, Some(sub), 0.0) }
    }

    /// In-place exp over one buffer (same pipeline as `exp_core`).
    #[target_feature(enable = "avx512f,avx512dq")]
    pub unsafe fn exp_inplace(xs: &mut [f64]) {
        let n = xs.len();
        let log2e = _mm512_set1_pd(LOG2_E);
        let magic = _mm512_set1_pd(MAGIC);
        let magic_clamp = _mm512_set1_pd(MAGIC - 1023.0);
        let lo_clamp = _mm512_set1_pd(-746.0);
        let ln2_hi = _mm512_set1_pd(LN2_HI);
        let ln2_lo = _mm512_set1_pd(LN2_LO);
        let bias = _mm512_set1_epi64(1023);
        let c: [__m512d; 14] = [
            _mm512_set1_pd(1.0 / 6227020800.0),
            _mm512_set1_pd(1.0 / 479001600.0),
            _mm512_set1_pd(1.0 / 39916800.0),
            _mm512_set1_pd(1.0 / 3628800.0),
            _mm512_set1_pd(1.0 / 362880.0),
            _mm512_set1_pd(1.0 / 40320.0),
            _mm512_set1_pd(1.0 / 5040.0),
            _mm512_set1_pd(1.0 / 720.0),
            _mm512_set1_pd(1.0 / 120.0),
            _mm512_set1_pd(1.0 / 24.0),
            _mm512_set1_pd(1.0 / 6.0),
            _mm512_set1_pd(0.5),
            _mm512_set1_pd(1.0),
            _mm512_set1_pd(1.0),
        ];
        let mut i = 0;
        while i + 8 <= n {
            let x = _mm512_loadu_pd(xs.as_ptr().add(i));
            let t = _mm512_max_pd(x, lo_clamp);
            let shifted = _mm512_max_pd(
                _mm512_add_pd(_mm512_mul_pd(t, log2e), magic),
                magic_clamp,
            );
            let nf = _mm512_sub_pd(shifted, magic);
            let r = _mm512_sub_pd(
                _mm512_sub_pd(t, _mm512_mul_pd(nf, ln2_hi)),
                _mm512_mul_pd(nf, ln2_lo),
            );
            let mut p = c[0];
            for coeff in &c[1..] {
                p = _mm512_add_pd(_mm512_mul_pd(p, r), *coeff);
            }
            let scale_bits = _mm512_slli_epi64(
                _mm512_add_epi64(_mm512_castpd_si512(shifted), bias),
                52,
            );
            let out = _mm512_mul_pd(p, _mm512_castsi512_pd(scale_bits));
            _mm512_storeu_pd(xs.as_mut_ptr().add(i), out);
            i += 8;
        }
        for x in xs[i..].iter_mut() {
            *x = super::exp_nonpos(*x);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn neg_sqrt_scaled(xs: &mut [f64], factor: f64) {
        let n = xs.len();
        let zero = _mm512_set1_pd(0.0);
        let neg_factor = _mm512_set1_pd(-factor);
        let mut i = 0;
        while i + 8 <= n {
            let q = _mm512_max_pd(_mm512_loadu_pd(xs.as_ptr().add(i)), zero);
            let out = _mm512_mul_pd(_mm512_sqrt_pd(q), neg_factor);
            _mm512_storeu_pd(xs.as_mut_ptr().add(i), out);
            i += 8;
        }
        for x in xs[i..].iter_mut() {
            *x = -x.max(0.0).sqrt() * factor;
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn scale_by_inv_distance(coeff: &mut [f64], scores: &[f64], tau: f64, floor: f64) {
        let n = coeff.len();
        let neg_tau = _mm512_set1_pd(-tau);
        let floor_v = _mm512_set1_pd(floor);
        let inv_tau_v = _mm512_set1_pd(1.0 / tau);
        let inv_tau = 1.0 / tau;
        let mut i = 0;
        while i + 8 <= n {
            let s = _mm512_loadu_pd(scores.as_ptr().add(i));
            let d = _mm512_max_pd(_mm512_mul_pd(s, neg_tau), floor_v);
            let c = _mm512_loadu_pd(coeff.as_ptr().add(i));
            let out = _mm512_mul_pd(c, _mm512_div_pd(inv_tau_v, d));
            _mm512_storeu_pd(coeff.as_mut_ptr().add(i), out);
            i += 8;
        }
        for (c, s) in coeff[i..].iter_mut().zip(&scores[i..]) {
            let d = (s * -tau).max(floor);
            *c *= inv_tau / d;
        }
    }

    /// `dst[j] += sum_d (a[d] - bt[d*k + j])^2` accumulated in ascending
    /// `d` order (dst starts at zero).
    #[target_feature(enable = "avx512f")]
    pub unsafe fn sq_dist_row(dst: &mut [f64], a: &[f64], bt: &[f64], k: usize) {
        let d_dim = a.len();
        let mut j = 0;
        while j + 8 <= k {
            let mut acc = _mm512_set1_pd(0.0);
            for (d, &av) in a.iter().enumerate() {
                let avv = _mm512_set1_pd(av);
                let b = _mm512_loadu_pd(bt.as_ptr().add(d * k + j));
                let diff = _mm512_sub_pd(avv, b);
                acc = _mm512_add_pd(acc, _mm512_mul_pd(diff, diff));
            }
            _mm512_storeu_pd(dst.as_mut_ptr().add(j), acc);
            j += 8;
        }
        while j < k {
            let mut acc = 0.0;
            for d in 0..d_dim {
                let diff = a[d] - bt[d * k + j];
                acc += diff * diff;
            }
            dst[j] = acc;
            j += 1;
        }
    }

    /// `dst[j] += sum_d a[d] * bt[d*k + j]`, ascending `d`.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot_row(dst: &mut [f64], a: &[f64], bt: &[f64], k: usize) {
        let d_dim = a.len();
        let mut j = 0;
        while j + 8 <= k {
            let mut acc = _mm512_set1_pd(0.0);
            for (d, &av) in a.iter().enumerate() {
                let avv = _mm512_set1_pd(av);
                let b = _mm512_loadu_pd(bt.as_ptr().add(d * k + j));
                acc = _mm512_add_pd(acc, _mm512_mul_pd(avv, b));
            }
            _mm512_storeu_pd(dst.as_mut_ptr().add(j), acc);
            j += 8;
        }
        while j < k {
            let mut acc = 0.0;
            for d in 0..d_dim {
                acc += a[d] * bt[d * k + j];
            }
            dst[j] = acc;
            j += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn simd_available() -> bool {
    simd::available()
}

#[cfg(not(target_arch = "x86_64"))]
#[inline]
fn simd_available() -> bool {
    false
}

/// In-place `exp` over a slice of max-subtracted softmax arguments.
pub fn exp_nonpos_slice(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        unsafe { simd::exp_inplace(xs) };
        return;
    }
    for x in xs.iter_mut() {
        *x = exp_nonpos(*x);
    }
}

/// `dst = exp(src - m)` for a row with a scalar max.
pub fn exp_sub_scalar(dst: &mut [f64], src: &[f64], m: f64) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        simd::exp_sub_scalar(dst, src, m);
        return;
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d = exp_nonpos(*s - m);
    }
}

/// `dst = exp(src - sub)` with a per-element subtrahend (column maxima).
pub fn exp_sub_vec(dst: &mut [f64], src: &[f64], sub: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        simd::exp_sub_vec(dst, src, sub);
        return;
    }
    for ((d, s), m) in dst.iter_mut().zip(src).zip(sub) {
        *d = exp_nonpos(*s - m);
    }
}

/// `x[i] = -sqrt(x[i].max(0)) * factor`; the negative-Euclidean score
/// transform.
pub fn neg_sqrt_scaled(xs: &mut [f64], factor: f64) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        unsafe { simd::neg_sqrt_scaled(xs, factor) };
        return;
    }
    for x in xs.iter_mut() {
        *x = -x.max(0.0).sqrt() * factor;
    }
}

/// `coeff[i] *= inv_tau / max(-score[i] * tau, floor)`; the per-pair
/// distance division of the negative-Euclidean gradient.
pub fn scale_by_inv_distance(coeff: &mut [f64], scores: &[f64], tau: f64, floor: f64) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        unsafe { simd::scale_by_inv_distance(coeff, scores, tau, floor) };
        return;
    }
    let inv_tau = 1.0 / tau;
    for (c, s) in coeff.iter_mut().zip(scores) {
        let d = (s * -tau).max(floor);
        *c *= inv_tau / d;
    }
}

/// One row of pairwise squared distances: `dst[j] = ||a - bt[.., j]||^2`
/// with `bt` holding the second batch transposed (`d x k`), ascending-`d`
/// accumulation.
pub fn sq_dist_row(dst: &mut [f64], a: &[f64], bt: &[f64], k: usize) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        unsafe { simd::sq_dist_row(dst, a, bt, k) };
        return;
    }
    for (j, out) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (d, &av) in a.iter().enumerate() {
            let diff = av - bt[d * k + j];
            acc += diff * diff;
        }
        *out = acc;
    }
}

/// One row of pairwise dot products against a transposed batch.
pub fn dot_row(dst: &mut [f64], a: &[f64], bt: &[f64], k: usize) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        unsafe { simd::dot_row(dst, a, bt, k) };
        return;
    }
    for (j, out) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (d, &av) in a.iter().enumerate() {
            acc += av * bt[d * k + j];
        }
        *out = acc;
    }
}

/// Sum with a fixed 4-lane tree: lane `w` accumulates elements at positions
/// `4c + w`, and the final combine is `(l0 + l1) + (l2 + l3)`. The identical
/// tree drives both row sums and transposed column sums, so the two softmax
/// directions stay bitwise mirror images of each other.
#[inline]
pub fn lane_sum(row: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = row.chunks_exact(4);
    let rem = chunks.remainder();
    for c in chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    for (w, v) in rem.iter().enumerate() {
        acc[w] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Column sums of a row-major `k x k` matrix with the [`lane_sum`] tree
/// applied down each column (lane = row index mod 4).
pub fn column_sums_mirrored(e: &[f64], k: usize) -> Vec<f64> {
    let mut lanes = vec![0.0f64; 4 * k];
    for i in 0..k {
        let row = &e[i * k..(i + 1) * k];
        let lane = &mut lanes[(i % 4) * k..(i % 4 + 1) * k];
        for (a, v) in lane.iter_mut().zip(row) {
            *a += v;
        }
    }
    let (l0, rest) = lanes.split_at(k);
    let (l1, rest) = rest.split_at(k);
    let (l2, l3) = rest.split_at(k);
    (0..k)
        .map(|j| (l0[j] + l1[j]) + (l2[j] + l3[j]))
        .collect()
}

/// Plain vectorizable column sums for quantities without a bit-exactness
/// contract (gradient coefficient matrices).
pub fn column_sums_fast(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; cols];
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

/// Maximum over a slice (order-free for non-NaN values); multi-lane to break
/// the dependency chain.
#[inline]
pub fn lane_max(row: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let chunks = row.chunks_exact(4);
    let rem = chunks.remainder();
    for c in chunks {
        acc[0] = acc[0].max(c[0]);
        acc[1] = acc[1].max(c[1]);
        acc[2] = acc[2].max(c[2]);
        acc[3] = acc[3].max(c[3]);
    }
    for (w, v) in rem.iter().enumerate() {
        acc[w] = acc[w].max(*v);
    }
    acc[0].max(acc[1]).max(acc[2]).max(acc[3])
}

/// Column maxima of a row-major `k x k` matrix.
pub fn column_maxes(s: &[f64], k: usize) -> Vec<f64> {
    let mut maxes = vec![f64::NEG_INFINITY; k];
    for i in 0..k {
        let row = &s[i * k..(i + 1) * k];
        for (m, v) in maxes.iter_mut().zip(row) {
            *m = m.max(*v);
        }
    }
    maxes
}
