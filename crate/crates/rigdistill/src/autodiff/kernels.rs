//! Forward and backward kernels for the fixed operator set.
//!
//! Feature maps are time-major (`[len, channels]`, channel axis contiguous)
//! and dense conv weights are laid out `[c_out][kernel * c_in]`, so each
//! output position reads one contiguous window slice. The blocked dot-product
//! below is what the single-frame inference budget rests on; everything else
//! is plain loops.

use rayon::prelude::*;

use crate::tensor::Real;

const LANES: usize = 8;
/// Multiply-accumulate count above which a dense conv is worth farming out
/// to the thread pool.
const PAR_MAC_THRESHOLD: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn output_len(&self, l_in: usize) -> usize {
        (l_in + self.pad_left + self.pad_right - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.kernel * (self.c_in / self.groups)
    }
}

#[inline]
fn fma<T: Real>(a: T, b: T, acc: T) -> T {
    a.fma(b, acc)
}

/// Four simultaneous dot products against one weight row. Keeping four
/// accumulators alive amortizes the weight stream over four output
/// positions, which is what keeps the big conv layers out of the
/// bandwidth-bound regime. The single-precision instantiation dispatches to
/// an explicit SIMD kernel: the broadcast-one-row-against-four pattern is
/// exactly what the auto-vectorizer refuses to vectorize.
#[inline]
fn dot4<T: Real>(w: &[T], x0: &[T], x1: &[T], x2: &[T], x3: &[T]) -> [T; 4] {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32, so the slices are &[f32] with identical layout.
        let d = unsafe {
            dot4_f32(
                std::slice::from_raw_parts(w.as_ptr() as *const f32, w.len()),
                std::slice::from_raw_parts(x0.as_ptr() as *const f32, x0.len()),
                std::slice::from_raw_parts(x1.as_ptr() as *const f32, x1.len()),
                std::slice::from_raw_parts(x2.as_ptr() as *const f32, x2.len()),
                std::slice::from_raw_parts(x3.as_ptr() as *const f32, x3.len()),
            )
        };
        // Exact: f32 -> f64 -> T=f32 round-trips bit-for-bit.
        return d.map(|v| T::from_f64(v as f64));
    }
    dot4_generic(w, x0, x1, x2, x3)
}

#[inline]
fn dot4_generic<T: Real>(w: &[T], x0: &[T], x1: &[T], x2: &[T], x3: &[T]) -> [T; 4] {
    let n = w.len();
    let chunks = n / LANES;
    let mut a0 = [T::ZERO; LANES];
    let mut a1 = [T::ZERO; LANES];
    let mut a2 = [T::ZERO; LANES];
    let mut a3 = [T::ZERO; LANES];
    for i in 0..chunks {
        let base = i * LANES;
        let wv: [T; LANES] = w[base..base + LANES].try_into().unwrap();
        let v0: [T; LANES] = x0[base..base + LANES].try_into().unwrap();
        let v1: [T; LANES] = x1[base..base + LANES].try_into().unwrap();
        let v2: [T; LANES] = x2[base..base + LANES].try_into().unwrap();
        let v3: [T; LANES] = x3[base..base + LANES].try_into().unwrap();
        for lane in 0..LANES {
            a0[lane] = fma(wv[lane], v0[lane], a0[lane]);
            a1[lane] = fma(wv[lane], v1[lane], a1[lane]);
            a2[lane] = fma(wv[lane], v2[lane], a2[lane]);
            a3[lane] = fma(wv[lane], v3[lane], a3[lane]);
        }
    }
    let mut out = [T::ZERO; 4];
    for lane in 0..LANES {
        out[0] += a0[lane];
        out[1] += a1[lane];
        out[2] += a2[lane];
        out[3] += a3[lane];
    }
    for i in chunks * LANES..n {
        out[0] = fma(w[i], x0[i], out[0]);
        out[1] = fma(w[i], x1[i], out[1]);
        out[2] = fma(w[i], x2[i], out[2]);
        out[3] = fma(w[i], x3[i], out[3]);
    }
    out
}

/// Eight dot products against one weight row; the f32 AVX-512 path keeps
/// eight accumulators live so each weight vector is loaded once per eight
/// output positions.
#[inline]
fn dot8<T: Real>(w: &[T], xs: [&[T]; 8]) -> [T; 8] {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32.
        let out = unsafe {
            dot8_f32_avx512(
                std::slice::from_raw_parts(w.as_ptr() as *const f32, w.len()),
                xs.map(|x| std::slice::from_raw_parts(x.as_ptr() as *const f32, x.len())),
            )
        };
        return out.map(|v| T::from_f64(v as f64));
    }
    let a = dot4(w, xs[0], xs[1], xs[2], xs[3]);
    let b = dot4(w, xs[4], xs[5], xs[6], xs[7]);
    [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
}

/// Two weight rows against the same eight windows: each x vector is loaded
/// once and feeds two FMA chains, halving load pressure per MAC.
#[inline]
fn dot8x2<T: Real>(w0: &[T], w1: &[T], xs: [&[T]; 8]) -> ([T; 8], [T; 8]) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32.
        let (a, b) = unsafe {
            dot8x2_f32_avx512(
                std::slice::from_raw_parts(w0.as_ptr() as *const f32, w0.len()),
                std::slice::from_raw_parts(w1.as_ptr() as *const f32, w1.len()),
                xs.map(|x| std::slice::from_raw_parts(x.as_ptr() as *const f32, x.len())),
            )
        };
        return (a.map(|v| T::from_f64(v as f64)), b.map(|v| T::from_f64(v as f64)));
    }
    (dot8(w0, xs), dot8(w1, xs))
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
fn dot8x2_f32_avx512(w0: &[f32], w1: &[f32], xs: [&[f32]; 8]) -> ([f32; 8], [f32; 8]) {
    use std::arch::x86_64::*;
    let n = w0.len();
    let chunks = n / 16;
    // SAFETY: avx512f is a compile-time target feature of this build, and
    // all loads stay inside the slices.
    unsafe {
        let mut acc0 = [_mm512_setzero_ps(); 8];
        let mut acc1 = [_mm512_setzero_ps(); 8];
        for i in 0..chunks {
            let p = i * 16;
            let wv0 = _mm512_loadu_ps(w0.as_ptr().add(p));
            let wv1 = _mm512_loadu_ps(w1.as_ptr().add(p));
            for k in 0..8 {
                let xv = _mm512_loadu_ps(xs[k].as_ptr().add(p));
                acc0[k] = _mm512_fmadd_ps(wv0, xv, acc0[k]);
                acc1[k] = _mm512_fmadd_ps(wv1, xv, acc1[k]);
            }
        }
        let mut out0 = [0.0f32; 8];
        let mut out1 = [0.0f32; 8];
        for k in 0..8 {
            out0[k] = _mm512_reduce_add_ps(acc0[k]);
            out1[k] = _mm512_reduce_add_ps(acc1[k]);
        }
        for i in chunks * 16..n {
            for k in 0..8 {
                out0[k] = w0[i].mul_add(xs[k][i], out0[k]);
                out1[k] = w1[i].mul_add(xs[k][i], out1[k]);
            }
        }
        (out0, out1)
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
fn dot8_f32_avx512(w: &[f32], xs: [&[f32]; 8]) -> [f32; 8] {
    use std::arch::x86_64::*;
    let n = w.len();
    let chunks = n / 16;
    // SAFETY: avx512f is a compile-time target feature of this build, and
    // all loads stay inside the slices.
    unsafe {
        let mut acc = [_mm512_setzero_ps(); 8];
        for i in 0..chunks {
            let p = i * 16;
            let wv = _mm512_loadu_ps(w.as_ptr().add(p));
            for (a, x) in acc.iter_mut().zip(&xs) {
                *a = _mm512_fmadd_ps(wv, _mm512_loadu_ps(x.as_ptr().add(p)), *a);
            }
        }
        let mut out = [0.0f32; 8];
        for (o, a) in out.iter_mut().zip(acc) {
            *o = _mm512_reduce_add_ps(a);
        }
        for i in chunks * 16..n {
            for (o, x) in out.iter_mut().zip(&xs) {
                *o = w[i].mul_add(x[i], *o);
            }
        }
        out
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline]
fn dot4_f32(w: &[f32], x0: &[f32], x1: &[f32], x2: &[f32], x3: &[f32]) -> [f32; 4] {
    use std::arch::x86_64::*;
    let n = w.len();
    let chunks = n / 16;
    // SAFETY: avx512f is a compile-time target feature of this build, and
    // all loads stay inside the slices.
    unsafe {
        let mut a0 = _mm512_setzero_ps();
        let mut a1 = _mm512_setzero_ps();
        let mut a2 = _mm512_setzero_ps();
        let mut a3 = _mm512_setzero_ps();
        for i in 0..chunks {
            let p = i * 16;
            let wv = _mm512_loadu_ps(w.as_ptr().add(p));
            a0 = _mm512_fmadd_ps(wv, _mm512_loadu_ps(x0.as_ptr().add(p)), a0);
            a1 = _mm512_fmadd_ps(wv, _mm512_loadu_ps(x1.as_ptr().add(p)), a1);
            a2 = _mm512_fmadd_ps(wv, _mm512_loadu_ps(x2.as_ptr().add(p)), a2);
            a3 = _mm512_fmadd_ps(wv, _mm512_loadu_ps(x3.as_ptr().add(p)), a3);
        }
        let mut out = [
            _mm512_reduce_add_ps(a0),
            _mm512_reduce_add_ps(a1),
            _mm512_reduce_add_ps(a2),
            _mm512_reduce_add_ps(a3),
        ];
        for i in chunks * 16..n {
            out[0] = w[i].mul_add(x0[i], out[0]);
            out[1] = w[i].mul_add(x1[i], out[1]);
            out[2] = w[i].mul_add(x2[i], out[2]);
            out[3] = w[i].mul_add(x3[i], out[3]);
        }
        out
    }
}

#[cfg(all(
    target_arch = "x86_64",
    target_feature = "fma",
    not(target_feature = "avx512f")
))]
#[inline]
fn dot4_f32(w: &[f32], x0: &[f32], x1: &[f32], x2: &[f32], x3: &[f32]) -> [f32; 4] {
    use std::arch::x86_64::*;
    let n = w.len();
    let chunks = n / 8;
    // SAFETY: fma/avx are compile-time target features of this build, and
    // all loads stay inside the slices.
    unsafe {
        let mut a0 = _mm256_setzero_ps();
        let mut a1 = _mm256_setzero_ps();
        let mut a2 = _mm256_setzero_ps();
        let mut a3 = _mm256_setzero_ps();
        for i in 0..chunks {
            let p = i * 8;
            let wv = _mm256_loadu_ps(w.as_ptr().add(p));
            a0 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x0.as_ptr().add(p)), a0);
            a1 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x1.as_ptr().add(p)), a1);
            a2 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x2.as_ptr().add(p)), a2);
            a3 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x3.as_ptr().add(p)), a3);
        }
        let hsum = |v: __m256| -> f32 {
            let hi = _mm256_extractf128_ps(v, 1);
            let lo = _mm256_castps256_ps128(v);
            let s = _mm_add_ps(lo, hi);
            let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
            let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
            _mm_cvtss_f32(s)
        };
        let mut out = [hsum(a0), hsum(a1), hsum(a2), hsum(a3)];
        for i in chunks * 8..n {
            out[0] = w[i].mul_add(x0[i], out[0]);
            out[1] = w[i].mul_add(x1[i], out[1]);
            out[2] = w[i].mul_add(x2[i], out[2]);
            out[3] = w[i].mul_add(x3[i], out[3]);
        }
        out
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "fma")))]
#[inline]
fn dot4_f32(w: &[f32], x0: &[f32], x1: &[f32], x2: &[f32], x3: &[f32]) -> [f32; 4] {
    dot4_generic(w, x0, x1, x2, x3)
}

/// `row[co] = bias[co] + sum_j x[j] * wt[j][co]` — one output position of a
/// small-kernel conv, accumulated register-wide over the channel axis.
#[inline]
fn broadcast_panel<T: Real>(x: &[T], wt: &[T], bias: &[T], kc: usize, c_out: usize, row: &mut [T]) {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32, identical layout.
        unsafe {
            broadcast_panel_f32(
                std::slice::from_raw_parts(x.as_ptr() as *const f32, x.len()),
                std::slice::from_raw_parts(wt.as_ptr() as *const f32, wt.len()),
                std::slice::from_raw_parts(bias.as_ptr() as *const f32, bias.len()),
                kc,
                c_out,
                std::slice::from_raw_parts_mut(row.as_mut_ptr() as *mut f32, row.len()),
            );
        }
        return;
    }
    row.copy_from_slice(bias);
    for j in 0..kc {
        let xv = x[j];
        let wrow = &wt[j * c_out..(j + 1) * c_out];
        for co in 0..c_out {
            row[co] = fma(xv, wrow[co], row[co]);
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
fn broadcast_panel_f32(x: &[f32], wt: &[f32], bias: &[f32], kc: usize, c_out: usize, row: &mut [f32]) {
    use std::arch::x86_64::*;
    let tiles = c_out / 16;
    // SAFETY: avx512f is a compile-time target feature; tile indexing stays
    // inside c_out and wt is kc * c_out long.
    unsafe {
        for t in 0..tiles {
            let off = t * 16;
            let mut acc = _mm512_loadu_ps(bias.as_ptr().add(off));
            for j in 0..kc {
                let xv = _mm512_set1_ps(x[j]);
                let wv = _mm512_loadu_ps(wt.as_ptr().add(j * c_out + off));
                acc = _mm512_fmadd_ps(xv, wv, acc);
            }
            _mm512_storeu_ps(row.as_mut_ptr().add(off), acc);
        }
        for co in tiles * 16..c_out {
            let mut acc = bias[co];
            for j in 0..kc {
                acc = x[j].mul_add(wt[j * c_out + co], acc);
            }
            row[co] = acc;
        }
    }
}

#[cfg(all(
    target_arch = "x86_64",
    target_feature = "fma",
    not(target_feature = "avx512f")
))]
fn broadcast_panel_f32(x: &[f32], wt: &[f32], bias: &[f32], kc: usize, c_out: usize, row: &mut [f32]) {
    use std::arch::x86_64::*;
    let tiles = c_out / 8;
    // SAFETY: fma/avx are compile-time target features; tile indexing stays
    // inside c_out and wt is kc * c_out long.
    unsafe {
        for t in 0..tiles {
            let off = t * 8;
            let mut acc = _mm256_loadu_ps(bias.as_ptr().add(off));
            for j in 0..kc {
                let xv = _mm256_set1_ps(x[j]);
                let wv = _mm256_loadu_ps(wt.as_ptr().add(j * c_out + off));
                acc = _mm256_fmadd_ps(xv, wv, acc);
            }
            _mm256_storeu_ps(row.as_mut_ptr().add(off), acc);
        }
        for co in tiles * 8..c_out {
            let mut acc = bias[co];
            for j in 0..kc {
                acc = x[j].mul_add(wt[j * c_out + co], acc);
            }
            row[co] = acc;
        }
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "fma")))]
fn broadcast_panel_f32(x: &[f32], wt: &[f32], bias: &[f32], kc: usize, c_out: usize, row: &mut [f32]) {
    row.copy_from_slice(&bias[..c_out]);
    for j in 0..kc {
        let xv = x[j];
        let wrow = &wt[j * c_out..(j + 1) * c_out];
        for co in 0..c_out {
            row[co] = xv.mul_add(wrow[co], row[co]);
        }
    }
}

#[inline]
pub fn dot<T: Real>(w: &[T], x: &[T]) -> T {
    let n = w.len();
    let chunks = n / LANES;
    let mut acc = [T::ZERO; LANES];
    for i in 0..chunks {
        let base = i * LANES;
        let wv: [T; LANES] = w[base..base + LANES].try_into().unwrap();
        let xv: [T; LANES] = x[base..base + LANES].try_into().unwrap();
        for lane in 0..LANES {
            acc[lane] = fma(wv[lane], xv[lane], acc[lane]);
        }
    }
    let mut sum = T::ZERO;
    for lane in 0..LANES {
        sum += acc[lane];
    }
    for i in chunks * LANES..n {
        sum = fma(w[i], x[i], sum);
    }
    sum
}

/// Copy a time-major map into a zero-padded buffer along the time axis.
fn pad_time<T: Real>(input: &[T], l_in: usize, c: usize, pad_left: usize, pad_right: usize) -> Vec<T> {
    let mut padded = vec![T::ZERO; (l_in + pad_left + pad_right) * c];
    padded[pad_left * c..(pad_left + l_in) * c].copy_from_slice(input);
    padded
}

/// 1-D cross-correlation. `input` is `[l_in, c_in]` time-major, `weight` is
/// `[c_out][kernel * c_in / groups]`, `bias` is `[c_out]`. Returns the
/// `[l_out, c_out]` map. Shapes are validated by the callers.
pub fn conv1d_forward<T: Real>(input: &[T], l_in: usize, spec: &ConvSpec, weight: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; spec.output_len(l_in) * spec.c_out];
    conv1d_forward_into(input, l_in, spec, weight, bias, &mut out);
    out
}

/// As [`conv1d_forward`] but writing into a caller-provided buffer, so the
/// streaming path can recycle its scratch.
pub fn conv1d_forward_into<T: Real>(
    input: &[T],
    l_in: usize,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    conv1d_core(input, l_in, spec, weight, bias, out, false);
}

/// Convolution with the following GELU fused into each output block while it
/// is still cache-resident. Bit-identical to conv followed by gelu.
pub fn conv1d_forward_gelu_into<T: Real>(
    input: &[T],
    l_in: usize,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    conv1d_core(input, l_in, spec, weight, bias, out, true);
}

fn conv1d_core<T: Real>(
    input: &[T],
    l_in: usize,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    fuse_gelu: bool,
) {
    let l_out = spec.output_len(l_in);
    let c_in = spec.c_in;
    let c_out = spec.c_out;
    assert_eq!(out.len(), l_out * c_out);

    let padded_storage;
    let x: &[T] = if spec.pad_left > 0 || spec.pad_right > 0 {
        padded_storage = pad_time(input, l_in, c_in, spec.pad_left, spec.pad_right);
        &padded_storage
    } else {
        input
    };

    if spec.groups == 1 && spec.kernel * c_in < 32 {
        // Narrow receptive fields (the waveform front end) leave dot
        // products too short to vectorize; broadcast each input sample
        // against a transposed weight row instead, which runs wide over the
        // output channels.
        let kc = spec.kernel * c_in;
        let mut wt = vec![T::ZERO; kc * c_out];
        for co in 0..c_out {
            for j in 0..kc {
                wt[j * c_out + co] = weight[co * kc + j];
            }
        }
        let stride_c = spec.stride * c_in;
        let run = |l0: usize, rows: &mut [T]| {
            for (p, row) in rows.chunks_exact_mut(c_out).enumerate() {
                broadcast_panel(&x[(l0 + p) * stride_c..], &wt, bias, kc, c_out, row);
            }
            if fuse_gelu {
                gelu_inplace_serial(rows);
            }
        };
        let macs = l_out * c_out * kc;
        if macs >= PAR_MAC_THRESHOLD {
            out.par_chunks_mut(16 * c_out).enumerate().for_each(|(blk, rows)| run(blk * 16, rows));
        } else {
            for (blk, rows) in out.chunks_mut(16 * c_out).enumerate() {
                run(blk * 16, rows);
            }
        }
    } else if spec.groups == 1 {
        let kc = spec.kernel * c_in;
        let stride_c = spec.stride * c_in;
        // Positions per block: large enough to amortize the weight stream
        // (each weight row is read once per block), small enough that the
        // block's input span stays cache-resident across the channel loop.
        const POS_BLOCK: usize = 8;
        let run = |l0: usize, rows: &mut [T]| {
            let block = rows.len() / c_out;
            // Gather the block's windows into a contiguous tile first. The
            // raw windows sit 2048 bytes apart, which aliases L1 sets when
            // eight of them stream at once; the packed tile also gets reused
            // across every output channel.
            let mut xtile = vec![T::ZERO; block * kc];
            for p in 0..block {
                let l = l0 + p;
                xtile[p * kc..(p + 1) * kc].copy_from_slice(&x[l * stride_c..l * stride_c + kc]);
            }
            let win = |p: usize| &xtile[p * kc..(p + 1) * kc];
            let oct_end = (block / 8) * 8;
            // Full 8-position groups, two channels at a time.
            for cp in 0..c_out / 2 {
                let co = 2 * cp;
                let w0 = &weight[co * kc..(co + 1) * kc];
                let w1 = &weight[(co + 1) * kc..(co + 2) * kc];
                let mut p0 = 0;
                while p0 < oct_end {
                    let windows = [win(p0), win(p0 + 1), win(p0 + 2), win(p0 + 3),
                                   win(p0 + 4), win(p0 + 5), win(p0 + 6), win(p0 + 7)];
                    let (d0, d1) = dot8x2(w0, w1, windows);
                    for p in 0..8 {
                        rows[(p0 + p) * c_out + co] = d0[p] + bias[co];
                        rows[(p0 + p) * c_out + co + 1] = d1[p] + bias[co + 1];
                    }
                    p0 += 8;
                }
            }
            // Tail positions for paired channels; all positions for an odd
            // final channel.
            let paired = c_out & !1;
            for co in 0..c_out {
                let begin = if co < paired { oct_end } else { 0 };
                if begin >= block {
                    continue;
                }
                let wrow = &weight[co * kc..(co + 1) * kc];
                let b = bias[co];
                let mut p = begin;
                while p + 4 <= block {
                    let d = dot4(wrow, win(p), win(p + 1), win(p + 2), win(p + 3));
                    for (i, v) in d.into_iter().enumerate() {
                        rows[(p + i) * c_out + co] = v + b;
                    }
                    p += 4;
                }
                while p < block {
                    rows[p * c_out + co] = dot(wrow, win(p)) + b;
                    p += 1;
                }
            }
            if fuse_gelu {
                gelu_inplace_serial(rows);
            }
        };
        let macs = l_out * c_out * kc;
        if macs >= PAR_MAC_THRESHOLD {
            out.par_chunks_mut(POS_BLOCK * c_out)
                .enumerate()
                .for_each(|(blk, rows)| run(blk * POS_BLOCK, rows));
        } else {
            for (blk, rows) in out.chunks_mut(POS_BLOCK * c_out).enumerate() {
                run(blk * POS_BLOCK, rows);
            }
        }
    } else if spec.groups == c_in && c_out == c_in {
        // Depthwise: each tap is an elementwise product of two channel rows,
        // which vectorizes directly.
        let mut wt = vec![T::ZERO; spec.kernel * c_out];
        for co in 0..c_out {
            for tap in 0..spec.kernel {
                wt[tap * c_out + co] = weight[co * spec.kernel + tap];
            }
        }
        for l in 0..l_out {
            let row = &mut out[l * c_out..(l + 1) * c_out];
            row.copy_from_slice(bias);
            for tap in 0..spec.kernel {
                let xrow = &x[(l * spec.stride + tap) * c_in..][..c_in];
                let wrow = &wt[tap * c_out..(tap + 1) * c_out];
                for co in 0..c_out {
                    row[co] = fma(wrow[co], xrow[co], row[co]);
                }
            }
        }
        if fuse_gelu {
            gelu_inplace_serial(out);
        }
    } else {
        let c_in_g = c_in / spec.groups;
        let c_out_g = c_out / spec.groups;
        let kc = spec.kernel * c_in_g;
        for l in 0..l_out {
            let row = &mut out[l * c_out..(l + 1) * c_out];
            for co in 0..c_out {
                let g = co / c_out_g;
                let mut acc = bias[co];
                for tap in 0..spec.kernel {
                    let xrow = &x[(l * spec.stride + tap) * c_in + g * c_in_g..][..c_in_g];
                    let wrow = &weight[co * kc + tap * c_in_g..][..c_in_g];
                    for ci in 0..c_in_g {
                        acc = fma(wrow[ci], xrow[ci], acc);
                    }
                }
                row[co] = acc;
            }
        }
        if fuse_gelu {
            gelu_inplace_serial(out);
        }
    }
}

/// Backward of `conv1d_forward`. Returns `(d_input, d_weight, d_bias)`.
pub fn conv1d_backward<T: Real>(
    input: &[T],
    l_in: usize,
    spec: &ConvSpec,
    weight: &[T],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let l_out = spec.output_len(l_in);
    let c_in = spec.c_in;
    let c_out = spec.c_out;
    let c_in_g = c_in / spec.groups;
    let c_out_g = c_out / spec.groups;
    let kc = spec.kernel * c_in_g;

    let padded_storage;
    let x: &[T] = if spec.pad_left > 0 || spec.pad_right > 0 {
        padded_storage = pad_time(input, l_in, c_in, spec.pad_left, spec.pad_right);
        &padded_storage
    } else {
        input
    };

    let l_pad = l_in + spec.pad_left + spec.pad_right;
    let mut d_x = vec![T::ZERO; l_pad * c_in];
    let mut d_w = vec![T::ZERO; weight.len()];
    let mut d_b = vec![T::ZERO; c_out];

    for l in 0..l_out {
        let grow = &d_out[l * c_out..(l + 1) * c_out];
        for co in 0..c_out {
            let g = grow[co];
            d_b[co] += g;
            let grp = co / c_out_g;
            for tap in 0..spec.kernel {
                let off = (l * spec.stride + tap) * c_in + grp * c_in_g;
                let xrow = &x[off..off + c_in_g];
                let dxrow = &mut d_x[off..off + c_in_g];
                let wrow = &weight[co * kc + tap * c_in_g..][..c_in_g];
                let dwrow = &mut d_w[co * kc + tap * c_in_g..][..c_in_g];
                for ci in 0..c_in_g {
                    dwrow[ci] = fma(g, xrow[ci], dwrow[ci]);
                    dxrow[ci] = fma(g, wrow[ci], dxrow[ci]);
                }
            }
        }
    }

    let d_input = d_x[spec.pad_left * c_in..(spec.pad_left + l_in) * c_in].to_vec();
    (d_input, d_w, d_b)
}

/// Group normalization over `[l, c]` time-major input: statistics are taken
/// per group of channels across all time steps, then the per-channel affine
/// is applied.
pub fn group_norm_forward<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    groups: usize,
    eps: f64,
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = vec![T::ZERO; input.len()];
    group_norm_forward_into(input, l, c, groups, eps, gamma, beta, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward_into<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    groups: usize,
    eps: f64,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) {
    let (mean, inv_std) = group_stats(input, l, c, groups, eps);
    // Expand per-group statistics to per-channel vectors so the normalize
    // pass is a contiguous map.
    let cpg = c / groups;
    let mut ch_mean = vec![T::ZERO; c];
    let mut scale = vec![T::ZERO; c];
    for ci in 0..c {
        let g = ci / cpg;
        ch_mean[ci] = mean[g];
        scale[ci] = gamma[ci] * inv_std[g];
    }
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        let orow = &mut out[li * c..(li + 1) * c];
        for ci in 0..c {
            orow[ci] = fma(row[ci] - ch_mean[ci], scale[ci], beta[ci]);
        }
    }
}

fn group_stats<T: Real>(input: &[T], l: usize, c: usize, groups: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let n = T::from_f64((l * cpg) as f64);
    // Accumulate per channel first (contiguous), then fold into groups.
    let mut ch_sum = vec![T::ZERO; c];
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        for ci in 0..c {
            ch_sum[ci] += row[ci];
        }
    }
    let mut mean = vec![T::ZERO; groups];
    for ci in 0..c {
        mean[ci / cpg] += ch_sum[ci];
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    let mut ch_mean = vec![T::ZERO; c];
    for ci in 0..c {
        ch_mean[ci] = mean[ci / cpg];
    }
    let mut ch_var = vec![T::ZERO; c];
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        for ci in 0..c {
            let d = row[ci] - ch_mean[ci];
            ch_var[ci] = fma(d, d, ch_var[ci]);
        }
    }
    let mut var = vec![T::ZERO; groups];
    for ci in 0..c {
        var[ci / cpg] += ch_var[ci];
    }
    let inv_std = var
        .iter()
        .map(|v| T::ONE / (*v / n + T::from_f64(eps)).sqrt())
        .collect();
    (mean, inv_std)
}

pub fn group_norm_backward<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    groups: usize,
    eps: f64,
    gamma: &[T],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (mean, inv_std) = group_stats(input, l, c, groups, eps);
    let cpg = c / groups;
    let n = T::from_f64((l * cpg) as f64);

    let mut d_gamma = vec![T::ZERO; c];
    let mut d_beta = vec![T::ZERO; c];
    // Per-group sums of d_xhat and d_xhat * xhat.
    let mut sum_dxh = vec![T::ZERO; groups];
    let mut sum_dxh_xh = vec![T::ZERO; groups];
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        let grow = &d_out[li * c..(li + 1) * c];
        for ci in 0..c {
            let g = ci / cpg;
            let xhat = (row[ci] - mean[g]) * inv_std[g];
            d_gamma[ci] += grow[ci] * xhat;
            d_beta[ci] += grow[ci];
            let dxh = grow[ci] * gamma[ci];
            sum_dxh[g] += dxh;
            sum_dxh_xh[g] += dxh * xhat;
        }
    }

    let mut d_x = vec![T::ZERO; input.len()];
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        let grow = &d_out[li * c..(li + 1) * c];
        let dxrow = &mut d_x[li * c..(li + 1) * c];
        for ci in 0..c {
            let g = ci / cpg;
            let xhat = (row[ci] - mean[g]) * inv_std[g];
            let dxh = grow[ci] * gamma[ci];
            dxrow[ci] = inv_std[g] * (dxh - sum_dxh[g] / n - xhat * (sum_dxh_xh[g] / n));
        }
    }
    (d_x, d_gamma, d_beta)
}

/// Layer normalization across the channel axis, per time step.
pub fn layer_norm_forward<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    eps: f64,
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = vec![T::ZERO; input.len()];
    layer_norm_forward_into(input, l, c, eps, gamma, beta, &mut out);
    out
}

pub fn layer_norm_forward_into<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    eps: f64,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) {
    let n = T::from_f64(c as f64);
    let epsv = T::from_f64(eps);
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        let orow = &mut out[li * c..(li + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        let inv_std = T::ONE / (var / n + epsv).sqrt();
        for ci in 0..c {
            orow[ci] = gamma[ci] * (row[ci] - mean) * inv_std + beta[ci];
        }
    }
}

pub fn layer_norm_backward<T: Real>(
    input: &[T],
    l: usize,
    c: usize,
    eps: f64,
    gamma: &[T],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_f64(c as f64);
    let epsv = T::from_f64(eps);
    let mut d_x = vec![T::ZERO; input.len()];
    let mut d_gamma = vec![T::ZERO; c];
    let mut d_beta = vec![T::ZERO; c];
    for li in 0..l {
        let row = &input[li * c..(li + 1) * c];
        let grow = &d_out[li * c..(li + 1) * c];
        let dxrow = &mut d_x[li * c..(li + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        let inv_std = T::ONE / (var / n + epsv).sqrt();
        let mut sum_dxh = T::ZERO;
        let mut sum_dxh_xh = T::ZERO;
        for ci in 0..c {
            let xhat = (row[ci] - mean) * inv_std;
            d_gamma[ci] += grow[ci] * xhat;
            d_beta[ci] += grow[ci];
            let dxh = grow[ci] * gamma[ci];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat;
        }
        for ci in 0..c {
            let xhat = (row[ci] - mean) * inv_std;
            let dxh = grow[ci] * gamma[ci];
            dxrow[ci] = inv_std * (dxh - sum_dxh / n - xhat * (sum_dxh_xh / n));
        }
    }
    (d_x, d_gamma, d_beta)
}

/// Fully-connected layer: `y = W x + b` with `W` stored `[m, n]` row-major.
pub fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m);
    for row in 0..m {
        out.push(dot(&weight[row * n..(row + 1) * n], x) + bias[row]);
    }
    out
}

pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    m: usize,
    n: usize,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut d_x = vec![T::ZERO; n];
    let mut d_w = vec![T::ZERO; m * n];
    for row in 0..m {
        let g = d_out[row];
        let wrow = &weight[row * n..(row + 1) * n];
        let dwrow = &mut d_w[row * n..(row + 1) * n];
        for i in 0..n {
            dwrow[i] = fma(g, x[i], dwrow[i]);
            d_x[i] = fma(g, wrow[i], d_x[i]);
        }
    }
    (d_x, d_w, d_out.to_vec())
}

pub fn gelu_forward<T: Real>(input: &[T]) -> Vec<T> {
    let mut out = input.to_vec();
    gelu_inplace(&mut out);
    out
}

/// Single-task in-place GELU, used inside already-parallel regions.
fn gelu_inplace_serial<T: Real>(data: &mut [T]) {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32.
        let xs = unsafe { std::slice::from_raw_parts_mut(data.as_mut_ptr() as *mut f32, data.len()) };
        crate::math::gelu_slice_f32(xs);
        return;
    }
    for v in data.iter_mut() {
        *v = v.gelu();
    }
}

/// In-place GELU; the f32 instantiation goes through the slice-level table
/// walk and parallelizes big feature maps.
pub fn gelu_inplace<T: Real>(data: &mut [T]) {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32.
        let xs = unsafe { std::slice::from_raw_parts_mut(data.as_mut_ptr() as *mut f32, data.len()) };
        if xs.len() >= 1 << 17 {
            xs.par_chunks_mut(1 << 15).for_each(crate::math::gelu_slice_f32);
        } else {
            crate::math::gelu_slice_f32(xs);
        }
        return;
    }
    for v in data.iter_mut() {
        *v = v.gelu();
    }
}

pub fn gelu_backward<T: Real>(input: &[T], d_out: &[T]) -> Vec<T> {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32 in both slices.
        let xs = unsafe { std::slice::from_raw_parts(input.as_ptr() as *const f32, input.len()) };
        let mut out: Vec<f32> =
            unsafe { std::slice::from_raw_parts(d_out.as_ptr() as *const f32, d_out.len()) }.to_vec();
        crate::math::gelu_grad_slice_f32(xs, &mut out);
        // SAFETY: Vec<f32> and Vec<T> have identical layout since T is f32.
        let mut out = std::mem::ManuallyDrop::new(out);
        return unsafe { Vec::from_raw_parts(out.as_mut_ptr() as *mut T, out.len(), out.capacity()) };
    }
    input
        .iter()
        .zip(d_out)
        .map(|(&x, &g)| g * x.gelu_grad())
        .collect()
}

pub fn tanh_forward<T: Real>(input: &[T]) -> Vec<T> {
    input.iter().map(|v| v.tanh()).collect()
}

pub fn tanh_backward<T: Real>(output: &[T], d_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(d_out)
        .map(|(&y, &g)| g * (T::ONE - y * y))
        .collect()
}
