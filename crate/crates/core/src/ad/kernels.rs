//! Inner-loop kernels. Dots carry four independent accumulators to break
//! the FMA dependency chain; axpy updates are blocked four rows at a time
//! for instruction-level parallelism. `chunks_exact` keeps the hot loops
//! free of bounds checks.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// dst += a * x
#[inline]
pub fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(dst.len(), x.len());
    if a == 0.0 {
        return;
    }
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// dst += a0*x0 + a1*x1 + a2*x2 + a3*x3 (same-length rows)
#[inline]
pub fn axpy4(dst: &mut [f64], a: [f64; 4], x0: &[f64], x1: &[f64], x2: &[f64], x3: &[f64]) {
    let n = dst.len();
    // Re-slicing to a common length lets the optimizer drop bounds checks
    // and vectorize the loop.
    let (x0, x1, x2, x3) = (&x0[..n], &x1[..n], &x2[..n], &x3[..n]);
    for j in 0..n {
        dst[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

/// out ([n, o]) += x ([n, i]) * w ([i, o]); rows of w contiguous per input
/// channel.
#[inline]
pub fn matmul_acc(out: &mut [f64], x: &[f64], w: &[f64], n: usize, i: usize, o: usize) {
    debug_assert_eq!(out.len(), n * o);
    debug_assert_eq!(x.len(), n * i);
    debug_assert_eq!(w.len(), i * o);
    for r in 0..n {
        let xrow = &x[r * i..(r + 1) * i];
        let orow = &mut out[r * o..(r + 1) * o];
        let mut k = 0;
        while k + 4 <= i {
            let a = [xrow[k], xrow[k + 1], xrow[k + 2], xrow[k + 3]];
            if a != [0.0; 4] {
                axpy4(
                    orow,
                    a,
                    &w[k * o..(k + 1) * o],
                    &w[(k + 1) * o..(k + 2) * o],
                    &w[(k + 2) * o..(k + 3) * o],
                    &w[(k + 3) * o..(k + 4) * o],
                );
            }
            k += 4;
        }
        while k < i {
            axpy(orow, xrow[k], &w[k * o..(k + 1) * o]);
            k += 1;
        }
    }
}

/// Fused four-tap bilinear gather: out += a * sum_t w_t * map[base_t + j]
/// over a `dh`-channel slice. Invalid taps must be passed with weight 0
/// and base 0.
#[inline]
pub fn gather4(out: &mut [f64], a: f64, map: &[f64], bases: [usize; 4], w: [f64; 4], dh: usize) {
    let m0 = &map[bases[0]..bases[0] + dh];
    let m1 = &map[bases[1]..bases[1] + dh];
    let m2 = &map[bases[2]..bases[2] + dh];
    let m3 = &map[bases[3]..bases[3] + dh];
    let aw = [a * w[0], a * w[1], a * w[2], a * w[3]];
    axpy4(out, aw, m0, m1, m2, m3);
}
