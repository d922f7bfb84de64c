//! Slice-level forward and backward kernels behind the graph operations.

pub mod act;
pub mod conv;
pub mod pool;

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dst += alpha * src`
#[inline]
pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `dst += Σ w_t · src_t`, four terms per pass over `dst`.
pub(crate) fn axpy_multi(dst: &mut [f64], terms: &[(f64, &[f64])]) {
    let n = dst.len();
    let mut chunks = terms.chunks_exact(4);
    for c in &mut chunks {
        let (w0, w1, w2, w3) = (c[0].0, c[1].0, c[2].0, c[3].0);
        let (s0, s1, s2, s3) = (&c[0].1[..n], &c[1].1[..n], &c[2].1[..n], &c[3].1[..n]);
        for i in 0..n {
            dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i] + w3 * s3[i];
        }
    }
    match chunks.remainder() {
        [a] => axpy(dst, a.0, a.1),
        [a, b] => {
            let (s0, s1) = (&a.1[..n], &b.1[..n]);
            for i in 0..n {
                dst[i] += a.0 * s0[i] + b.0 * s1[i];
            }
        }
        [a, b, c] => {
            let (s0, s1, s2) = (&a.1[..n], &b.1[..n], &c.1[..n]);
            for i in 0..n {
                dst[i] += a.0 * s0[i] + b.0 * s1[i] + c.0 * s2[i];
            }
        }
        _ => {}
    }
}

/// `out[t] += a · src_t`, four sources per pass over `a`.
pub(crate) fn dot_multi(a: &[f64], srcs: &[&[f64]], out: &mut [f64]) {
    let n = a.len();
    let mut o = 0;
    let mut chunks = srcs.chunks_exact(4);
    for c in &mut chunks {
        let (s0, s1, s2, s3) = (&c[0][..n], &c[1][..n], &c[2][..n], &c[3][..n]);
        let mut acc = [0.0f64; 4];
        for i in 0..n {
            acc[0] += a[i] * s0[i];
            acc[1] += a[i] * s1[i];
            acc[2] += a[i] * s2[i];
            acc[3] += a[i] * s3[i];
        }
        for (d, v) in out[o..o + 4].iter_mut().zip(acc) {
            *d += v;
        }
        o += 4;
    }
    for s in chunks.remainder() {
        out[o] += dot(a, s);
        o += 1;
    }
}
