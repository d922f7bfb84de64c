//! Test-only oracles, independent of the engine's kernels.
#![allow(dead_code)]

pub mod derive_oracle;
pub mod dot;
pub mod gradcheck;
pub mod space_oracle;
pub mod toy;

use factornas_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct nested-loop convolution, one output element at a time.
#[allow(clippy::too_many_arguments)]
pub fn conv_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dil: usize, groups: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let cog = co / groups;
    assert_eq!(cig * groups, c);
    let xv = |b: usize, ch: usize, i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= h as i64 || j >= wd as i64 {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let g = o / cog;
            for y in 0..oh {
                for z in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..cig {
                        for p in 0..k {
                            for q in 0..k {
                                let i = (y * stride + p * dil) as i64 - pad as i64;
                                let j = (z * stride + q * dil) as i64 - pad as i64;
                                s += w.data()[((o * cig + ic) * k + p) * k + q] * xv(b, g * cig + ic, i, j);
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + z] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Nested-loop pooling; max ignores padding, avg divides by window².
pub fn pool_naive(x: &Tensor, max: bool, window: usize, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - window) / stride + 1;
    let ow = (wd + 2 * pad - window) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for z in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for p in 0..window {
                        for q in 0..window {
                            let i = (y * stride + p) as i64 - pad as i64;
                            let j = (z * stride + q) as i64 - pad as i64;
                            if i >= 0 && j >= 0 && i < h as i64 && j < wd as i64 {
                                let v = x.data()[((b * c + ch) * h + i as usize) * wd + j as usize];
                                best = best.max(v);
                                sum += v;
                            }
                        }
                    }
                    out.push(if max { best } else { sum / (window * window) as f64 });
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
