use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Mean over the full window; padded positions count as zeros.
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl PoolGeometry {
    pub fn new(input: [usize; 4], window: usize, stride: usize, padding: usize) -> Result<Self> {
        let [batch, channels, height, width] = input;
        if window == 0 || stride == 0 {
            bail!(Config, "pool window and stride must be >= 1");
        }
        if window > height + 2 * padding || window > width + 2 * padding {
            bail!(Dimension, "pool window {} larger than padded input {}x{}", window, height + 2 * padding, width + 2 * padding);
        }
        Ok(PoolGeometry {
            batch,
            channels,
            height,
            width,
            window,
            stride,
            padding,
            out_height: (height + 2 * padding - window) / stride + 1,
            out_width: (width + 2 * padding - window) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_height, self.out_width]
    }

    fn span(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as i64 - self.padding as i64;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as i64).min(extent as i64)).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Max pooling. Returns the output and, per output, the flat input index of the
/// first maximum in row-major window order (`usize::MAX` when the window only
/// covers padding).
pub fn max_pool_forward(geo: &PoolGeometry, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes = geo.batch * geo.channels;
    let (h, w, oh_n, ow_n) = (geo.height, geo.width, geo.out_height, geo.out_width);
    let out_plane = oh_n * ow_n;
    let cols: Vec<(usize, usize)> = (0..ow_n).map(|o| geo.span(o, w)).collect();
    let rows: Vec<(usize, usize)> = (0..oh_n).map(|o| geo.span(o, h)).collect();
    let mut y = vec![0.0; planes * out_plane];
    let mut arg = vec![usize::MAX; planes * out_plane];
    let mut hmax = vec![f64::NEG_INFINITY; h * ow_n];
    let mut harg = vec![usize::MAX; h * ow_n];
    for p in 0..planes {
        let base = p * h * w;
        for ih in 0..h {
            let row = &x[base + ih * w..base + (ih + 1) * w];
            for (ow, &(w0, w1)) in cols.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for (iw, &v) in row[w0..w1].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = w0 + iw;
                    }
                }
                hmax[ih * ow_n + ow] = best;
                harg[ih * ow_n + ow] = if best_i == usize::MAX { usize::MAX } else { base + ih * w + best_i };
            }
        }
        let yp = &mut y[p * out_plane..(p + 1) * out_plane];
        let ap = &mut arg[p * out_plane..(p + 1) * out_plane];
        for (oh, &(h0, h1)) in rows.iter().enumerate() {
            for ow in 0..ow_n {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ih in h0..h1 {
                    let v = hmax[ih * ow_n + ow];
                    if v > best {
                        best = v;
                        best_i = harg[ih * ow_n + ow];
                    }
                }
                if best_i != usize::MAX {
                    yp[oh * ow_n + ow] = best;
                    ap[oh * ow_n + ow] = best_i;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(argmax: &[usize], gy: &[f64], gx: &mut [f64]) {
    for (&i, &g) in argmax.iter().zip(gy) {
        if i != usize::MAX {
            gx[i] += g;
        }
    }
}

pub fn avg_pool_forward(geo: &PoolGeometry, x: &[f64]) -> Vec<f64> {
    let planes = geo.batch * geo.channels;
    let (h, w, oh_n, ow_n) = (geo.height, geo.width, geo.out_height, geo.out_width);
    let out_plane = oh_n * ow_n;
    let cols: Vec<(usize, usize)> = (0..ow_n).map(|o| geo.span(o, w)).collect();
    let rows: Vec<(usize, usize)> = (0..oh_n).map(|o| geo.span(o, h)).collect();
    let inv = 1.0 / (geo.window * geo.window) as f64;
    let mut y = vec![0.0; planes * out_plane];
    let mut hsum = vec![0.0; h * ow_n];
    for p in 0..planes {
        let base = p * h * w;
        for ih in 0..h {
            let row = &x[base + ih * w..base + (ih + 1) * w];
            for (ow, &(w0, w1)) in cols.iter().enumerate() {
                hsum[ih * ow_n + ow] = row[w0..w1].iter().sum();
            }
        }
        let yp = &mut y[p * out_plane..(p + 1) * out_plane];
        for (oh, &(h0, h1)) in rows.iter().enumerate() {
            let out = &mut yp[oh * ow_n..(oh + 1) * ow_n];
            for ih in h0..h1 {
                for (o, &v) in out.iter_mut().zip(&hsum[ih * ow_n..(ih + 1) * ow_n]) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward(geo: &PoolGeometry, gy: &[f64], gx: &mut [f64]) {
    let planes = geo.batch * geo.channels;
    let (h, w, oh_n, ow_n) = (geo.height, geo.width, geo.out_height, geo.out_width);
    let out_plane = oh_n * ow_n;
    let cols: Vec<(usize, usize)> = (0..ow_n).map(|o| geo.span(o, w)).collect();
    let rows: Vec<(usize, usize)> = (0..oh_n).map(|o| geo.span(o, h)).collect();
    let inv = 1.0 / (geo.window * geo.window) as f64;
    let mut vsum = vec![0.0; h * ow_n];
    for p in 0..planes {
        vsum.fill(0.0);
        let gp = &gy[p * out_plane..(p + 1) * out_plane];
        for (oh, &(h0, h1)) in rows.iter().enumerate() {
            let src = &gp[oh * ow_n..(oh + 1) * ow_n];
            for ih in h0..h1 {
                for (o, &g) in vsum[ih * ow_n..(ih + 1) * ow_n].iter_mut().zip(src) {
                    *o += g * inv;
                }
            }
        }
        let base = p * h * w;
        for ih in 0..h {
            let row = &mut gx[base + ih * w..base + (ih + 1) * w];
            for (ow, &(w0, w1)) in cols.iter().enumerate() {
                let g = vsum[ih * ow_n + ow];
                for o in &mut row[w0..w1] {
                    *o += g;
                }
            }
        }
    }
}
