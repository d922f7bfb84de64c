use alloc::vec;
use alloc::vec::Vec;

use super::{axpy, axpy_multi, dot_multi};
use crate::error::{bail, Result};

/// Resolved shapes of a grouped, strided, dilated 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// `input` is `[N, C, H, W]`, `kernel_shape` is `[C_out, C / groups, k, k]`.
    pub fn new(input: [usize; 4], kernel_shape: &[usize], stride: usize, padding: usize, dilation: usize, groups: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = input;
        if groups == 0 || in_channels % groups != 0 {
            bail!(Config, "groups={} does not divide {} input channels", groups, in_channels);
        }
        if stride == 0 || dilation == 0 {
            bail!(Config, "stride and dilation must be >= 1");
        }
        let &[out_channels, per_group, kh, kw] = kernel_shape else {
            bail!(Dimension, "kernel must be 4-d, got {:?}", kernel_shape);
        };
        if kh != kw {
            bail!(Dimension, "kernel must be spatially square, got {}x{}", kh, kw);
        }
        if per_group != in_channels / groups {
            bail!(Dimension, "kernel expects {} channels per group, input provides {}", per_group, in_channels / groups);
        }
        if out_channels % groups != 0 {
            bail!(Config, "groups={} does not divide {} output channels", groups, out_channels);
        }
        let span = dilation * (kh - 1) + 1;
        if height + 2 * padding < span || width + 2 * padding < span {
            bail!(Dimension, "kernel span {} exceeds padded input {}x{}", span, height + 2 * padding, width + 2 * padding);
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            dilation,
            groups,
            out_height: (height + 2 * padding - span) / stride + 1,
            out_width: (width + 2 * padding - span) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_height * self.out_width
    }

    pub fn macs(&self) -> u64 {
        (self.output_len() * (self.in_channels / self.groups) * self.kernel * self.kernel) as u64
    }
}

/// Padded input split into `stride²` phase planes, so that every kernel tap
/// reads one contiguous run. Outputs are accumulated at row pitch `pitch`
/// and only the first `out_width` columns of each row are kept.
#[derive(Debug, Clone, Copy)]
struct PhaseLayout {
    rows: usize,
    pitch: usize,
    /// Elements spanned by one output plane at row pitch `pitch`.
    run: usize,
}

impl PhaseLayout {
    fn new(geo: &ConvGeometry) -> Self {
        let s = geo.stride;
        let rows = (geo.height + 2 * geo.padding).div_ceil(s);
        let pitch = (geo.width + 2 * geo.padding).div_ceil(s);
        PhaseLayout { rows, pitch, run: (geo.out_height - 1) * pitch + geo.out_width }
    }

    fn phase_len(&self) -> usize {
        self.rows * self.pitch
    }

    fn plane_len(&self, geo: &ConvGeometry) -> usize {
        geo.stride * geo.stride * self.phase_len()
    }

    /// Start of the run read by tap `(kh, kw)` inside a phased plane.
    #[inline]
    fn tap_start(&self, geo: &ConvGeometry, kh: usize, kw: usize) -> usize {
        let (s, d) = (geo.stride, geo.dilation);
        let (r, c) = (kh * d, kw * d);
        ((r % s) * s + c % s) * self.phase_len() + (r / s) * self.pitch + c / s
    }

    /// Writes one `[H, W]` plane into phased, zero-padded form.
    fn scatter(&self, geo: &ConvGeometry, x: &[f64], dst: &mut [f64]) {
        let (s, p) = (geo.stride, geo.padding);
        dst.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..geo.height {
            let pr = r + p;
            let src = &x[r * geo.width..(r + 1) * geo.width];
            if s == 1 {
                dst[pr * self.pitch + p..pr * self.pitch + p + geo.width].copy_from_slice(src);
                continue;
            }
            for (c, &v) in src.iter().enumerate() {
                let pc = c + p;
                dst[((pr % s) * s + pc % s) * self.phase_len() + (pr / s) * self.pitch + pc / s] = v;
            }
        }
    }

    /// Adds a phased plane back onto an `[H, W]` plane, dropping the padding.
    fn gather_add(&self, geo: &ConvGeometry, src: &[f64], dst: &mut [f64]) {
        let (s, p) = (geo.stride, geo.padding);
        for r in 0..geo.height {
            let pr = r + p;
            let out = &mut dst[r * geo.width..(r + 1) * geo.width];
            if s == 1 {
                axpy(out, 1.0, &src[pr * self.pitch + p..pr * self.pitch + p + geo.width]);
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                let pc = c + p;
                *o += src[((pr % s) * s + pc % s) * self.phase_len() + (pr / s) * self.pitch + pc / s];
            }
        }
    }

    /// Copies the valid columns of a pitched output plane.
    fn unpack(&self, geo: &ConvGeometry, acc: &[f64], out: &mut [f64]) {
        for (r, row) in out.chunks_mut(geo.out_width).enumerate() {
            row.copy_from_slice(&acc[r * self.pitch..r * self.pitch + geo.out_width]);
        }
    }

    /// Spreads an output plane to pitched form with zeros in the unused columns.
    fn pack(&self, geo: &ConvGeometry, plane: &[f64], acc: &mut [f64]) {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (r, row) in plane.chunks(geo.out_width).enumerate() {
            acc[r * self.pitch..r * self.pitch + geo.out_width].copy_from_slice(row);
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let lay = PhaseLayout::new(geo);
    let plane = lay.plane_len(geo);
    let in_pg = geo.in_channels / geo.groups;
    let out_pg = geo.out_channels / geo.groups;
    let (k, hw, ohw) = (geo.kernel, geo.height * geo.width, geo.out_height * geo.out_width);
    let mut y = vec![0.0; geo.output_len()];
    let mut xq = vec![0.0; geo.in_channels * plane];
    let mut acc = vec![0.0; geo.out_height * lay.pitch];
    for n in 0..geo.batch {
        for ic in 0..geo.in_channels {
            let src = &x[(n * geo.in_channels + ic) * hw..][..hw];
            lay.scatter(geo, src, &mut xq[ic * plane..(ic + 1) * plane]);
        }
        let mut terms: Vec<(f64, &[f64])> = Vec::with_capacity(in_pg * k * k);
        for oc in 0..geo.out_channels {
            terms.clear();
            let g = oc / out_pg;
            for icl in 0..in_pg {
                let q = &xq[(g * in_pg + icl) * plane..][..plane];
                let wk = &w[(oc * in_pg + icl) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let start = lay.tap_start(geo, kh, kw);
                        terms.push((wk[kh * k + kw], &q[start..start + lay.run]));
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            axpy_multi(&mut acc[..lay.run], &terms);
            lay.unpack(geo, &acc, &mut y[(n * geo.out_channels + oc) * ohw..][..ohw]);
        }
    }
    y
}

/// Accumulates input and/or kernel gradients for upstream gradient `gy`.
pub fn conv2d_backward(geo: &ConvGeometry, x: &[f64], w: &[f64], gy: &[f64], mut gx: Option<&mut [f64]>, mut gw: Option<&mut [f64]>) {
    let lay = PhaseLayout::new(geo);
    let plane = lay.plane_len(geo);
    let phase = lay.phase_len();
    let in_pg = geo.in_channels / geo.groups;
    let out_pg = geo.out_channels / geo.groups;
    let (k, hw, ohw) = (geo.kernel, geo.height * geo.width, geo.out_height * geo.out_width);
    // Upstream gradients in pitched form, with `phase` zeros on either side so
    // that every shifted read stays in bounds.
    let padded = 3 * phase;
    let mut gyq = vec![0.0; geo.out_channels * padded];
    let mut xq = vec![0.0; if gw.is_some() { geo.in_channels * plane } else { 0 }];
    let mut gq = vec![0.0; if gx.is_some() { geo.in_channels * plane } else { 0 }];
    let taps: Vec<(usize, usize)> = (0..k * k)
        .map(|t| {
            let start = lay.tap_start(geo, t / k, t % k);
            (start / phase, start % phase)
        })
        .collect();
    for n in 0..geo.batch {
        for oc in 0..geo.out_channels {
            let src = &gy[(n * geo.out_channels + oc) * ohw..][..ohw];
            lay.pack(geo, src, &mut gyq[oc * padded + phase..oc * padded + 2 * phase]);
        }
        if let Some(gw) = gw.as_deref_mut() {
            for ic in 0..geo.in_channels {
                let src = &x[(n * geo.in_channels + ic) * hw..][..hw];
                lay.scatter(geo, src, &mut xq[ic * plane..(ic + 1) * plane]);
            }
            let mut srcs: Vec<&[f64]> = Vec::with_capacity(k * k);
            for oc in 0..geo.out_channels {
                let go = &gyq[oc * padded + phase..][..lay.run];
                let g = oc / out_pg;
                for icl in 0..in_pg {
                    let q = &xq[(g * in_pg + icl) * plane..][..plane];
                    srcs.clear();
                    srcs.extend(taps.iter().map(|&(p, off)| &q[p * phase + off..][..lay.run]));
                    let base = (oc * in_pg + icl) * k * k;
                    dot_multi(go, &srcs, &mut gw[base..base + k * k]);
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            gq.iter_mut().for_each(|v| *v = 0.0);
            let mut terms: Vec<(f64, &[f64])> = Vec::with_capacity(out_pg * k * k);
            for ic in 0..geo.in_channels {
                let (g, icl) = (ic / in_pg, ic % in_pg);
                for p in 0..geo.stride * geo.stride {
                    terms.clear();
                    for oc in g * out_pg..(g + 1) * out_pg {
                        let go = &gyq[oc * padded..(oc + 1) * padded];
                        for (t, &(tp, off)) in taps.iter().enumerate() {
                            if tp == p {
                                let wv = w[(oc * in_pg + icl) * k * k + t];
                                terms.push((wv, &go[phase - off..][..phase]));
                            }
                        }
                    }
                    axpy_multi(&mut gq[ic * plane + p * phase..][..phase], &terms);
                }
                let dst = &mut gx[(n * geo.in_channels + ic) * hw..][..hw];
                lay.gather_add(geo, &gq[ic * plane..(ic + 1) * plane], dst);
            }
        }
    }
}
