//! Slice-level compute kernels shared by the functional API, the autodiff
//! tape and the integer runtime.
//!
//! Every kernel accumulates each output element in ascending
//! (input channel, tap) order. Results are therefore reproducible and match
//! a straightforward nested-loop reference bit for bit.

/// Geometry of a batched 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub taps: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> Option<usize> {
        let span = self.dilation * (self.taps - 1);
        (self.len + 2 * self.padding).checked_sub(span).filter(|&n| n >= 1)
    }

    /// Valid output range `[lo, hi)` for tap `k`, plus the input offset.
    #[inline]
    fn tap_range(&self, k: usize, out_len: usize) -> (usize, usize, isize) {
        let offset = (k * self.dilation) as isize - self.padding as isize;
        let lo = (-offset).max(0) as usize;
        let hi = (self.len as isize - offset).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi, offset)
    }
}

pub fn conv1d_forward(g: &Conv1dGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let lo_len = g.out_len().expect("validated geometry");
    out.fill(0.0);
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let row = &mut out[(b * g.c_out + co) * lo_len..][..lo_len];
            for ci in 0..g.c_in {
                let xr = &x[(b * g.c_in + ci) * g.len..][..g.len];
                let wr = &w[(co * g.c_in + ci) * g.taps..][..g.taps];
                for (k, &wv) in wr.iter().enumerate() {
                    let (lo, hi, off) = g.tap_range(k, lo_len);
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for (o, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of a 1-D convolution.
pub fn conv1d_backward(
    g: &Conv1dGeom,
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
) {
    let lo_len = g.out_len().expect("validated geometry");
    if let Some(gx) = gx {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let gr = &gy[(b * g.c_out + co) * lo_len..][..lo_len];
                for ci in 0..g.c_in {
                    let gxr = &mut gx[(b * g.c_in + ci) * g.len..][..g.len];
                    let wr = &w[(co * g.c_in + ci) * g.taps..][..g.taps];
                    for (k, &wv) in wr.iter().enumerate() {
                        let (lo, hi, off) = g.tap_range(k, lo_len);
                        let dst = &mut gxr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (d, &gv) in dst.iter_mut().zip(&gr[lo..hi]) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let gr = &gy[(b * g.c_out + co) * lo_len..][..lo_len];
                for ci in 0..g.c_in {
                    let xr = &x[(b * g.c_in + ci) * g.len..][..g.len];
                    let gwr = &mut gw[(co * g.c_in + ci) * g.taps..][..g.taps];
                    for (k, gwv) in gwr.iter_mut().enumerate() {
                        let (lo, hi, off) = g.tap_range(k, lo_len);
                        let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        let mut acc = 0.0f32;
                        for (&gv, &xv) in gr[lo..hi].iter().zip(src) {
                            acc += gv * xv;
                        }
                        *gwv += acc;
                    }
                }
            }
        }
    }
}

/// Integer 1-D convolution over codes. Exact for any accumulation order.
pub fn conv1d_codes(g: &Conv1dGeom, x: &[i32], w: &[i32], out: &mut [i64]) {
    let lo_len = g.out_len().expect("validated geometry");
    out.fill(0);
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let row = &mut out[(b * g.c_out + co) * lo_len..][..lo_len];
            for ci in 0..g.c_in {
                let xr = &x[(b * g.c_in + ci) * g.len..][..g.len];
                let wr = &w[(co * g.c_in + ci) * g.taps..][..g.taps];
                for (k, &wv) in wr.iter().enumerate() {
                    if wv == 0 {
                        continue;
                    }
                    let (lo, hi, off) = g.tap_range(k, lo_len);
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    let wv = wv as i64;
                    for (o, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *o += wv * xv as i64;
                    }
                }
            }
        }
    }
}

/// Geometry of a batched 2-D convolution with square stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ho = (self.h + 2 * self.padding).checked_sub(self.kh)? / self.stride + 1;
        let wo = (self.w + 2 * self.padding).checked_sub(self.kw)? / self.stride + 1;
        Some((ho, wo))
    }

    /// Input coordinate for output index `o` at kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    out.fill(0.0);
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let oplane = &mut out[(b * g.c_out + co) * ho * wo..][..ho * wo];
            for ci in 0..g.c_in {
                let xp = &x[(b * g.c_in + ci) * plane..][..plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    oplane[oy * wo + ox] += wv * xp[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    mut gx: Option<&mut [f32]>,
    mut gw: Option<&mut [f32]>,
) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gp = &gy[(b * g.c_out + co) * ho * wo..][..ho * wo];
            for ci in 0..g.c_in {
                let xoff = (b * g.c_in + ci) * plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let mut acc = 0.0f32;
                        for oy in 0..ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    let gv = gp[oy * wo + ox];
                                    let xi = xoff + iy * g.w + ix;
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[xi] += wv * gv;
                                    }
                                    acc += gv * x[xi];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_codes(g: &Conv2dGeom, x: &[i32], w: &[i32], out: &mut [i64]) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    out.fill(0);
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let oplane = &mut out[(b * g.c_out + co) * ho * wo..][..ho * wo];
            for ci in 0..g.c_in {
                let xp = &x[(b * g.c_in + ci) * plane..][..plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] as i64;
                        if wv == 0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    oplane[oy * wo + ox] += wv * xp[iy * g.w + ix] as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense layer applied to `[batch, n_in, frames]`; `frames == 1` is the
/// plain matrix-vector case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseGeom {
    pub batch: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub frames: usize,
}

pub fn dense_forward(g: &DenseGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    out.fill(0.0);
    let f = g.frames;
    for b in 0..g.batch {
        for m in 0..g.n_out {
            let row = &mut out[(b * g.n_out + m) * f..][..f];
            for j in 0..g.n_in {
                let wv = w[m * g.n_in + j];
                let xr = &x[(b * g.n_in + j) * f..][..f];
                for (o, &xv) in row.iter_mut().zip(xr) {
                    *o += wv * xv;
                }
            }
            if let Some(bias) = bias {
                for o in row.iter_mut() {
                    *o += bias[m];
                }
            }
        }
    }
}

pub fn dense_backward(
    g: &DenseGeom,
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
    gb: Option<&mut [f32]>,
) {
    let f = g.frames;
    if let Some(gx) = gx {
        for b in 0..g.batch {
            for m in 0..g.n_out {
                let gr = &gy[(b * g.n_out + m) * f..][..f];
                for j in 0..g.n_in {
                    let wv = w[m * g.n_in + j];
                    let dst = &mut gx[(b * g.n_in + j) * f..][..f];
                    for (d, &gv) in dst.iter_mut().zip(gr) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..g.batch {
            for m in 0..g.n_out {
                let gr = &gy[(b * g.n_out + m) * f..][..f];
                for j in 0..g.n_in {
                    let xr = &x[(b * g.n_in + j) * f..][..f];
                    let acc: f32 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    gw[m * g.n_in + j] += acc;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for (m, gbv) in gb.iter_mut().enumerate() {
                *gbv += gy[(b * g.n_out + m) * f..][..f].iter().sum::<f32>();
            }
        }
    }
}

/// Per-channel mean over trailing spatial extent, accumulated in f64 and
/// rounded once.
pub fn global_avg_pool(x: &[f32], rows: usize, spatial: usize, out: &mut [f32]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let s: f64 = x[r * spatial..][..spatial].iter().map(|&v| v as f64).sum();
        *o = (s / spatial as f64) as f32;
    }
}
