//! Forward and backward numeric kernels used by the tape.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use crate::error::{config, Result};
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// "Same" geometry for an odd `kernel` at the given stride and dilation.
    pub fn same(kernel: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups,
        }
    }

    fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    /// Validates shapes and returns the output shape.
    pub fn output_shape(&self, input: Shape, kernel: Shape) -> Result<Shape> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return config("stride, dilation and groups must be positive");
        }
        if input.height == 0 || input.width == 0 {
            return config(format!("conv2d input {input} has an empty spatial extent"));
        }
        if kernel.height != kernel.width || kernel.height.is_multiple_of(2) {
            return config(format!("conv2d kernel {kernel} must be square with odd size"));
        }
        if !input.channels.is_multiple_of(self.groups) || !kernel.batch.is_multiple_of(self.groups) {
            return config(format!(
                "channels ({} in, {} out) not divisible by groups {}",
                input.channels, kernel.batch, self.groups
            ));
        }
        if kernel.channels != input.channels / self.groups {
            return config(format!(
                "kernel {kernel} expects {} input channels per group, input has {}",
                kernel.channels,
                input.channels / self.groups
            ));
        }
        let k = kernel.height;
        match (self.out_len(input.height, k), self.out_len(input.width, k)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(input.batch, kernel.batch, h, w)),
            _ => config(format!("conv2d output of {input} with kernel {kernel} is empty")),
        }
    }

    fn is_pointwise(&self, kernel: Shape) -> bool {
        kernel.height == 1 && self.groups == 1 && self.padding == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap at `offset`
/// (the input coordinate is `out * stride + offset`).
fn tap_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.min(out_len as isize) as usize;
    let hi = hi.min(out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// Row-major GEMM: `c = a' * b' + beta * c` where `a'` is m×k and `b'` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided subsample of every plane: `out[y][x] = in[y * s][x * s]`.
fn subsample(input: &[f32], channels: usize, h: usize, w: usize, s: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let row = &plane[y * s * w..];
            out.extend((0..ow).map(|x| row[x * s]));
        }
    }
    out
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let is = input.shape();
    let ks = kernel.shape();
    let os = geom.output_shape(is, ks)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![0.0f32; os.numel()];

    if geom.is_pointwise(ks) {
        let (cin, cout, ohw) = (is.channels, os.channels, os.plane());
        for b in 0..is.batch {
            let xb = &x[b * is.sample()..(b + 1) * is.sample()];
            let sub;
            let xs: &[f32] = if geom.stride == 1 {
                xb
            } else {
                sub = subsample(xb, cin, is.height, is.width, geom.stride, os.height, os.width);
                &sub
            };
            gemm(
                cout,
                cin,
                ohw,
                wt,
                false,
                xs,
                false,
                0.0,
                &mut out[b * os.sample()..(b + 1) * os.sample()],
            );
        }
        return Ok(Tensor::from_parts(os, out));
    }
    if geom.stride == 1 {
        conv_unit_stride_forward(input, kernel, geom, os, &mut out);
        return Ok(Tensor::from_parts(os, out));
    }

    let k = ks.height;
    let cin_g = ks.channels;
    let cout_g = os.channels / geom.groups;
    let (ih, iw, oh, ow) = (is.height, is.width, os.height, os.width);
    let taps_y: Vec<(usize, usize, isize)> = (0..k)
        .map(|t| {
            let off = (t * geom.dilation) as isize - geom.padding as isize;
            let (lo, hi) = tap_range(off, geom.stride, ih, oh);
            (lo, hi, off)
        })
        .collect();
    let taps_x: Vec<(usize, usize, isize)> = (0..k)
        .map(|t| {
            let off = (t * geom.dilation) as isize - geom.padding as isize;
            let (lo, hi) = tap_range(off, geom.stride, iw, ow);
            (lo, hi, off)
        })
        .collect();
    let s = geom.stride;
    for b in 0..is.batch {
        for co in 0..os.channels {
            let g = co / cout_g;
            let out_plane = &mut out[(b * os.channels + co) * oh * ow..][..oh * ow];
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let in_plane = &x[(b * is.channels + ci) * ih * iw..][..ih * iw];
                let wbase = (co * cin_g + cl) * k * k;
                for (ky, &(ylo, yhi, yoff)) in taps_y.iter().enumerate() {
                    for (kx, &(xlo, xhi, xoff)) in taps_x.iter().enumerate() {
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = wt[wbase + ky * k + kx];
                        let ix0 = (xlo * s) as isize + xoff;
                        for oy in ylo..yhi {
                            let iy = ((oy * s) as isize + yoff) as usize;
                            let irow = &in_plane[iy * iw + ix0 as usize..];
                            let orow = &mut out_plane[oy * ow + xlo..oy * ow + xhi];
                            if s == 1 {
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, i) in orow.iter_mut().zip(irow.iter().step_by(s)) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

/// Dot product with eight independent partial sums.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Zero-padded copies of every input plane, each `(h + 2p) × (w + 2p)`.
fn pad_planes(input: &Tensor, p: usize) -> Vec<f32> {
    let s = input.shape();
    let (ph, pw) = (s.height + 2 * p, s.width + 2 * p);
    let mut out = vec![0.0f32; s.batch * s.channels * ph * pw];
    for (src, dst) in input.data().chunks(s.plane()).zip(out.chunks_mut(ph * pw)) {
        for (y, row) in src.chunks(s.width).enumerate() {
            dst[(y + p) * pw + p..(y + p) * pw + p + s.width].copy_from_slice(row);
        }
    }
    out
}

/// Offsets of every kernel tap into a padded plane of width `pw`.
fn tap_offsets(k: usize, dilation: usize, pw: usize) -> Vec<usize> {
    (0..k * k)
        .map(|t| (t / k) * dilation * pw + (t % k) * dilation)
        .collect()
}

/// Stride-1 convolution over padded planes. Output rows are computed at the
/// padded width so each tap is one contiguous multiply-add; the surplus
/// columns are dropped afterwards.
fn conv_unit_stride_forward(input: &Tensor, kernel: &Tensor, geom: ConvGeom, os: Shape, out: &mut [f32]) {
    let is = input.shape();
    let ks = kernel.shape();
    let padded = pad_planes(input, geom.padding);
    let (ph, pw) = (is.height + 2 * geom.padding, is.width + 2 * geom.padding);
    let (oh, ow) = (os.height, os.width);
    let span = (oh - 1) * pw + ow;
    let offsets = tap_offsets(ks.height, geom.dilation, pw);
    let (cin_g, cout_g) = (ks.channels, os.channels / geom.groups);
    let taps = ks.height * ks.width;
    let wt = kernel.data();
    let mut acc = vec![0.0f32; span];
    for b in 0..is.batch {
        for co in 0..os.channels {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let plane = &padded[(b * is.channels + ci) * ph * pw..][..ph * pw];
                let w = &wt[(co * cin_g + cl) * taps..][..taps];
                for (&wv, &off) in w.iter().zip(&offsets) {
                    for (a, &x) in acc.iter_mut().zip(&plane[off..off + span]) {
                        *a += wv * x;
                    }
                }
            }
            let dst = &mut out[(b * os.channels + co) * oh * ow..][..oh * ow];
            for (y, row) in dst.chunks_mut(ow).enumerate() {
                row.copy_from_slice(&acc[y * pw..y * pw + ow]);
            }
        }
    }
}

fn conv_unit_stride_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f32],
    geom: ConvGeom,
    os: Shape,
    mut gx: Option<&mut [f32]>,
    mut gw: Option<&mut [f32]>,
) {
    let is = input.shape();
    let ks = kernel.shape();
    let p = geom.padding;
    let padded = gw.as_ref().map(|_| pad_planes(input, p));
    let (ph, pw) = (is.height + 2 * p, is.width + 2 * p);
    let (oh, ow) = (os.height, os.width);
    let span = (oh - 1) * pw + ow;
    let offsets = tap_offsets(ks.height, geom.dilation, pw);
    let (cin_g, cout_g) = (ks.channels, os.channels / geom.groups);
    let taps = ks.height * ks.width;
    let wt = kernel.data();
    let mut gy = vec![0.0f32; span];
    let mut gx_pad = gx.as_ref().map(|_| vec![0.0f32; is.channels * ph * pw]);
    for b in 0..is.batch {
        if let Some(buf) = gx_pad.as_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        for co in 0..os.channels {
            let src = &grad_out[(b * os.channels + co) * oh * ow..][..oh * ow];
            for (y, row) in src.chunks(ow).enumerate() {
                gy[y * pw..y * pw + ow].copy_from_slice(row);
            }
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let wbase = (co * cin_g + cl) * taps;
                if let (Some(gw), Some(padded)) = (gw.as_deref_mut(), padded.as_ref()) {
                    let plane = &padded[(b * is.channels + ci) * ph * pw..][..ph * pw];
                    for (t, &off) in offsets.iter().enumerate() {
                        gw[wbase + t] += dot(&gy, &plane[off..off + span]);
                    }
                }
                if let Some(buf) = gx_pad.as_mut() {
                    let plane = &mut buf[ci * ph * pw..][..ph * pw];
                    for (&wv, &off) in wt[wbase..wbase + taps].iter().zip(&offsets) {
                        for (x, &g) in plane[off..off + span].iter_mut().zip(&gy) {
                            *x += wv * g;
                        }
                    }
                }
            }
        }
        if let (Some(gx), Some(buf)) = (gx.as_deref_mut(), gx_pad.as_ref()) {
            for c in 0..is.channels {
                let plane = &buf[c * ph * pw..][..ph * pw];
                let dst = &mut gx[(b * is.channels + c) * is.plane()..][..is.plane()];
                for (y, row) in dst.chunks_mut(is.width).enumerate() {
                    row.copy_from_slice(&plane[(y + p) * pw + p..(y + p) * pw + p + is.width]);
                }
            }
        }
    }
}

/// Gradients of a convolution. Either side may be skipped.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f32],
    geom: ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let is = input.shape();
    let ks = kernel.shape();
    let os = geom.output_shape(is, ks).expect("shapes were validated in forward");
    let x = input.data();
    let wt = kernel.data();
    let mut gx = want_input.then(|| vec![0.0f32; is.numel()]);
    let mut gw = want_kernel.then(|| vec![0.0f32; ks.numel()]);

    if geom.is_pointwise(ks) {
        let (cin, cout, ohw) = (is.channels, os.channels, os.plane());
        for b in 0..is.batch {
            let gy = &grad_out[b * os.sample()..(b + 1) * os.sample()];
            let xb = &x[b * is.sample()..(b + 1) * is.sample()];
            if let Some(gw) = gw.as_mut() {
                let sub;
                let xs: &[f32] = if geom.stride == 1 {
                    xb
                } else {
                    sub = subsample(xb, cin, is.height, is.width, geom.stride, os.height, os.width);
                    &sub
                };
                gemm(cout, ohw, cin, gy, false, xs, true, 1.0, gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * is.sample()..(b + 1) * is.sample()];
                if geom.stride == 1 {
                    gemm(cin, cout, ohw, wt, true, gy, false, 0.0, gxb);
                } else {
                    let mut tmp = vec![0.0f32; cin * ohw];
                    gemm(cin, cout, ohw, wt, true, gy, false, 0.0, &mut tmp);
                    let (ih, iw, oh, ow, s) = (is.height, is.width, os.height, os.width, geom.stride);
                    for c in 0..cin {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gxb[c * ih * iw + y * s * iw + xx * s] = tmp[c * ohw + y * ow + xx];
                            }
                        }
                    }
                }
            }
        }
        return (gx, gw);
    }
    if geom.stride == 1 {
        conv_unit_stride_backward(input, kernel, grad_out, geom, os, gx.as_deref_mut(), gw.as_deref_mut());
        return (gx, gw);
    }

    let k = ks.height;
    let cin_g = ks.channels;
    let cout_g = os.channels / geom.groups;
    let (ih, iw, oh, ow) = (is.height, is.width, os.height, os.width);
    let s = geom.stride;
    let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, isize)> {
        (0..k)
            .map(|t| {
                let off = (t * geom.dilation) as isize - geom.padding as isize;
                let (lo, hi) = tap_range(off, s, in_len, out_len);
                (lo, hi, off)
            })
            .collect()
    };
    let taps_y = taps(ih, oh);
    let taps_x = taps(iw, ow);
    for b in 0..is.batch {
        for co in 0..os.channels {
            let g = co / cout_g;
            let gy_plane = &grad_out[(b * os.channels + co) * oh * ow..][..oh * ow];
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let plane_at = (b * is.channels + ci) * ih * iw;
                let wbase = (co * cin_g + cl) * k * k;
                for (ky, &(ylo, yhi, yoff)) in taps_y.iter().enumerate() {
                    for (kx, &(xlo, xhi, xoff)) in taps_x.iter().enumerate() {
                        if xlo >= xhi {
                            continue;
                        }
                        let ix0 = ((xlo * s) as isize + xoff) as usize;
                        let n = xhi - xlo;
                        if let Some(gw) = gw.as_mut() {
                            let in_plane = &x[plane_at..plane_at + ih * iw];
                            let mut acc = 0.0f32;
                            for oy in ylo..yhi {
                                let iy = ((oy * s) as isize + yoff) as usize;
                                let irow = &in_plane[iy * iw + ix0..];
                                let grow = &gy_plane[oy * ow + xlo..oy * ow + xhi];
                                if s == 1 {
                                    acc += grow.iter().zip(&irow[..n]).map(|(g, i)| g * i).sum::<f32>();
                                } else {
                                    acc += grow.iter().zip(irow.iter().step_by(s)).map(|(g, i)| g * i).sum::<f32>();
                                }
                            }
                            gw[wbase + ky * k + kx] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = wt[wbase + ky * k + kx];
                            let gin_plane = &mut gx[plane_at..plane_at + ih * iw];
                            for oy in ylo..yhi {
                                let iy = ((oy * s) as isize + yoff) as usize;
                                let grow = &gy_plane[oy * ow + xlo..oy * ow + xhi];
                                let irow = &mut gin_plane[iy * iw + ix0..];
                                if s == 1 {
                                    for (i, g) in irow[..n].iter_mut().zip(grow) {
                                        *i += wv * g;
                                    }
                                } else {
                                    for (i, g) in irow.iter_mut().step_by(s).zip(grow) {
                                        *i += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeom {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.window == 0 || self.window.is_multiple_of(2) || self.stride == 0 {
            return config(format!(
                "invalid pooling window {} / stride {}",
                self.window, self.stride
            ));
        }
        if 2 * self.padding > self.window {
            return config("pool padding must be smaller than half the window");
        }
        let out = |len: usize| -> Option<usize> {
            let padded = len + 2 * self.padding;
            (len > 0 && padded >= self.window).then(|| (padded - self.window) / self.stride + 1)
        };
        match (out(input.height), out(input.width)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.batch, input.channels, h, w)),
            _ => config(format!("pool output of {input} is empty")),
        }
    }
}

/// Returns the pooled tensor plus, for max mode, the argmax input index of
/// every output element.
pub fn pool2d_forward(input: &Tensor, mode: PoolMode, geom: PoolGeom) -> Result<(Tensor, Vec<u32>)> {
    let is = input.shape();
    let os = geom.output_shape(is)?;
    let x = input.data();
    let (ih, iw, oh, ow) = (is.height, is.width, os.height, os.width);
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(os.numel());
    }
    for plane in 0..is.batch * is.channels {
        let base = plane * ih * iw;
        for oy in 0..oh {
            let y0 = (oy * geom.stride) as isize - geom.padding as isize;
            let ys = y0.max(0) as usize..((y0 + geom.window as isize).min(ih as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * geom.stride) as isize - geom.padding as isize;
                let xs = x0.max(0) as usize..((x0 + geom.window as isize).min(iw as isize)) as usize;
                match mode {
                    PoolMode::Max => {
                        let mut best = f32::NEG_INFINITY;
                        let mut at = 0usize;
                        for y in ys.clone() {
                            for xx in xs.clone() {
                                let v = x[base + y * iw + xx];
                                if v > best {
                                    best = v;
                                    at = base + y * iw + xx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at as u32);
                    }
                    PoolMode::Average => {
                        let mut acc = 0.0f32;
                        for y in ys.clone() {
                            for xx in xs.clone() {
                                acc += x[base + y * iw + xx];
                            }
                        }
                        out.push(acc / (ys.len() * xs.len()) as f32);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(os, out), argmax))
}

pub fn avg_pool2d_backward(input_shape: Shape, grad_out: &[f32], geom: PoolGeom) -> Vec<f32> {
    let os = geom.output_shape(input_shape).expect("validated in forward");
    let (ih, iw, oh, ow) = (input_shape.height, input_shape.width, os.height, os.width);
    let mut gx = vec![0.0f32; input_shape.numel()];
    for plane in 0..input_shape.batch * input_shape.channels {
        let base = plane * ih * iw;
        for oy in 0..oh {
            let y0 = (oy * geom.stride) as isize - geom.padding as isize;
            let ys = y0.max(0) as usize..((y0 + geom.window as isize).min(ih as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * geom.stride) as isize - geom.padding as isize;
                let xs = x0.max(0) as usize..((x0 + geom.window as isize).min(iw as isize)) as usize;
                let g = grad_out[(plane * oh + oy) * ow + ox] / (ys.len() * xs.len()) as f32;
                for y in ys.clone() {
                    for xx in xs.clone() {
                        gx[base + y * iw + xx] += g;
                    }
                }
            }
        }
    }
    gx
}

pub const NORM_EPS: f32 = 1e-5;

/// Per-channel batch statistics normalization. Returns the normalized values
/// and the per-channel inverse standard deviation.
pub fn normalize_forward(input: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = input.shape();
    let count = s.batch * s.plane();
    if count < 2 {
        return config(format!(
            "normalization needs at least 2 values per channel, {s} has {count}"
        ));
    }
    let x = input.data();
    let plane = s.plane();
    let mut out = vec![0.0f32; s.numel()];
    let mut inv_std = Vec::with_capacity(s.channels);
    for c in 0..s.channels {
        let mut sum = 0.0f64;
        for b in 0..s.batch {
            let at = (b * s.channels + c) * plane;
            sum += x[at..at + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0f64;
        for b in 0..s.batch {
            let at = (b * s.channels + c) * plane;
            sq += x[at..at + plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / count as f64;
        let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
        inv_std.push(istd as f32);
        let (mean, istd) = (mean as f32, istd as f32);
        for b in 0..s.batch {
            let at = (b * s.channels + c) * plane;
            for (o, &v) in out[at..at + plane].iter_mut().zip(&x[at..at + plane]) {
                *o = (v - mean) * istd;
            }
        }
    }
    Ok((out, inv_std))
}

/// Gradient of the normalization with respect to its input, given the
/// gradient with respect to the normalized values.
pub fn normalize_backward(shape: Shape, normalized: &[f32], inv_std: &[f32], grad_hat: &[f32]) -> Vec<f32> {
    let plane = shape.plane();
    let count = (shape.batch * plane) as f64;
    let mut gx = vec![0.0f32; shape.numel()];
    for c in 0..shape.channels {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..shape.batch {
            let at = (b * shape.channels + c) * plane;
            for (&g, &h) in grad_hat[at..at + plane].iter().zip(&normalized[at..at + plane]) {
                sum_g += g as f64;
                sum_gx += g as f64 * h as f64;
            }
        }
        let mean_g = (sum_g / count) as f32;
        let mean_gx = (sum_gx / count) as f32;
        let istd = inv_std[c];
        for b in 0..shape.batch {
            let at = (b * shape.channels + c) * plane;
            for ((o, &g), &h) in gx[at..at + plane]
                .iter_mut()
                .zip(&grad_hat[at..at + plane])
                .zip(&normalized[at..at + plane])
            {
                *o = istd * (g - mean_g - h * mean_gx);
            }
        }
    }
    gx
}

/// Softmax of a logit vector, computed with max-subtraction.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return config("softmax of an empty vector");
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return config("softmax logits must be finite");
    }
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, &mut out);
    Ok(out)
}

/// Numerically stable softmax of one row, evaluated in f64 and rounded once.
pub fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let total: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l as f64 - max).exp() / total) as f32;
    }
}
