//! Same-padded 2-D cross-correlation, bilinear resampling and pixel shuffling.
//!
//! All convolutions are cross-correlations (no kernel flip) with zero padding
//! of `K / 2`, so odd kernels preserve the spatial size.

use super::{Grads, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Output rows `[lo, hi)` whose tap `y + off` lands inside `0..n`.
#[inline]
fn tap_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// `out[y, x] += w · inp[y + oy, x + ox]`
#[inline]
fn tap_axpy<S: Real>(out: &mut [S], inp: &[S], w: S, oy: isize, ox: isize, h: usize, wd: usize) {
    let (y0, y1) = tap_range(h, oy);
    let (x0, x1) = tap_range(wd, ox);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let src = ((y as isize + oy) as usize) * wd;
        let irow = &inp[(src as isize + x0 as isize + ox) as usize..][..x1 - x0];
        for (o, &v) in out[y * wd + x0..y * wd + x1].iter_mut().zip(irow) {
            *o += w * v;
        }
    }
}

/// `gin[y + oy, x + ox] += w · g[y, x]`
#[inline]
fn tap_axpy_t<S: Real>(gin: &mut [S], g: &[S], w: S, oy: isize, ox: isize, h: usize, wd: usize) {
    let (y0, y1) = tap_range(h, oy);
    let (x0, x1) = tap_range(wd, ox);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let dst = ((y as isize + oy) as usize) * wd;
        let grow = &g[y * wd + x0..y * wd + x1];
        let irow = &mut gin[(dst as isize + x0 as isize + ox) as usize..][..x1 - x0];
        for (d, &v) in irow.iter_mut().zip(grow) {
            *d += w * v;
        }
    }
}

/// `Σ g[y, x] · inp[y + oy, x + ox]`
#[inline]
fn tap_dot<S: Real>(g: &[S], inp: &[S], oy: isize, ox: isize, h: usize, wd: usize) -> S {
    let (y0, y1) = tap_range(h, oy);
    let (x0, x1) = tap_range(wd, ox);
    let mut s = S::ZERO;
    if x0 >= x1 {
        return s;
    }
    for y in y0..y1 {
        let src = ((y as isize + oy) as usize) * wd;
        let irow = &inp[(src as isize + x0 as isize + ox) as usize..][..x1 - x0];
        for (&a, &b) in g[y * wd + x0..y * wd + x1].iter().zip(irow) {
            s += a * b;
        }
    }
    s
}

struct DynDims {
    b: usize,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn dyn_dims(op: &'static str, sx: &[usize], sk: &[usize], sb: &[usize]) -> Result<DynDims> {
    if sx.len() != 4 || sk.len() != 5 {
        return Err(Error::dim(
            op,
            format!("input {sx:?} must be [B,C,H,W] and kernels {sk:?} [B,T,C,K,K]"),
        ));
    }
    let k = sk[3];
    if sk[4] != k {
        return Err(Error::dim(op, format!("kernels {sk:?} are not square")));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("{op}: kernel size {k} must be odd")));
    }
    if sk[0] != sx[0] || sk[2] != sx[1] {
        return Err(Error::dim(
            op,
            format!("kernels {sk:?} do not match input {sx:?} (batch / channels)"),
        ));
    }
    if sb != [sk[0], sk[1]] {
        return Err(Error::dim(
            op,
            format!("bias {sb:?} must be [{}, {}]", sk[0], sk[1]),
        ));
    }
    Ok(DynDims {
        b: sx[0],
        t: sk[1],
        c: sx[1],
        h: sx[2],
        w: sx[3],
        k,
    })
}

impl<S: Real> Graph<S> {
    /// Per-sample dynamic convolution: every `(b, t)` owns a `C×K×K` kernel
    /// that is correlated with the `C`-channel input of sample `b`.
    pub fn dyn_conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let d = dyn_dims(
            "dyn_conv2d",
            self.shape(x),
            self.shape(kernels),
            self.shape(bias),
        )?;
        let (vx, vk, vb) = (self.value(x), self.value(kernels), self.value(bias));
        let hw = d.h * d.w;
        let kk = d.k * d.k;
        let p = (d.k / 2) as isize;
        let mut value = vec![S::ZERO; d.b * d.t * hw];
        for b in 0..d.b {
            for t in 0..d.t {
                let out = &mut value[(b * d.t + t) * hw..][..hw];
                for c in 0..d.c {
                    let plane = &vx[(b * d.c + c) * hw..][..hw];
                    let kern = &vk[((b * d.t + t) * d.c + c) * kk..][..kk];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let wv = kern[ky * d.k + kx];
                            tap_axpy(out, plane, wv, ky as isize - p, kx as isize - p, d.h, d.w);
                        }
                    }
                }
                let bv = vb[b * d.t + t];
                out.iter_mut().for_each(|o| *o += bv);
            }
        }
        self.push(
            "dyn_conv2d",
            value,
            vec![d.b, d.t, d.h, d.w],
            Op::DynConv {
                x,
                k: kernels,
                b: bias,
            },
            &[x, kernels, bias],
        )
    }

    /// Grouped variant of [`Graph::dyn_conv2d`]: each category kernel is
    /// correlated with every channel separately, and the per-channel
    /// responses are summed afterwards.
    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let d = dyn_dims(
            "depthwise_conv2d",
            self.shape(x),
            self.shape(kernels),
            self.shape(bias),
        )?;
        let (vx, vk, vb) = (self.value(x), self.value(kernels), self.value(bias));
        let hw = d.h * d.w;
        let kk = d.k * d.k;
        let p = (d.k / 2) as isize;
        let mut value = vec![S::ZERO; d.b * d.t * hw];
        let mut channel = vec![S::ZERO; hw];
        for b in 0..d.b {
            for t in 0..d.t {
                let out = &mut value[(b * d.t + t) * hw..][..hw];
                for c in 0..d.c {
                    channel.iter_mut().for_each(|v| *v = S::ZERO);
                    let plane = &vx[(b * d.c + c) * hw..][..hw];
                    let kern = &vk[((b * d.t + t) * d.c + c) * kk..][..kk];
                    for (tap, &wv) in kern.iter().enumerate() {
                        let (ky, kx) = (tap / d.k, tap % d.k);
                        tap_axpy(
                            &mut channel,
                            plane,
                            wv,
                            ky as isize - p,
                            kx as isize - p,
                            d.h,
                            d.w,
                        );
                    }
                    for (o, &v) in out.iter_mut().zip(&channel) {
                        *o += v;
                    }
                }
                let bv = vb[b * d.t + t];
                out.iter_mut().for_each(|o| *o += bv);
            }
        }
        self.push(
            "depthwise_conv2d",
            value,
            vec![d.b, d.t, d.h, d.w],
            Op::DepthwiseConv {
                x,
                k: kernels,
                b: bias,
            },
            &[x, kernels, bias],
        )
    }

    /// Ordinary convolution with weights `[C_out, C_in, K, K]` shared over the batch.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?} are inconsistent"),
            ));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel size {k} must be odd"
            )));
        }
        let (n, cin, h, w, cout) = (sx[0], sx[1], sx[2], sx[3], sw[0]);
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let hw = h * w;
        let kk = k * k;
        let p = (k / 2) as isize;
        let mut value = vec![S::ZERO; n * cout * hw];
        for ni in 0..n {
            for co in 0..cout {
                let out = &mut value[(ni * cout + co) * hw..][..hw];
                for ci in 0..cin {
                    let plane = &vx[(ni * cin + ci) * hw..][..hw];
                    let kern = &vw[(co * cin + ci) * kk..][..kk];
                    for (tap, &wv) in kern.iter().enumerate() {
                        let (ky, kx) = (tap / k, tap % k);
                        tap_axpy(out, plane, wv, ky as isize - p, kx as isize - p, h, w);
                    }
                }
                let bv = vb[co];
                out.iter_mut().for_each(|o| *o += bv);
            }
        }
        self.push(
            "conv2d",
            value,
            vec![n, cout, h, w],
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
            },
            &[x, weight, bias],
        )
    }

    /// Bilinear resampling of the last two axes (half-pixel centres,
    /// `align_corners = false`). Equal sizes return an exact copy.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("cannot resize {sx:?} to {out_h}x{out_w}"),
            ));
        }
        let r = sx.len();
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let planes = sx[..r - 2].iter().product::<usize>();
        let vx = self.value(x);
        let value = if (h, w) == (out_h, out_w) {
            vx.to_vec()
        } else {
            let ay = bilinear_axis(h, out_h);
            let ax = bilinear_axis(w, out_w);
            let mut value = vec![S::ZERO; planes * out_h * out_w];
            for pl in 0..planes {
                let src = &vx[pl * h * w..][..h * w];
                let dst = &mut value[pl * out_h * out_w..][..out_h * out_w];
                for (oy, ry) in ay.iter().enumerate() {
                    let (wy0, wy1) = (S::from_f64(ry.w0), S::from_f64(ry.w1));
                    for (ox, rx) in ax.iter().enumerate() {
                        let (wx0, wx1) = (S::from_f64(rx.w0), S::from_f64(rx.w1));
                        dst[oy * out_w + ox] = wy0
                            * (wx0 * src[ry.i0 * w + rx.i0] + wx1 * src[ry.i0 * w + rx.i1])
                            + wy1 * (wx0 * src[ry.i1 * w + rx.i0] + wx1 * src[ry.i1 * w + rx.i1]);
                    }
                }
            }
            value
        };
        let mut out = sx;
        out[r - 2] = out_h;
        out[r - 1] = out_w;
        self.push("bilinear_resize", value, out, Op::Resize(x), &[x])
    }

    /// `[N, C·r², H, W] → [N, C, H·r, W·r]` with input channel
    /// `c·r² + i·r + j` landing at row offset `i`, column offset `j`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::dim(
                "pixel_shuffle",
                format!("channels of {s:?} must be divisible by {r}²"),
            ));
        }
        if r == 1 {
            return Ok(x);
        }
        let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let v = self.reshape(x, &[n, c, r, r, h, w])?;
        let v = self.permute(v, &[0, 1, 4, 2, 5, 3])?;
        self.reshape(v, &[n, c, h * r, w * r])
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::dim(
                "pixel_unshuffle",
                format!("spatial dims of {s:?} must be divisible by {r}"),
            ));
        }
        if r == 1 {
            return Ok(x);
        }
        let (n, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let v = self.reshape(x, &[n, c, h, r, w, r])?;
        let v = self.permute(v, &[0, 1, 3, 5, 2, 4])?;
        self.reshape(v, &[n, c * r * r, h, w])
    }
}

/// Source taps of one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub struct ResizeAxis {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_axis(input: usize, output: usize) -> Vec<ResizeAxis> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            ResizeAxis {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

pub(super) fn dyn_conv_backward<S: Real>(
    nodes: &[Node<S>],
    x: Var,
    kv: Var,
    bv: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let d = dyn_dims(
        "dyn_conv2d",
        &nodes[x.0].shape,
        &nodes[kv.0].shape,
        &nodes[bv.0].shape,
    )
    .expect("validated in forward");
    let (vx, vk) = (&nodes[x.0].value, &nodes[kv.0].value);
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let p = (d.k / 2) as isize;
    if let Some(gb) = grads.slot(bv) {
        for bt in 0..d.b * d.t {
            gb[bt] += g[bt * hw..][..hw].iter().copied().sum::<S>();
        }
    }
    if let Some(gk) = grads.slot(kv) {
        for b in 0..d.b {
            for t in 0..d.t {
                let gp = &g[(b * d.t + t) * hw..][..hw];
                for c in 0..d.c {
                    let plane = &vx[(b * d.c + c) * hw..][..hw];
                    let kern = &mut gk[((b * d.t + t) * d.c + c) * kk..][..kk];
                    for (tap, gw) in kern.iter_mut().enumerate() {
                        let (ky, kx) = (tap / d.k, tap % d.k);
                        *gw += tap_dot(gp, plane, ky as isize - p, kx as isize - p, d.h, d.w);
                    }
                }
            }
        }
    }
    if let Some(gx) = grads.slot(x) {
        for b in 0..d.b {
            for t in 0..d.t {
                let gp = &g[(b * d.t + t) * hw..][..hw];
                for c in 0..d.c {
                    let gplane = &mut gx[(b * d.c + c) * hw..][..hw];
                    let kern = &vk[((b * d.t + t) * d.c + c) * kk..][..kk];
                    for (tap, &wv) in kern.iter().enumerate() {
                        let (ky, kx) = (tap / d.k, tap % d.k);
                        tap_axpy_t(gplane, gp, wv, ky as isize - p, kx as isize - p, d.h, d.w);
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_backward<S: Real>(
    nodes: &[Node<S>],
    x: Var,
    wv: Var,
    bv: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let (sx, sw) = (&nodes[x.0].shape, &nodes[wv.0].shape);
    let (n, cin, h, w, cout, k) = (sx[0], sx[1], sx[2], sx[3], sw[0], sw[2]);
    let (vx, vw) = (&nodes[x.0].value, &nodes[wv.0].value);
    let hw = h * w;
    let kk = k * k;
    let p = (k / 2) as isize;
    if let Some(gb) = grads.slot(bv) {
        for ni in 0..n {
            for (co, gbv) in gb.iter_mut().enumerate() {
                *gbv += g[(ni * cout + co) * hw..][..hw].iter().copied().sum::<S>();
            }
        }
    }
    if let Some(gw) = grads.slot(wv) {
        for ni in 0..n {
            for co in 0..cout {
                let gp = &g[(ni * cout + co) * hw..][..hw];
                for ci in 0..cin {
                    let plane = &vx[(ni * cin + ci) * hw..][..hw];
                    let kern = &mut gw[(co * cin + ci) * kk..][..kk];
                    for (tap, gwv) in kern.iter_mut().enumerate() {
                        let (ky, kx) = (tap / k, tap % k);
                        *gwv += tap_dot(gp, plane, ky as isize - p, kx as isize - p, h, w);
                    }
                }
            }
        }
    }
    if let Some(gx) = grads.slot(x) {
        for ni in 0..n {
            for co in 0..cout {
                let gp = &g[(ni * cout + co) * hw..][..hw];
                for ci in 0..cin {
                    let gplane = &mut gx[(ni * cin + ci) * hw..][..hw];
                    let kern = &vw[(co * cin + ci) * kk..][..kk];
                    for (tap, &wvv) in kern.iter().enumerate() {
                        let (ky, kx) = (tap / k, tap % k);
                        tap_axpy_t(gplane, gp, wvv, ky as isize - p, kx as isize - p, h, w);
                    }
                }
            }
        }
    }
}

pub(super) fn resize_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    x: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(gx) = grads.slot(x) else { return };
    let sx = &nodes[x.0].shape;
    let so = &nodes[out.0].shape;
    let r = sx.len();
    let (h, w, oh, ow) = (sx[r - 2], sx[r - 1], so[r - 2], so[r - 1]);
    if (h, w) == (oh, ow) {
        for (d, &v) in gx.iter_mut().zip(g) {
            *d += v;
        }
        return;
    }
    let planes = gx.len() / (h * w);
    let ay = bilinear_axis(h, oh);
    let ax = bilinear_axis(w, ow);
    for pl in 0..planes {
        let dst = &mut gx[pl * h * w..][..h * w];
        let src = &g[pl * oh * ow..][..oh * ow];
        for (oy, ry) in ay.iter().enumerate() {
            let (wy0, wy1) = (S::from_f64(ry.w0), S::from_f64(ry.w1));
            for (ox, rx) in ax.iter().enumerate() {
                let (wx0, wx1) = (S::from_f64(rx.w0), S::from_f64(rx.w1));
                let gv = src[oy * ow + ox];
                dst[ry.i0 * w + rx.i0] += wy0 * wx0 * gv;
                dst[ry.i0 * w + rx.i1] += wy0 * wx1 * gv;
                dst[ry.i1 * w + rx.i0] += wy1 * wx0 * gv;
                dst[ry.i1 * w + rx.i1] += wy1 * wx1 * gv;
            }
        }
    }
}
