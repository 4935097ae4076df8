//! 2-D convolution (im2col + gemm, with a direct depthwise path) and
//! nearest-neighbour upsampling.

use super::{counter, gemm, record, Element, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams {
            stride,
            padding,
            groups,
        }
    }

    /// Output extent along one spatial axis.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.groups > 1
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn macs(&self) -> u64 {
        (self.n * self.cin_g() * self.cout * self.k * self.k * self.ho * self.wo) as u64
    }
}

/// `x[N,Cin,H,W] * w[Cout,Cin/g,k,k] (+ bias[Cout])` with the given stride, padding and groups.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, cin_g, kh, kw] = match w.shape() {
        &[a, b, c, d] => [a, b, c, d],
        other => return Err(Error::shape("conv2d", "weight rank", 4, other.len())),
    };
    if p.groups == 0 || cin % p.groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: input channels {cin} not divisible by groups {}",
            p.groups
        )));
    }
    if cout % p.groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: output channels {cout} not divisible by groups {}",
            p.groups
        )));
    }
    if p.stride == 0 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    if kh == 0 || kh != kw {
        return Err(Error::Config(format!("conv2d: kernel must be square and >= 1, got {kh}x{kw}")));
    }
    if cin_g != cin / p.groups {
        return Err(Error::shape("conv2d", "weight input channels", cin / p.groups, cin_g));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", "bias length", cout, format!("{:?}", b.shape())));
        }
    }
    let ho = p
        .out_extent(h, kh)
        .ok_or_else(|| Error::shape("conv2d", "height", format!(">= {}", kh), h + 2 * p.padding))?;
    let wo = p
        .out_extent(wd, kw)
        .ok_or_else(|| Error::shape("conv2d", "width", format!(">= {}", kw), wd + 2 * p.padding))?;
    let g = Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        ho,
        wo,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
    };

    let mut out = if g.depthwise() {
        depthwise_forward(x.data(), w.data(), &g)
    } else {
        im2col_forward(x.data(), w.data(), &g)
    };
    counter::add(g.macs());
    if let Some(b) = bias {
        let plane = ho * wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }

    let xd = x.data_arc();
    let wdata = w.data_arc();
    let need = [x.requires_grad(), w.requires_grad(), bias.is_some_and(|b| b.requires_grad())];
    let mut inputs: Vec<&Tensor<T>> = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    record("conv2d", &inputs, vec![n, cout, ho, wo], out, move |gy| {
        let (gx, gw) = if g.depthwise() {
            depthwise_backward(&xd, &wdata, gy, &g, need[0], need[1])
        } else {
            im2col_backward(&xd, &wdata, gy, &g, need[0], need[1])
        };
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(need[2].then(|| {
                let plane = ho * wo;
                let mut gb = vec![T::zero(); cout];
                for (i, chunk) in gy.chunks(plane).enumerate() {
                    gb[i % cout] += chunk.iter().fold(T::zero(), |a, b| a + *b);
                }
                gb
            }));
        }
        grads
    })
}

/// Unfold one image's group of channels into `[cin_g*k*k, ho*wo]`.
fn im2col<T: Element>(x: &[T], g: &Geometry, c0: usize, cols: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let src = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geometry, c0: usize, gx: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let dst = &mut gx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let plane = g.ho * g.wo;
    let kk = g.cin_g() * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for b in 0..g.n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let colm = if g.pointwise() {
                MatRef::rm(&xb[c0 * plane..(c0 + g.cin_g()) * plane], kk, plane)
            } else {
                im2col(xb, g, c0, &mut cols);
                MatRef::rm(&cols, kk, plane)
            };
            let o0 = grp * g.cout_g();
            let wm = MatRef::rm(&w[o0 * kk..(o0 + g.cout_g()) * kk], g.cout_g(), kk);
            let dst = &mut out[(b * g.cout + o0) * plane..(b * g.cout + o0 + g.cout_g()) * plane];
            gemm(T::one(), wm, colm, T::zero(), MatMut::rm(dst, g.cout_g(), plane));
        }
    }
    out
}

fn im2col_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let kk = g.cin_g() * g.k * g.k;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..g.n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let o0 = grp * g.cout_g();
            let gym = MatRef::rm(
                &gy[(b * g.cout + o0) * plane..(b * g.cout + o0 + g.cout_g()) * plane],
                g.cout_g(),
                plane,
            );
            if let Some(gw) = gw.as_mut() {
                let colm = if g.pointwise() {
                    MatRef::rm(&xb[c0 * plane..(c0 + g.cin_g()) * plane], kk, plane)
                } else {
                    im2col(xb, g, c0, &mut cols);
                    MatRef::rm(&cols, kk, plane)
                };
                let dst = &mut gw[o0 * kk..(o0 + g.cout_g()) * kk];
                gemm(T::one(), gym, colm.t(), T::one(), MatMut::rm(dst, g.cout_g(), kk));
            }
            if let Some(gx) = gx.as_mut() {
                let wt = MatRef::rm_t(&w[o0 * kk..(o0 + g.cout_g()) * kk], g.cout_g(), kk);
                let gxb = &mut gx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                if g.pointwise() {
                    let dst = &mut gxb[c0 * plane..(c0 + g.cin_g()) * plane];
                    gemm(T::one(), wt, gym, T::zero(), MatMut::rm(dst, kk, plane));
                } else {
                    gemm(T::one(), wt, gym, T::zero(), MatMut::rm(&mut cols, kk, plane));
                    col2im(&cols, g, c0, gxb);
                }
            }
        }
    }
    (gx, gw)
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    for b in 0..g.n {
        for c in 0..g.cin {
            let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
            let wk = &w[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(b * g.cin + c) * g.ho * g.wo..(b * g.cin + c + 1) * g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                acc += wk[ky * k + kx] * src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.n {
        for c in 0..g.cin {
            let xo = (b * g.cin + c) * g.h * g.w;
            let yo = (b * g.cin + c) * g.ho * g.wo;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = gy[yo + oy * g.wo + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = xo + iy as usize * g.w + ix as usize;
                            let wi = c * k * k + ky * k + kx;
                            if let Some(gx) = gx.as_mut() {
                                gx[xi] += gv * w[wi];
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Replicate every pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("upsample_nearest")?;
    if factor < 1 {
        return Err(Error::Config("upsample_nearest: factor must be >= 1".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / factor]);
            }
        }
    }
    record("upsample_nearest", &[x], vec![n, c, ho, wo], out, move |g| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for (p, gplane) in g.chunks(ho * wo).enumerate() {
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(oy / factor) * w + ox / factor] += gplane[oy * wo + ox];
                }
            }
        }
        vec![Some(gx)]
    })
}
