//! 2-D cross-correlation kernels (forward and both backward products).
//!
//! General grouped convolution lowers each (image, group) pair to one GEMM over
//! an im2col buffer; depthwise convolution uses a direct loop instead.

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), dilation: (1, 1), groups: 1 }
    }
}

impl ConvSpec {
    /// Stride 1, the given symmetric padding and dilation.
    pub fn same(padding: usize, dilation: usize) -> Self {
        Self { padding: (padding, padding), dilation: (dilation, dilation), ..Self::default() }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Resolved shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = match *x {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(OP, "input rank", format!("expected N,C,H,W, got {x:?}"))),
        };
        let [cout, cig, kh, kw] = match *w {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(OP, "weight rank", format!("expected Cout,Cin/groups,kh,kw, got {w:?}"))),
        };
        let g = spec.groups;
        if g == 0 || cin % g != 0 {
            return Err(Error::shape(OP, "groups", format!("groups {g} does not divide input channels {cin}")));
        }
        if cout % g != 0 {
            return Err(Error::shape(OP, "groups", format!("groups {g} does not divide output channels {cout}")));
        }
        if cig != cin / g {
            return Err(Error::shape(
                OP,
                "channels",
                format!("weight expects {cig} channels per group, input provides {}", cin / g),
            ));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(Error::shape(OP, "stride", "stride and dilation must be positive"));
        }
        let span_h = spec.dilation.0 * (kh - 1) + 1;
        let span_w = spec.dilation.1 * (kw - 1) + 1;
        if h + 2 * spec.padding.0 < span_h {
            return Err(Error::shape(OP, "height", format!("kernel span {span_h} exceeds padded height")));
        }
        if wd + 2 * spec.padding.1 < span_w {
            return Err(Error::shape(OP, "width", format!("kernel span {span_w} exceeds padded width")));
        }
        let oh = (h + 2 * spec.padding.0 - span_h) / spec.stride.0 + 1;
        let ow = (wd + 2 * spec.padding.1 - span_w) / spec.stride.1 + 1;
        Ok(Self { n, cin, h, w: wd, cout, kh, kw, oh, ow, spec })
    }

    fn cig(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cog(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn patch(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout && self.spec.groups > 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Input coordinate sampled by output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.oh, g.ow);
    let s = g.spec;
    for ci in 0..g.cig() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    match ConvGeom::src(oy, ki, s.stride.0, s.dilation.0, s.padding.0, g.h) {
                        None => out.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = match ConvGeom::src(ox, kj, s.stride.1, s.dilation.1, s.padding.1, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.oh, g.ow);
    let s = g.spec;
    for ci in 0..g.cig() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(iy) = ConvGeom::src(oy, ki, s.stride.0, s.dilation.0, s.padding.0, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..ow {
                        if let Some(ix) = ConvGeom::src(ox, kj, s.stride.1, s.dilation.1, s.padding.1, g.w) {
                            dst[ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d", "bias", format!("expected [{}], got {:?}", g.cout, b.shape())));
        }
    }
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    let l = g.oh * g.ow;
    if g.is_depthwise() {
        depthwise_forward(x.data(), w.data(), &g, &mut out);
    } else {
        let (cig, cog, patch) = (g.cig(), g.cog(), g.patch());
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * l] };
        for n in 0..g.n {
            for grp in 0..spec.groups {
                let xs = &x.data()[(n * g.cin + grp * cig) * g.h * g.w..][..cig * g.h * g.w];
                let rhs = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols[..]
                };
                let wg = &w.data()[grp * cog * patch..(grp + 1) * cog * patch];
                let dst = &mut out[(n * g.cout + grp * cog) * l..][..cog * l];
                gemm(MatRef::new(wg, cog, patch), MatRef::new(rhs, patch, l), T::zero(), dst);
            }
        }
    }
    if let Some(b) = b {
        for n in 0..g.n {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut out[(n * g.cout + co) * l..][..l] {
                    *v += bv;
                }
            }
        }
    }
    Ok((Tensor::new(&g.out_shape(), out)?, g))
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let s = g.spec;
    let (oh, ow, kk) = (g.oh, g.ow, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * kk..(c + 1) * kk];
            let dst = &mut out[(n * g.cout + c) * oh * ow..][..oh * ow];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wc[ki * g.kw + kj];
                    for oy in 0..oh {
                        let Some(iy) = ConvGeom::src(oy, ki, s.stride.0, s.dilation.0, s.padding.0, g.h) else {
                            continue;
                        };
                        let row = &plane[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kj, s.stride.1, s.dilation.1, s.padding.1, g.w) {
                                *d += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to (input, weight, bias), each
/// computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let l = g.oh * g.ow;
    let gyd = gy.data();
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gyd[(n * g.cout + co) * l..][..l].iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[g.cout], gb).expect("bias grad shape")
    });
    if !need[0] && !need[1] {
        return [None, None, gb];
    }
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
    if g.is_depthwise() {
        depthwise_backward(x.data(), w.data(), gyd, g, gx.as_deref_mut(), gw.as_deref_mut());
    } else {
        let (cig, cog, patch) = (g.cig(), g.cog(), g.patch());
        let pointwise = g.is_pointwise();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * l }];
        let mut gcols = vec![T::zero(); if gx.is_some() && !pointwise { patch * l } else { 0 }];
        for n in 0..g.n {
            for grp in 0..g.spec.groups {
                let x_off = (n * g.cin + grp * cig) * g.h * g.w;
                let gyg = &gyd[(n * g.cout + grp * cog) * l..][..cog * l];
                let wg = &w.data()[grp * cog * patch..(grp + 1) * cog * patch];
                if let Some(gw) = gw.as_deref_mut() {
                    let xs = &x.data()[x_off..][..cig * g.h * g.w];
                    let rhs = if pointwise {
                        xs
                    } else {
                        im2col(xs, g, &mut cols);
                        &cols[..]
                    };
                    // gw[cog, patch] += gy[cog, l] · colsᵀ[l, patch]
                    gemm(
                        MatRef::new(gyg, cog, l),
                        MatRef::new(rhs, patch, l).t(),
                        T::one(),
                        &mut gw[grp * cog * patch..(grp + 1) * cog * patch],
                    );
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gxs = &mut gx[x_off..][..cig * g.h * g.w];
                    if pointwise {
                        gemm(MatRef::new(wg, cog, patch).t(), MatRef::new(gyg, cog, l), T::one(), gxs);
                    } else {
                        gemm(MatRef::new(wg, cog, patch).t(), MatRef::new(gyg, cog, l), T::zero(), &mut gcols);
                        col2im(&gcols, g, gxs);
                    }
                }
            }
        }
    }
    [
        gx.map(|v| Tensor::new(x.shape(), v).expect("input grad shape")),
        gw.map(|v| Tensor::new(w.shape(), v).expect("weight grad shape")),
        gb,
    ]
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let s = g.spec;
    let (oh, ow, kk) = (g.oh, g.ow, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let gyc = &gy[(n * g.cout + c) * oh * ow..][..oh * ow];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[c * kk + ki * g.kw + kj];
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let Some(iy) = ConvGeom::src(oy, ki, s.stride.0, s.dilation.0, s.padding.0, g.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = ConvGeom::src(ox, kj, s.stride.1, s.dilation.1, s.padding.1, g.w) {
                                let gv = gyc[oy * ow + ox];
                                let xi = base + iy * g.w + ix;
                                acc += gv * x[xi];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xi] += gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[c * kk + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
}
