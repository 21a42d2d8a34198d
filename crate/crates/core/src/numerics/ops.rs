//! Differentiable operations on [`Graph`] variables.

use crate::error::{Error, Result};
use crate::numerics::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::{Graph, NormState, Scalar, Tensor, Var};

pub const LAYER_NORM_EPSILON: f64 = 1e-6;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    SquaredRelu,
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, "operands", format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Source index and blend weight table for one resized axis, half-pixel
/// centers with edge clamping.
fn resize_table<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::of(s - i0 as f64))
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let bv = b.map(|b| self.rc(b));
        let (out, geom) = conv2d_forward(&xv, &wv, bv.as_deref(), spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let [gx, gw, gb] =
                conv2d_backward(&xv, &wv, gy, &geom, [need[0], need[1], need.get(2).copied().unwrap_or(false)]);
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(gb);
            }
            v
        };
        Ok(self.push(out, &parents, Box::new(vjp)))
    }

    /// Batch normalization over N, H, W per channel. In train mode the batch
    /// statistics normalize the input and are folded into `state`; in eval
    /// mode the running statistics are used.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, state: &mut NormState<T>) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] || state.channels() != c {
            return Err(Error::shape(OP, "channels", format!("input has {c} channels")));
        }
        let hw = h * w;
        let m = n * hw;
        let eps = T::of(state.epsilon());
        let xv = self.rc(x);
        let (gv, bv) = (self.rc(gain), self.rc(bias));
        let xd = xv.data();
        let (mean, var) = match self.mode() {
            crate::numerics::Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::of(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..][..hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                state.update(&mean, &var);
                (mean, var)
            }
            crate::numerics::Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let train = self.mode() == crate::numerics::Mode::Train;
        let shape = xv.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let g = gy.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let mf = T::of(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let gain = gv.data()[ch];
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            gx[i] = if train {
                                // dxhat = g·gain; dx = inv/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                                gain * inv[ch] / mf * (mf * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            } else {
                                g[i] * gain * inv[ch]
                            };
                        }
                    }
                }
                Tensor::new(&shape, gx).expect("shape")
            });
            vec![
                gx,
                need[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("shape")),
                need[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("shape")),
            ]
        };
        Ok(self.push(out, &[x, gain, bias], Box::new(vjp)))
    }

    /// Per-row normalization of a `[tokens, D]` matrix, then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const OP: &str = "layer_norm";
        let [t, d] = self.value(x).dims2(OP)?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(OP, "features", format!("expected gain/bias of [{d}]")));
        }
        let eps = T::of(LAYER_NORM_EPSILON);
        let df = T::of(d as f64);
        let xv = self.rc(x);
        let (gv, bv) = (self.rc(gain), self.rc(bias));
        let mut xhat = vec![T::zero(); t * d];
        let mut inv = vec![T::zero(); t];
        let mut out = vec![T::zero(); t * d];
        for r in 0..t {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            inv[r] = T::one() / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mu) * inv[r];
                xhat[r * d + j] = xh;
                out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let g = gy.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); t * d];
                for r in 0..t {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dxh = g[r * d + j] * gv.data()[j];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let dxh = g[r * d + j] * gv.data()[j];
                        gx[r * d + j] = inv[r] / df * (df * dxh - s1 - xhat[r * d + j] * s2);
                    }
                }
                Tensor::new(&[t, d], gx).expect("shape")
            });
            let reduce = |f: &dyn Fn(usize) -> T| {
                let mut acc = vec![T::zero(); d];
                for r in 0..t {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += f(r * d + j);
                    }
                }
                Tensor::new(&[d], acc).expect("shape")
            };
            vec![
                gx,
                need[1].then(|| reduce(&|i| g[i] * xhat[i])),
                need[2].then(|| reduce(&|i| g[i])),
            ]
        };
        Ok(self.push(Tensor::new(&[t, d], out)?, &[x, gain, bias], Box::new(vjp)))
    }

    /// Bilinear enlargement with half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4("upsample_bilinear")?;
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                "size",
                format!("{h}x{w} -> {out_h}x{out_w} would shrink; use resize_bilinear"),
            ));
        }
        self.resize_bilinear(x, out_h, out_w)
    }

    /// Bilinear resampling to any positive size, half-pixel centers, source
    /// coordinates clamped to the image.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "resize_bilinear";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(OP, "size", "output extent must be positive"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(x);
        }
        let ty = resize_table::<T>(h, out_h);
        let tx = resize_table::<T>(w, out_w);
        let xv = self.rc(x);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let g = &gy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[oy * out_w + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        dst[y0 * w + x0] += gt * (T::one() - fx);
                        dst[y0 * w + x1] += gt * fx;
                        dst[y1 * w + x0] += gb * (T::one() - fx);
                        dst[y1 * w + x1] += gb * fx;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, c, out_h, out_w], out)?, &[x], Box::new(vjp)))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", "axis", format!("axis {axis} invalid for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.rc(x);
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xv.data()[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xv.data()[idx(k)] - mx).exp();
                    y[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[idx(k)] /= s;
                }
            }
        }
        let yt = std::rc::Rc::new(Tensor::new(&shape, y)?);
        let yc = std::rc::Rc::clone(&yt);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let (y, g) = (yc.data(), gy.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(yc.shape(), gx).expect("shape"))]
        };
        Ok(self.push((*yt).clone(), &[x], Box::new(vjp)))
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        match f {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::SquaredRelu => self.squared_relu(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        self.note_branches(xv.data().iter().map(|&v| (v > T::zero()) as usize));
        let out = xv.map(|v| v.max(T::zero()));
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            vec![Some(gy.zip_map(&xv, |g, v| if v > T::zero() { g } else { T::zero() }))]
        };
        self.push(out, &[x], Box::new(vjp))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let y = out.clone();
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gy.zip_map(&y, |g, s| g * s * (T::one() - s)))];
        self.push(out, &[x], Box::new(vjp))
    }

    /// `max(x, 0)²`.
    pub fn squared_relu(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        self.note_branches(xv.data().iter().map(|&v| (v > T::zero()) as usize));
        let out = xv.map(|v| {
            let r = v.max(T::zero());
            r * r
        });
        let two = T::of(2.0);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gy.zip_map(&xv, |g, v| g * two * v.max(T::zero())))];
        self.push(out, &[x], Box::new(vjp))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> =
            self.value(x).data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let gx: Vec<T> = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, c, 1, 1], out)?, &[x], Box::new(vjp)))
    }

    /// `x · wᵀ + b` for `x: [tokens, Din]`, `w: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [t, din] = self.value(x).dims2(OP)?;
        let [dout, wdin] = self.value(w).dims2(OP)?;
        if din != wdin {
            return Err(Error::shape(OP, "features", format!("input has {din} features, weight expects {wdin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(OP, "bias", format!("expected [{dout}]")));
            }
        }
        let (xv, wv) = (self.rc(x), self.rc(w));
        let mut out = vec![T::zero(); t * dout];
        gemm(MatRef::new(xv.data(), t, din), MatRef::new(wv.data(), dout, din).t(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let g = gy.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); t * din];
                gemm(MatRef::new(g, t, dout), MatRef::new(wv.data(), dout, din), T::zero(), &mut gx);
                Tensor::new(&[t, din], gx).expect("shape")
            });
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); dout * din];
                gemm(MatRef::new(g, t, dout).t(), MatRef::new(xv.data(), t, din), T::zero(), &mut gw);
                Tensor::new(&[dout, din], gw).expect("shape")
            });
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (a, &r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    Tensor::new(&[dout], gb).expect("shape")
                }));
            }
            v
        };
        Ok(self.push(Tensor::new(&[t, dout], out)?, &parents, Box::new(vjp)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let vjp = |gy: &Tensor<T>, need: &[bool]| vec![need[0].then(|| gy.clone()), need[1].then(|| gy.clone())];
        Ok(self.push(out, &[a, b], Box::new(vjp)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            vec![need[0].then(|| gy.zip_map(&bv, |g, y| g * y)), need[1].then(|| gy.zip_map(&av, |g, x| g * x))]
        };
        Ok(self.push(out, &[a, b], Box::new(vjp)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gy.map(|g| g * c))];
        self.push(out, &[x], Box::new(vjp))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(Tensor::full(&shape, gy.data()[0]))];
        self.push(out, &[x], Box::new(vjp))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `x ⊙ gate` where every axis of `gate` either matches `x` or is 1.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        const OP: &str = "mul_broadcast";
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate).to_vec();
        if xs.len() != gs.len() || xs.iter().zip(&gs).any(|(a, b)| *b != 1 && a != b) {
            return Err(Error::shape(OP, "broadcast", format!("{gs:?} does not broadcast to {xs:?}")));
        }
        let (xv, gv) = (self.rc(x), self.rc(gate));
        let map = broadcast_index(&xs, &gs);
        let out: Vec<T> = xv.data().iter().zip(&map).map(|(&v, &j)| v * gv.data()[j]).collect();
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let g = gy.data();
            let gx = need[0].then(|| {
                let d: Vec<T> = g.iter().zip(&map).map(|(&gg, &j)| gg * gv.data()[j]).collect();
                Tensor::new(&xs, d).expect("shape")
            });
            let gg = need[1].then(|| {
                let mut acc = vec![T::zero(); gv.len()];
                for ((&gg, &j), &v) in g.iter().zip(&map).zip(xv.data()) {
                    acc[j] += gg * v;
                }
                Tensor::new(&gs, acc).expect("shape")
            });
            vec![gx, gg]
        };
        Ok(self.push(Tensor::new(self.value(x).shape(), out)?, &[x, gate], Box::new(vjp)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let out = self.value(x).clone().reshaped(shape)?;
        let vjp = move |gy: &Tensor<T>, _: &[bool]| vec![Some(gy.clone().reshaped(&old).expect("shape"))];
        Ok(self.push(out, &[x], Box::new(vjp)))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| Error::shape(OP, "inputs", "nothing to concatenate"))?;
        let [n, _, h, w] = self.value(first).dims4(OP)?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let [nn, c, hh, ww] = self.value(x).dims4(OP)?;
            if (nn, hh, ww) != (n, h, w) {
                return Err(Error::shape(OP, "spatial", format!("{:?} vs [{n}, _, {h}, {w}]", self.shape(x))));
            }
            chans.push(c);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let mut offs = 0;
            let mut res = Vec::with_capacity(chans.len());
            for (k, &c) in chans.iter().enumerate() {
                res.push(need[k].then(|| {
                    let mut d = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        d.extend_from_slice(&gy.data()[(b * ctot + offs) * hw..][..c * hw]);
                    }
                    Tensor::new(&[n, c, h, w], d).expect("shape")
                }));
                offs += c;
            }
            res
        };
        Ok(self.push(Tensor::new(&[n, ctot, h, w], out)?, xs, Box::new(vjp)))
    }

    /// Channels `start .. start + len` of an `[N, C, H, W]` tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("narrow_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("narrow_channels", "channels", format!("{start}+{len} exceeds {c}")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&self.value(x).data()[(b * c + start) * hw..][..len * hw]);
        }
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                gx[(b * c + start) * hw..][..len * hw].copy_from_slice(&gy.data()[b * len * hw..][..len * hw]);
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, len, h, w], out)?, &[x], Box::new(vjp)))
    }

    /// Output channel `o` is input channel `source[o]`.
    pub fn gather_channels(&mut self, x: Var, source: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("gather_channels")?;
        if let Some(&bad) = source.iter().find(|&&s| s >= c) {
            return Err(Error::shape("gather_channels", "channels", format!("source channel {bad} >= {c}")));
        }
        let hw = h * w;
        let co = source.len();
        let src = source.to_vec();
        let mut out = Vec::with_capacity(n * co * hw);
        for b in 0..n {
            for &s in &src {
                out.extend_from_slice(&self.value(x).data()[(b * c + s) * hw..][..hw]);
            }
        }
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                for (o, &s) in src.iter().enumerate() {
                    let g = &gy.data()[(b * co + o) * hw..][..hw];
                    for (d, &v) in gx[(b * c + s) * hw..][..hw].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, co, h, w], out)?, &[x], Box::new(vjp)))
    }

    /// `[N, C, H, W] -> [N·H·W, C]`: one row per pixel.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("to_tokens")?;
        let out = nchw_to_rows(self.value(x).data(), n, c, h * w);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            vec![Some(Tensor::new(&[n, c, h, w], rows_to_nchw(gy.data(), n, c, h * w)).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n * h * w, c], out)?, &[x], Box::new(vjp)))
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, t: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let [rows, c] = self.value(t).dims2("from_tokens")?;
        if rows != n * h * w {
            return Err(Error::shape("from_tokens", "tokens", format!("{rows} tokens cannot fold to {n}x{h}x{w}")));
        }
        let out = rows_to_nchw(self.value(t).data(), n, c, h * w);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            vec![Some(Tensor::new(&[n * h * w, c], nchw_to_rows(gy.data(), n, c, h * w)).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, &[t], Box::new(vjp)))
    }

    /// Quad-directional token shift. Channel quarter 0 reads each pixel's left
    /// neighbour, quarter 1 the right, quarter 2 the one above, quarter 3 the
    /// one below; neighbours outside the image read as zero.
    pub fn qshift(&mut self, x: Var) -> Result<Var> {
        let [n, d, h, w] = self.value(x).dims4("qshift")?;
        if d % 4 != 0 {
            return Err(Error::shape("qshift", "channels", format!("{d} channels are not divisible by 4")));
        }
        let out = qshift_kernel(self.value(x).data(), n, d, h, w, false);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            vec![Some(Tensor::new(&[n, d, h, w], qshift_kernel(gy.data(), n, d, h, w, true)).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, d, h, w], out)?, &[x], Box::new(vjp)))
    }

    /// Maximum over channels: `[N,C,H,W] -> [N,1,H,W]`; ties route the
    /// gradient to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("channel_max")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut arg = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if xd[(b * c + ch) * hw + p] > xd[(b * c + best) * hw + p] {
                        best = ch;
                    }
                }
                arg[b * hw + p] = best;
                out[b * hw + p] = xd[(b * c + best) * hw + p];
            }
        }
        self.note_branches(arg.iter().copied());
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                for p in 0..hw {
                    gx[(b * c + arg[b * hw + p]) * hw + p] = gy.data()[b * hw + p];
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, 1, h, w], out)?, &[x], Box::new(vjp)))
    }

    /// Mean over channels: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("channel_mean")?;
        let hw = h * w;
        let inv = T::one() / T::of(c as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                for (o, &v) in out[b * hw..(b + 1) * hw].iter_mut().zip(&xd[(b * c + ch) * hw..][..hw]) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let vjp = move |gy: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                for ch in 0..c {
                    for (d, &g) in gx[(b * c + ch) * hw..][..hw].iter_mut().zip(&gy.data()[b * hw..(b + 1) * hw]) {
                        *d = g * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("shape"))]
        };
        Ok(self.push(Tensor::new(&[n, 1, h, w], out)?, &[x], Box::new(vjp)))
    }

    /// `a ⊙ mu + b ⊙ (1 − mu)` on `[tokens, D]` rows with `mu: [D]`.
    pub fn lerp(&mut self, a: Var, b: Var, mu: Var) -> Result<Var> {
        same_shape("lerp", self.shape(a), self.shape(b))?;
        let [t, d] = self.value(a).dims2("lerp")?;
        if self.shape(mu) != [d] {
            return Err(Error::shape("lerp", "features", format!("mix coefficients must be [{d}]")));
        }
        let (av, bv, mv) = (self.rc(a), self.rc(b), self.rc(mu));
        let mut out = vec![T::zero(); t * d];
        for r in 0..t {
            for j in 0..d {
                let i = r * d + j;
                let m = mv.data()[j];
                out[i] = av.data()[i] * m + bv.data()[i] * (T::one() - m);
            }
        }
        let vjp = move |gy: &Tensor<T>, need: &[bool]| {
            let g = gy.data();
            let m = mv.data();
            let ga = need[0].then(|| Tensor::from_fn(&[t, d], |i| g[i] * m[i % d]));
            let gb = need[1].then(|| Tensor::from_fn(&[t, d], |i| g[i] * (T::one() - m[i % d])));
            let gm = need[2].then(|| {
                let mut acc = vec![T::zero(); d];
                for (i, &gg) in g.iter().enumerate() {
                    acc[i % d] += gg * (av.data()[i] - bv.data()[i]);
                }
                Tensor::new(&[d], acc).expect("shape")
            });
            vec![ga, gb, gm]
        };
        Ok(self.push(Tensor::new(&[t, d], out)?, &[a, b, mu], Box::new(vjp)))
    }
}

/// For every flat index of `full`, the flat index into the broadcast operand.
fn broadcast_index(full: &[usize], part: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut pstride = vec![0usize; rank];
    let mut s = 1;
    for a in (0..rank).rev() {
        pstride[a] = if part[a] == 1 { 0 } else { s };
        s *= part[a];
    }
    let total: usize = full.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&pstride).map(|(i, s)| i * s).sum());
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < full[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

fn nchw_to_rows<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * hw + p) * c + ch] = x[(b * c + ch) * hw + p];
            }
        }
    }
    out
}

fn rows_to_nchw<T: Scalar>(t: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * c + ch) * hw + p] = t[(b * hw + p) * c + ch];
            }
        }
    }
    out
}

/// Forward shift, or its adjoint when `adjoint` is set.
fn qshift_kernel<T: Scalar>(x: &[T], n: usize, d: usize, h: usize, w: usize, adjoint: bool) -> Vec<T> {
    let q = d / 4;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..d {
            // (dy, dx) is the offset of the neighbour that is read.
            let (dy, dx): (isize, isize) = match ch / q {
                0 => (0, -1),
                1 => (0, 1),
                2 => (-1, 0),
                _ => (1, 0),
            };
            let (dy, dx) = if adjoint { (-dy, -dx) } else { (dy, dx) };
            let plane = (b * d + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[plane + y * w + xx] = x[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}
