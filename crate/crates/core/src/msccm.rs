//! Multi-scale cross-channel mixer.
//!
//! Stages 1–3 are brought to stage-1 resolution and width, concatenated, and
//! every pixel becomes one token of width `D = 3·C₁`. A channel-mix block with
//! a quad-directional token shift runs over the tokens with a residual; the
//! result is split back into three stages at their native size and width.

use crate::error::{Error, Result, ResultExt};
use crate::layers::{conv_macs, conv_params, Conv2d, LayerNorm, Linear};
use crate::numerics::{ConvSpec, Graph, Init, ParamId, ParamKind, ParamStore, Scalar, Var};

/// Channel mixing over pixel tokens:
/// `u = LN(x)`, `s = qshift(u)`,
/// `r = σ(W_r(lerp(u, s, μ_r)))`, `k = W_k(lerp(u, s, μ_k))`,
/// output `r ⊙ W_v(relu(k)²)`.
#[derive(Clone, Debug)]
pub struct ChannelMixCore {
    pub norm: LayerNorm,
    pub mu_r: ParamId,
    pub mu_k: ParamId,
    pub w_r: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    dim: usize,
}

pub const HIDDEN_RATIO: usize = 2;

impl ChannelMixCore {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(4) {
            return Err(Error::Config(format!("{name}: token width {dim} must be divisible by 4")));
        }
        let hidden = HIDDEN_RATIO * dim;
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
            mu_r: ps.add(format!("{name}.mu_r"), ParamKind::MixCoefficient, &[dim], Init::Const(0.5))?,
            mu_k: ps.add(format!("{name}.mu_k"), ParamKind::MixCoefficient, &[dim], Init::Const(0.5))?,
            w_r: Linear::new(ps, &format!("{name}.w_r"), dim, dim, false, None)?,
            w_k: Linear::new(ps, &format!("{name}.w_k"), dim, hidden, false, None)?,
            w_v: Linear::new(ps, &format!("{name}.w_v"), hidden, dim, false, Some(Init::Zeros))?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `tokens` is `[n·h·w, D]` in [`Graph::to_tokens`] order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        tokens: Var,
        grid: (usize, usize, usize),
    ) -> Result<Var> {
        let [t, d] = g.value(tokens).dims2("channel_mix")?;
        let (n, h, w) = grid;
        if t != n * h * w {
            return Err(Error::shape("channel_mix", "tokens", format!("{t} tokens for a {n}x{h}x{w} grid")));
        }
        if d != self.dim {
            return Err(Error::shape("channel_mix", "features", format!("expected {}, got {d}", self.dim)));
        }
        let u = self.norm.forward(g, ps, tokens).within("norm")?;
        let grid_u = g.from_tokens(u, n, h, w)?;
        let shifted = g.qshift(grid_u)?;
        let s = g.to_tokens(shifted)?;
        let mu_r = g.param(ps, self.mu_r);
        let mu_k = g.param(ps, self.mu_k);
        let xr = g.lerp(u, s, mu_r)?;
        let xk = g.lerp(u, s, mu_k)?;
        let r = self.w_r.forward(g, ps, xr).within("w_r")?;
        let r = g.sigmoid(r);
        let k = self.w_k.forward(g, ps, xk).within("w_k")?;
        let k = g.squared_relu(k);
        let v = self.w_v.forward(g, ps, k).within("w_v")?;
        g.mul(r, v)
    }
}

pub fn channel_mix_param_count(dim: usize) -> usize {
    let hidden = HIDDEN_RATIO * dim;
    2 * dim + 2 * dim + dim * dim + dim * hidden + hidden * dim
}

pub fn channel_mix_macs(dim: usize, tokens: usize) -> u64 {
    let hidden = HIDDEN_RATIO * dim;
    tokens as u64 * (dim * dim + dim * hidden + hidden * dim) as u64
}

#[derive(Clone, Debug)]
pub struct Msccm {
    in_projs: Vec<Conv2d>,
    pub core: ChannelMixCore,
    out_projs: Vec<Conv2d>,
    width: usize,
}

impl Msccm {
    /// `channels` are the widths of stages 1–3.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: [usize; 3]) -> Result<Self> {
        let c1 = channels[0];
        let unit = ConvSpec::default();
        let in_projs = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(ps, &format!("{name}.in_proj{}", i + 1), c, c1, 1, unit, true))
            .collect::<Result<Vec<_>>>()?;
        let core = ChannelMixCore::new(ps, &format!("{name}.mix"), 3 * c1)?;
        let out_projs = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(ps, &format!("{name}.out_proj{}", i + 1), c1, c, 1, unit, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { in_projs, core, out_projs, width: c1 })
    }

    pub fn in_projection(&self, stage: usize) -> &Conv2d {
        &self.in_projs[stage]
    }

    pub fn out_projection(&self, stage: usize) -> &Conv2d {
        &self.out_projs[stage]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, xs: [Var; 3]) -> Result<[Var; 3]> {
        let sizes = xs.map(|x| {
            let s = g.shape(x);
            (s[2], s[3])
        });
        let cat = self.align(g, ps, xs)?;
        let mixed = self.mix(g, ps, cat)?;
        self.restore(g, ps, mixed, sizes)
    }

    /// Stage 1 is projected directly; stages 2 and 3 are upsampled to stage-1
    /// resolution and then projected. Result `[N, 3·C₁, H₁, W₁]`.
    pub fn align<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, xs: [Var; 3]) -> Result<Var> {
        let [n, _, h1, w1] = g.value(xs[0]).dims4("msccm_align")?;
        let mut parts = Vec::with_capacity(3);
        for (i, (&x, proj)) in xs.iter().zip(&self.in_projs).enumerate() {
            let [nn, _, h, w] = g.value(x).dims4("msccm_align")?;
            if nn != n || h << i != h1 || w << i != w1 {
                return Err(Error::shape(
                    "msccm_align",
                    "spatial",
                    format!("stage {} is {h}x{w}, expected {}x{}", i + 1, h1 >> i, w1 >> i),
                ));
            }
            let up = g.upsample_bilinear(x, h1, w1)?;
            parts.push(proj.forward(g, ps, up).within(&format!("in_proj{}", i + 1))?);
        }
        g.concat_channels(&parts)
    }

    /// Unfold to pixel tokens, channel-mix with residual, fold back.
    pub fn mix<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, cat: Var) -> Result<Var> {
        let [n, _, h, w] = g.value(cat).dims4("msccm_mix")?;
        let tokens = g.to_tokens(cat)?;
        let mixed = self.core.forward(g, ps, tokens, (n, h, w)).within("mix")?;
        let sum = g.add(mixed, tokens)?;
        g.from_tokens(sum, n, h, w)
    }

    /// Splits the mixed map into three `C₁` groups; group `i` is projected to
    /// `Cᵢ` and resized to stage `i`'s resolution. The projection runs before
    /// the resize; both are linear per pixel so the order does not change the
    /// result, only the cost.
    pub fn restore<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        mixed: Var,
        sizes: [(usize, usize); 3],
    ) -> Result<[Var; 3]> {
        let [_, d, _, _] = g.value(mixed).dims4("msccm_restore")?;
        if d != 3 * self.width {
            return Err(Error::shape("msccm_restore", "channels", format!("expected {}, got {d}", 3 * self.width)));
        }
        let mut out = Vec::with_capacity(3);
        for (i, proj) in self.out_projs.iter().enumerate() {
            let part = g.narrow_channels(mixed, i * self.width, self.width)?;
            let p = proj.forward(g, ps, part).within(&format!("out_proj{}", i + 1))?;
            out.push(g.resize_bilinear(p, sizes[i].0, sizes[i].1)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn param_count(&self) -> usize {
        self.in_projs.iter().chain(&self.out_projs).map(Conv2d::param_count).sum::<usize>()
            + channel_mix_param_count(self.core.dim())
    }
}

pub fn msccm_param_count(channels: [usize; 3]) -> usize {
    let c1 = channels[0];
    channels.iter().map(|&c| conv_params(c, c1, 1, 1, true) + conv_params(c1, c, 1, 1, true)).sum::<usize>()
        + channel_mix_param_count(3 * c1)
}

/// MACs with stage 1 at `h1 × w1`. Every projection runs at stage-1 resolution.
pub fn msccm_macs(channels: [usize; 3], h1: usize, w1: usize) -> u64 {
    let c1 = channels[0];
    let projs: u64 =
        channels.iter().map(|&c| conv_macs(c, c1, 1, 1, h1, w1) + conv_macs(c1, c, 1, 1, h1, w1)).sum();
    projs + channel_mix_macs(3 * c1, h1 * w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, Tensor};

    #[test]
    fn closed_forms_at_paper_scale() {
        assert_eq!(channel_mix_param_count(192), 185_088);
        // projection weights alone: 2·(64·64 + 64·128 + 64·320)
        let weights: usize = [64, 128, 320].iter().map(|&c| 2 * 64 * c).sum();
        assert_eq!(weights, 65_536);
        assert_eq!(msccm_param_count([64, 128, 320]), 185_088 + 65_536 + 3 * 64 + 64 + 128 + 320);
        assert_eq!(channel_mix_macs(192, 3136), 578_027_520);
        let mut ps = ParamStore::<f32>::new(0);
        let m = Msccm::new(&mut ps, "msccm", [64, 128, 320]).unwrap();
        assert_eq!(m.param_count(), msccm_param_count([64, 128, 320]));
        assert_eq!(ps.element_count(), m.param_count());
    }

    #[test]
    fn shapes_and_zero_path() {
        let mut ps = ParamStore::<f32>::new(1);
        let m = Msccm::new(&mut ps, "msccm", [16, 32, 48]).unwrap();
        let mut g = Graph::new(Mode::Train);
        let xs = [
            g.constant(Tensor::zeros(&[2, 16, 8, 8])),
            g.constant(Tensor::zeros(&[2, 32, 4, 4])),
            g.constant(Tensor::zeros(&[2, 48, 2, 2])),
        ];
        let cat = m.align(&mut g, &ps, xs).unwrap();
        assert_eq!(g.shape(cat), &[2, 48, 8, 8]);
        assert_eq!(g.value(cat).max_abs(), 0.0);
        let out = m.forward(&mut g, &mut ps, xs).unwrap();
        assert_eq!(g.shape(out[0]), &[2, 16, 8, 8]);
        assert_eq!(g.shape(out[1]), &[2, 32, 4, 4]);
        assert_eq!(g.shape(out[2]), &[2, 48, 2, 2]);
        for o in out {
            assert_eq!(g.value(o).max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_value_projection_makes_mixing_the_identity() {
        let mut ps = ParamStore::<f32>::new(2);
        let m = Msccm::new(&mut ps, "msccm", [16, 16, 16]).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::from_fn(&[1, 48, 4, 4], |i| (i as f32 * 0.1).cos()));
        let mixed = m.mix(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(mixed), g.value(x));
    }

    #[test]
    fn token_count_must_match_grid() {
        let mut ps = ParamStore::<f64>::new(2);
        let core = ChannelMixCore::new(&mut ps, "c", 8).unwrap();
        let mut g = Graph::new(Mode::Train);
        let t = g.constant(Tensor::zeros(&[10, 8]));
        assert!(core.forward(&mut g, &ps, t, (1, 3, 3)).is_err());
        assert!(ChannelMixCore::new(&mut ps, "bad", 6).is_err());
    }
}
