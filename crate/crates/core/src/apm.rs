//! Attention pooling modulation.
//!
//! Each pyramid level is projected to a common width, upsampled to the finest
//! level, and the levels are blended with per-pixel softmax weights taken
//! across scales. The blend `F` then modulates every level bidirectionally:
//! `γᵢ = ReLU(BN(conv(X̂ᵢ⊙σ(F) ⊙ F⊙σ(X̂ᵢ))))`, `Y = mean(γᵢ ⊙ X̂ᵢ)`.

use crate::error::{Error, Result, ResultExt};
use crate::layers::{conv_macs, conv_params, BatchNorm2d, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Apm {
    projections: Vec<(Conv2d, BatchNorm2d)>,
    attn1: Conv2d,
    attn2: Conv2d,
    mod_conv: Conv2d,
    mod_bn: BatchNorm2d,
    width: usize,
}

/// Result of the cross-scale fusion.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// Scale weights stacked along axis 1: `[N, scales, H, W]`.
    pub weights: Var,
    pub fused: Var,
}

impl Apm {
    /// `in_channels` lists the pyramid widths finest first; `width` is the
    /// common projected width.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_channels: &[usize], width: usize) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(8) {
            return Err(Error::Config(format!("{name}: common width {width} must be a positive multiple of 8")));
        }
        if in_channels.is_empty() {
            return Err(Error::Config(format!("{name}: needs at least one pyramid level")));
        }
        let unit = ConvSpec::default();
        let projections = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Ok((
                    Conv2d::new(ps, &format!("{name}.proj{}.conv", i + 1), c, width, 1, unit, true)?,
                    BatchNorm2d::new(ps, &format!("{name}.proj{}.bn", i + 1), width)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            attn1: Conv2d::new(ps, &format!("{name}.attn1"), width, width / 8, 1, unit, true)?,
            // a bias here shifts every scale equally and cancels in the softmax
            attn2: Conv2d::new(ps, &format!("{name}.attn2"), width / 8, 1, 1, unit, false)?,
            mod_conv: Conv2d::new(ps, &format!("{name}.mod_conv"), width, width, 1, unit, true)?,
            mod_bn: BatchNorm2d::new(ps, &format!("{name}.mod_bn"), width)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, xs: &[Var]) -> Result<Var> {
        let aligned = self.align(g, ps, xs)?;
        let fusion = self.fuse(g, ps, &aligned)?;
        self.modulate(g, ps, &aligned, fusion.fused)
    }

    /// Projects each level at its native resolution (1×1 conv, BN, ReLU) and
    /// then upsamples it to the resolution of the first level.
    pub fn align<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.projections.len() {
            return Err(Error::shape(
                "apm_align",
                "levels",
                format!("expected {} levels, got {}", self.projections.len(), xs.len()),
            ));
        }
        let [_, _, h1, w1] = g.value(xs[0]).dims4("apm_align")?;
        let mut out = Vec::with_capacity(xs.len());
        for (i, (&x, (conv, bn))) in xs.iter().zip(&self.projections).enumerate() {
            let [_, _, h, w] = g.value(x).dims4("apm_align")?;
            if h << i != h1 || w << i != w1 {
                return Err(Error::shape(
                    "apm_align",
                    "spatial",
                    format!("level {} is {h}x{w}, expected {}x{}", i + 1, h1 >> i, w1 >> i),
                ));
            }
            let path = format!("proj{}", i + 1);
            let p = conv.forward(g, ps, x).within(&path)?;
            let p = bn.forward(g, ps, p).within(&path)?;
            let p = g.relu(p);
            out.push(g.upsample_bilinear(p, h1, w1)?);
        }
        Ok(out)
    }

    /// Per-pixel attention score of one aligned level: `[N, 1, H, W]`.
    pub fn score<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attn1.forward(g, ps, x).within("attn1")?;
        let a = g.relu(a);
        self.attn2.forward(g, ps, a).within("attn2")
    }

    /// Softmax over scales of the attention scores, then the weighted sum of
    /// the aligned levels. Accepts any number of levels.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, aligned: &[Var]) -> Result<Fusion> {
        let first = *aligned.first().ok_or_else(|| Error::shape("apm_fuse", "levels", "no input maps"))?;
        for &a in aligned {
            if g.shape(a) != g.shape(first) {
                return Err(Error::shape("apm_fuse", "levels", "aligned maps differ in shape"));
            }
        }
        let scores = aligned.iter().map(|&x| self.score(g, ps, x)).collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_channels(&scores)?;
        let weights = g.softmax(stacked, 1)?;
        let mut fused = None;
        for (i, &x) in aligned.iter().enumerate() {
            let a = g.narrow_channels(weights, i, 1)?;
            let term = g.mul_broadcast(x, a)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(Fusion { weights, fused: fused.expect("at least one level") })
    }

    /// Modulation weights `γᵢ` for each level.
    pub fn gammas<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        aligned: &[Var],
        fused: Var,
    ) -> Result<Vec<Var>> {
        let sig_f = g.sigmoid(fused);
        aligned
            .iter()
            .map(|&x| {
                let f_mod = g.mul(x, sig_f)?;
                let sig_x = g.sigmoid(x);
                let x_mod = g.mul(fused, sig_x)?;
                let both = g.mul(f_mod, x_mod)?;
                let m = self.mod_conv.forward(g, ps, both).within("mod_conv")?;
                let m = self.mod_bn.forward(g, ps, m).within("mod_bn")?;
                Ok(g.relu(m))
            })
            .collect()
    }

    pub fn modulate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        aligned: &[Var],
        fused: Var,
    ) -> Result<Var> {
        let gammas = self.gammas(g, ps, aligned, fused)?;
        let mut acc = None;
        for (&gm, &x) in gammas.iter().zip(aligned) {
            let z = g.mul(gm, x)?;
            acc = Some(match acc {
                None => z,
                Some(a) => g.add(a, z)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::shape("apm_modulate", "levels", "no input maps"))?;
        Ok(g.scale(acc, T::one() / T::of(aligned.len() as f64)))
    }

    pub fn param_count(&self) -> usize {
        self.projections.iter().map(|(c, b)| c.param_count() + b.param_count()).sum::<usize>()
            + self.attn1.param_count()
            + self.attn2.param_count()
            + self.mod_conv.param_count()
            + self.mod_bn.param_count()
    }
}

pub fn apm_param_count(in_channels: &[usize], width: usize) -> usize {
    let proj: usize = in_channels.iter().map(|&c| conv_params(c, width, 1, 1, true) + 2 * width).sum();
    proj + conv_params(width, width / 8, 1, 1, true)
        + conv_params(width / 8, 1, 1, 1, false)
        + conv_params(width, width, 1, 1, true)
        + 2 * width
}

/// MACs for levels of size `(h1 >> i, w1 >> i)`.
pub fn apm_macs(in_channels: &[usize], width: usize, h1: usize, w1: usize) -> u64 {
    let s = in_channels.len() as u64;
    let proj: u64 = in_channels.iter().enumerate().map(|(i, &c)| conv_macs(c, width, 1, 1, h1 >> i, w1 >> i)).sum();
    proj + s * (conv_macs(width, width / 8, 1, 1, h1, w1) + conv_macs(width / 8, 1, 1, 1, h1, w1))
        + s * conv_macs(width, width, 1, 1, h1, w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, Tensor};

    fn pyramid(g: &mut Graph<f64>, chans: &[usize], n: usize, h: usize) -> Vec<Var> {
        chans
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = h >> i;
                g.constant(Tensor::from_fn(&[n, c, s, s], |k| ((k * 2654435761 + i) % 1000) as f64 / 500.0 - 1.0))
            })
            .collect()
    }

    #[test]
    fn paper_scale_param_count() {
        let chans = [64, 128, 320, 512];
        assert_eq!(apm_param_count(&chans, 64), 71_120);
        let mut ps = ParamStore::<f32>::new(0);
        let apm = Apm::new(&mut ps, "apm", &chans, 64).unwrap();
        assert_eq!(apm.param_count(), 71_120);
        assert_eq!(ps.element_count(), 71_120);
        // align share: Σ Cᵢ·64·HᵢWᵢ at 56, 28, 14, 7
        let align: u64 = [(64u64, 3136u64), (128, 784), (320, 196), (512, 49)].iter().map(|(c, hw)| c * 64 * hw).sum();
        assert_eq!(align, 24_887_296);
    }

    #[test]
    fn weights_sum_to_one_and_single_scale_is_identity() {
        let mut ps = ParamStore::<f64>::new(2);
        let apm = Apm::new(&mut ps, "apm", &[16, 16, 32, 32], 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let xs = pyramid(&mut g, &[16, 16, 32, 32], 2, 8);
        let aligned = apm.align(&mut g, &mut ps, &xs).unwrap();
        for &a in &aligned {
            assert_eq!(g.shape(a), &[2, 16, 8, 8]);
        }
        let f = apm.fuse(&mut g, &ps, &aligned).unwrap();
        let w = g.value(f.weights);
        for n in 0..2 {
            for p in 0..64 {
                let s: f64 = (0..4).map(|k| w.data()[(n * 4 + k) * 64 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let single = apm.fuse(&mut g, &ps, &aligned[..1]).unwrap();
        assert_eq!(g.value(single.fused), g.value(aligned[0]));
    }

    #[test]
    fn fuse_is_permutation_equivariant() {
        let mut ps = ParamStore::<f64>::new(4);
        let apm = Apm::new(&mut ps, "apm", &[16, 16, 16, 16], 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let xs = pyramid(&mut g, &[16, 16, 16, 16], 1, 8);
        let aligned = apm.align(&mut g, &mut ps, &xs).unwrap();
        let a = apm.fuse(&mut g, &ps, &aligned).unwrap();
        let perm = [aligned[2], aligned[0], aligned[3], aligned[1]];
        let b = apm.fuse(&mut g, &ps, &perm).unwrap();
        assert!(g.value(a.fused).max_abs_diff(g.value(b.fused)) < 1e-12);
    }

    #[test]
    fn equal_scores_average_the_levels() {
        let mut ps = ParamStore::<f64>::new(4);
        let apm = Apm::new(&mut ps, "apm", &[16, 16], 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let xs = pyramid(&mut g, &[16, 16], 1, 4);
        let aligned = apm.align(&mut g, &mut ps, &xs).unwrap();
        let copy = [aligned[0], aligned[0]];
        let f = apm.fuse(&mut g, &ps, &copy).unwrap();
        assert!(g.value(f.weights).data().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_inputs_give_zero_output_and_gammas_are_nonnegative() {
        let mut ps = ParamStore::<f64>::new(8);
        let apm = Apm::new(&mut ps, "apm", &[16, 32], 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let z = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
        let y = apm.modulate(&mut g, &mut ps, &[z, z], z).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
        let xs = pyramid(&mut g, &[16, 32], 2, 8);
        let aligned = apm.align(&mut g, &mut ps, &xs).unwrap();
        let f = apm.fuse(&mut g, &ps, &aligned).unwrap();
        for gm in apm.gammas(&mut g, &mut ps, &aligned, f.fused).unwrap() {
            assert!(g.value(gm).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn non_halving_pyramid_is_rejected() {
        let mut ps = ParamStore::<f64>::new(8);
        let apm = Apm::new(&mut ps, "apm", &[16, 16], 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let a = g.constant(Tensor::zeros(&[1, 16, 8, 8]));
        let b = g.constant(Tensor::zeros(&[1, 16, 3, 4]));
        assert!(apm.align(&mut g, &mut ps, &[a, b]).is_err());
    }
}
