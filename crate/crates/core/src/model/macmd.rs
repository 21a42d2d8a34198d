//! Full network: encoder, gated skips, attention pyramid fusion, cross-stage
//! channel mixing, deepest-level enhancement and the four decoding stages.

use super::encoder::Encoder;
use super::seghead::SegHead;
use crate::apm::Apm;
use crate::error::{Error, Result, ResultExt};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::mcag::Mcag;
use crate::meab::{Meab, DEFAULT_REDUCTION};
use crate::msccm::Msccm;
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacmdConfig {
    pub in_channels: usize,
    pub channels: [usize; 4],
    /// 1 means binary segmentation with a single sigmoid logit.
    pub num_classes: usize,
    pub reduction: usize,
    pub use_mcag_apm: bool,
    pub use_msccm: bool,
    pub use_meab: bool,
}

impl MacmdConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self::with_channels([32, 64, 128, 256], num_classes)
    }

    pub fn paper_scale(num_classes: usize) -> Self {
        Self::with_channels([64, 128, 320, 512], num_classes)
    }

    pub fn with_channels(channels: [usize; 4], num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            channels,
            num_classes,
            reduction: DEFAULT_REDUCTION,
            use_mcag_apm: true,
            use_msccm: true,
            use_meab: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("input channels and class count must be positive".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 16 != 0) {
            return Err(Error::Config(format!("stage width {c} must be a positive multiple of 16")));
        }
        if self.reduction == 0 || !self.channels[3].is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "deepest width {} is not divisible by reduction {}",
                self.channels[3], self.reduction
            )));
        }
        Ok(())
    }
}

/// Logits at input resolution: `p1` final, `p2` from the third decoding stage,
/// `p3` from the second.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub p1: Var,
    pub p2: Var,
    pub p3: Var,
}

impl Predictions {
    pub fn all(&self) -> [Var; 3] {
        [self.p1, self.p2, self.p3]
    }
}

/// Merges the first decoding output with the refined finest skip.
#[derive(Clone, Debug)]
pub struct Fusion {
    reduce: Conv2d,
    bn1: BatchNorm2d,
    refine: Conv2d,
    bn2: BatchNorm2d,
}

impl Fusion {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.reduce"), 2 * channels, channels, 1, ConvSpec::default(), false)?,
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), channels)?,
            refine: Conv2d::new(ps, &format!("{name}.refine"), channels, channels, 3, ConvSpec::same(1, 1), false)?,
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let x = self.reduce.forward(g, ps, x).within("reduce")?;
        let x = self.bn1.forward(g, ps, x).within("bn1")?;
        let x = g.relu(x);
        let x = self.refine.forward(g, ps, x).within("refine")?;
        let x = self.bn2.forward(g, ps, x).within("bn2")?;
        Ok(g.relu(x))
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.bn1.param_count() + self.refine.param_count() + self.bn2.param_count()
    }
}

pub fn fusion_param_count(c: usize) -> usize {
    2 * c * c + 9 * c * c + 4 * c
}

#[derive(Clone, Debug)]
pub struct MacmdModel {
    config: MacmdConfig,
    encoder: Encoder,
    mcag: Option<[Mcag; 4]>,
    apm: Option<Apm>,
    msccm: Option<Msccm>,
    meab: Option<Meab>,
    heads: [SegHead; 4],
    fusion: Fusion,
}

impl MacmdModel {
    /// Registers every parameter in `ps` under the `encoder.` and `decoder.` prefixes.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, config: MacmdConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let k = config.num_classes;
        let encoder = Encoder::new(ps, "encoder", config.in_channels, c)?;
        let mcag = if config.use_mcag_apm {
            Some([
                Mcag::new(ps, "decoder.mcag1", c[0])?,
                Mcag::new(ps, "decoder.mcag2", c[1])?,
                Mcag::new(ps, "decoder.mcag3", c[2])?,
                Mcag::new(ps, "decoder.mcag4", c[3])?,
            ])
        } else {
            None
        };
        let apm = config.use_mcag_apm.then(|| Apm::new(ps, "decoder.apm", &c, c[0])).transpose()?;
        let msccm = config.use_msccm.then(|| Msccm::new(ps, "decoder.msccm", [c[0], c[1], c[2]])).transpose()?;
        let meab = config.use_meab.then(|| Meab::new(ps, "decoder.meab", c[3], config.reduction)).transpose()?;
        let heads = [
            SegHead::new(ps, "decoder.seghead1", c[3], c[2], 2, None)?,
            SegHead::new(ps, "decoder.seghead2", 2 * c[2], c[1], 2, Some(k))?,
            SegHead::new(ps, "decoder.seghead3", 2 * c[1], c[0], 2, Some(k))?,
            SegHead::new(ps, "decoder.seghead4", c[0], c[0] / 2, 4, Some(k))?,
        ];
        let fusion = Fusion::new(ps, "decoder.fusion", c[0])?;
        Ok(Self { config, encoder, mcag, apm, msccm, meab, heads, fusion })
    }

    pub fn config(&self) -> &MacmdConfig {
        &self.config
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, image: Var) -> Result<Predictions> {
        let [_, _, h, w] = g.value(image).dims4("macmd")?;
        let x = self.encoder.forward(g, ps, image).within("encoder")?.levels;

        let gated = match &self.mcag {
            Some(blocks) => {
                let mut out = x;
                for (i, (b, xi)) in blocks.iter().zip(x).enumerate() {
                    out[i] = b.forward(g, ps, xi).within(&format!("decoder.mcag{}", i + 1))?;
                }
                out
            }
            None => x,
        };
        let pyramid = match &self.apm {
            Some(apm) => Some(apm.forward(g, ps, &gated).within("decoder.apm")?),
            None => None,
        };
        let skips = match &self.msccm {
            Some(m) => m.forward(g, ps, [x[0], x[1], x[2]]).within("decoder.msccm")?,
            None => [x[0], x[1], x[2]],
        };
        let d4 = match &self.meab {
            Some(m) => m.forward(g, ps, gated[3]).within("decoder.meab")?,
            None => gated[3],
        };

        let d3 = self.heads[0].forward(g, ps, d4).within("decoder.seghead1")?;
        let cat = g.concat_channels(&[d3, skips[2]]).within("decoder.seghead2")?;
        let d2 = self.heads[1].forward(g, ps, cat).within("decoder.seghead2")?;
        let p3 = self.heads[1].predict(g, ps, d2).within("decoder.seghead2")?;

        let cat = g.concat_channels(&[d2, skips[1]]).within("decoder.seghead3")?;
        let mut d1 = self.heads[2].forward(g, ps, cat).within("decoder.seghead3")?;
        if let Some(y) = pyramid {
            d1 = g.add(d1, y).within("decoder.seghead3")?;
        }
        let p2 = self.heads[2].predict(g, ps, d1).within("decoder.seghead3")?;

        let cat = g.concat_channels(&[d1, skips[0]]).within("decoder.fusion")?;
        let fused = self.fusion.forward(g, ps, cat).within("decoder.fusion")?;
        let d0 = self.heads[3].forward(g, ps, fused).within("decoder.seghead4")?;
        let p1 = self.heads[3].predict(g, ps, d0).within("decoder.seghead4")?;

        Ok(Predictions {
            p1: g.resize_bilinear(p1, h, w)?,
            p2: g.resize_bilinear(p2, h, w)?,
            p3: g.resize_bilinear(p3, h, w)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.mcag.as_ref().map_or(0, |b| b.iter().map(Mcag::param_count).sum())
            + self.apm.as_ref().map_or(0, Apm::param_count)
            + self.msccm.as_ref().map_or(0, Msccm::param_count)
            + self.meab.as_ref().map_or(0, Meab::param_count)
            + self.heads.iter().map(SegHead::param_count).sum::<usize>()
            + self.fusion.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, Tensor};

    fn tiny(k: usize) -> MacmdConfig {
        MacmdConfig { reduction: 4, ..MacmdConfig::with_channels([16, 16, 32, 32], k) }
    }

    #[test]
    fn output_shapes_match_input() {
        let mut ps = ParamStore::<f32>::new(1);
        let m = MacmdModel::new(&mut ps, tiny(3)).unwrap();
        assert_eq!(m.param_count(), ps.element_count());
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::from_fn(&[2, 3, 64, 32], |i| (i % 13) as f32 / 13.0));
        let p = m.forward(&mut g, &mut ps, x).unwrap();
        for v in p.all() {
            assert_eq!(g.shape(v), &[2, 3, 64, 32]);
            assert!(g.value(v).all_finite());
        }
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let full = {
            let mut ps = ParamStore::<f32>::new(0);
            MacmdModel::new(&mut ps, tiny(2)).unwrap();
            ps.element_count()
        };
        for (a, b, c) in [(false, true, true), (true, false, true), (true, true, false), (false, false, false)] {
            let cfg = MacmdConfig { use_mcag_apm: a, use_msccm: b, use_meab: c, ..tiny(2) };
            let mut ps = ParamStore::<f32>::new(0);
            let m = MacmdModel::new(&mut ps, cfg).unwrap();
            assert!(ps.element_count() < full);
            let mut g = Graph::new(Mode::Eval);
            let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
            let p = m.forward(&mut g, &mut ps, x).unwrap();
            assert_eq!(g.shape(p.p1), &[1, 2, 32, 32]);
        }
    }

    #[test]
    fn non_multiple_input_names_required_multiple() {
        let mut ps = ParamStore::<f32>::new(0);
        let m = MacmdModel::new(&mut ps, tiny(2)).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 32]));
        let err = m.forward(&mut g, &mut ps, x).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
        assert!(err.contains("encoder"), "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut ps = ParamStore::<f32>::new(0);
        assert!(MacmdModel::new(&mut ps, MacmdConfig::with_channels([24, 32, 64, 128], 2)).is_err());
        assert!(MacmdModel::new(&mut ps, MacmdConfig { num_classes: 0, ..tiny(2) }).is_err());
        assert!(MacmdModel::new(&mut ps, MacmdConfig { reduction: 5, ..tiny(2) }).is_err());
    }
}
