//! Multi-dilated contextual attention gate.
//!
//! `x1 = BN(HDConv(x))`, `a = σ(BN(conv1x1(ReLU(x1))))` with a single gate
//! channel broadcast over all channels, output `x1 ⊙ a`.

use crate::error::{Error, Result, ResultExt};
use crate::hdconv::{hdconv_macs, HdConv};
use crate::layers::{conv_macs, BatchNorm2d, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Mcag {
    pub hdconv: HdConv,
    pub bn1: BatchNorm2d,
    pub attn_conv: Conv2d,
    pub bn2: BatchNorm2d,
    channels: usize,
}

/// Intermediate values of one gate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct McagTrace {
    pub x1: Var,
    pub gate: Var,
    pub out: Var,
}

impl Mcag {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(16) {
            return Err(Error::Config(format!("{name}: channels {channels} must be a multiple of 16")));
        }
        Ok(Self {
            hdconv: HdConv::new(ps, &format!("{name}.hdconv"), channels, channels)?,
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), channels)?,
            attn_conv: Conv2d::new(ps, &format!("{name}.attn_conv"), channels, 1, 1, ConvSpec::default(), true)?,
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), 1)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, ps, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<McagTrace> {
        let [_, c, _, _] = g.value(x).dims4("mcag")?;
        if c != self.channels {
            return Err(Error::shape("mcag", "channels", format!("expected {}, got {c}", self.channels)));
        }
        let h = self.hdconv.forward(g, ps, x).within("hdconv")?;
        let x1 = self.bn1.forward(g, ps, h).within("bn1")?;
        let r = g.relu(x1);
        let a = self.attn_conv.forward(g, ps, r).within("attn_conv")?;
        let a = self.bn2.forward(g, ps, a).within("bn2")?;
        let gate = g.sigmoid(a);
        let out = g.mul_broadcast(x1, gate)?;
        Ok(McagTrace { x1, gate, out })
    }

    pub fn param_count(&self) -> usize {
        self.hdconv.param_count() + self.bn1.param_count() + self.attn_conv.param_count() + self.bn2.param_count()
    }
}

/// Learnable elements of one gate with `c` channels:
/// `9c² + c` (HDConv with biases) `+ 2c` (BN) `+ c + 1` (gate conv) `+ 2` (gate BN).
pub fn mcag_param_count(c: usize) -> usize {
    9 * c * c + c + 2 * c + (c + 1) + 2
}

pub fn mcag_macs(c: usize, h: usize, w: usize) -> u64 {
    hdconv_macs(c, c, h, w) + conv_macs(c, 1, 1, 1, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, Tensor};

    #[test]
    fn closed_form_param_counts() {
        // 9·64² + 64 + 128 + 65 + 2
        assert_eq!(mcag_param_count(64), 37_123);
        assert_eq!(mcag_param_count(512), 2_361_347);
        assert_eq!([64, 128, 320, 512].iter().map(|&c| mcag_param_count(c)).sum::<usize>(), 3_469_324);
        let mut ps = ParamStore::<f32>::new(0);
        let m = Mcag::new(&mut ps, "m", 64).unwrap();
        assert_eq!(m.param_count(), 37_123);
        assert_eq!(ps.element_count(), 37_123);
    }

    #[test]
    fn zero_gate_halves_x1() {
        let mut ps = ParamStore::<f64>::new(5);
        let m = Mcag::new(&mut ps, "m", 16).unwrap();
        ps.get_mut(m.attn_conv.weight).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::inference(Mode::Eval);
        let x = g.constant(Tensor::from_fn(&[1, 16, 5, 5], |i| (i as f64 * 0.37).sin()));
        let t = m.trace(&mut g, &mut ps, x).unwrap();
        assert!(g.value(t.gate).data().iter().all(|&a| a == 0.5));
        let half = g.value(t.x1).map(|v| 0.5 * v);
        assert_eq!(g.value(t.out), &half);
    }

    #[test]
    fn gate_is_shared_across_channels() {
        let mut ps = ParamStore::<f64>::new(6);
        let m = Mcag::new(&mut ps, "m", 32).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::from_fn(&[2, 32, 6, 6], |i| ((i * 7919) % 97) as f64 / 48.0 - 1.0));
        let t = m.trace(&mut g, &mut ps, x).unwrap();
        let (x1, out) = (g.value(t.x1), g.value(t.out));
        for n in 0..2 {
            for y in 0..6 {
                for xx in 0..6 {
                    let ratios: Vec<f64> = (0..32)
                        .filter(|&c| x1.at4(n, c, y, xx).abs() > 1e-9)
                        .map(|c| out.at4(n, c, y, xx) / x1.at4(n, c, y, xx))
                        .collect();
                    for r in &ratios {
                        assert!((r - ratios[0]).abs() < 1e-6);
                        assert!(*r > 0.0 && *r < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut ps = ParamStore::<f32>::new(0);
        let m = Mcag::new(&mut ps, "m", 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 32, 4, 4]));
        assert!(m.forward(&mut g, &mut ps, x).is_err());
        assert!(Mcag::new(&mut ps, "bad", 24).is_err());
    }
}
