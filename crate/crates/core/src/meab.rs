//! Multi-dilated enhanced attention block for the deepest pyramid level:
//! two HDConv/BN/ReLU stacks, then channel attention (pool + MLP) followed by
//! spatial attention (7×7 conv over channelwise max and mean).

use crate::error::{Error, Result, ResultExt};
use crate::hdconv::{hdconv_macs, HdConv};
use crate::layers::{conv_macs, BatchNorm2d, Conv2d, Linear};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

pub const DEFAULT_REDUCTION: usize = 16;
const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct Meab {
    hd1: HdConv,
    bn1: BatchNorm2d,
    hd2: HdConv,
    bn2: BatchNorm2d,
    ca_fc1: Linear,
    ca_fc2: Linear,
    sa_conv: Conv2d,
    channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MeabTrace {
    /// Activation before either attention gate.
    pub features: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
    pub out: Var,
}

impl Meab {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if !channels.is_multiple_of(16) || reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "{name}: channels {channels} must be a multiple of 16 and of the reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            hd1: HdConv::new(ps, &format!("{name}.hd1"), channels, channels)?,
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), channels)?,
            hd2: HdConv::new(ps, &format!("{name}.hd2"), channels, channels)?,
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), channels)?,
            ca_fc1: Linear::new(ps, &format!("{name}.ca_fc1"), channels, hidden, true, None)?,
            ca_fc2: Linear::new(ps, &format!("{name}.ca_fc2"), hidden, channels, true, None)?,
            sa_conv: Conv2d::new(
                ps,
                &format!("{name}.sa_conv"),
                2,
                1,
                SPATIAL_KERNEL,
                ConvSpec::same(SPATIAL_KERNEL / 2, 1),
                true,
            )?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, ps, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<MeabTrace> {
        let [n, c, _, _] = g.value(x).dims4("meab")?;
        if c != self.channels {
            return Err(Error::shape("meab", "channels", format!("expected {}, got {c}", self.channels)));
        }
        let u = self.hd1.forward(g, ps, x).within("hd1")?;
        let u = self.bn1.forward(g, ps, u).within("bn1")?;
        let u = g.relu(u);
        let u = self.hd2.forward(g, ps, u).within("hd2")?;
        let u = self.bn2.forward(g, ps, u).within("bn2")?;
        let features = g.relu(u);

        let pooled = g.global_avg_pool(features)?;
        let rows = g.reshape(pooled, &[n, c])?;
        let hid = self.ca_fc1.forward(g, ps, rows).within("ca_fc1")?;
        let hid = g.relu(hid);
        let logits = self.ca_fc2.forward(g, ps, hid).within("ca_fc2")?;
        let gate = g.sigmoid(logits);
        let channel_gate = g.reshape(gate, &[n, c, 1, 1])?;
        let refined = g.mul_broadcast(features, channel_gate)?;

        let mx = g.channel_max(refined)?;
        let mean = g.channel_mean(refined)?;
        let stats = g.concat_channels(&[mx, mean])?;
        let sa = self.sa_conv.forward(g, ps, stats).within("sa_conv")?;
        let spatial_gate = g.sigmoid(sa);
        let out = g.mul_broadcast(refined, spatial_gate)?;
        Ok(MeabTrace { features, channel_gate, spatial_gate, out })
    }

    pub fn param_count(&self) -> usize {
        self.hd1.param_count()
            + self.hd2.param_count()
            + self.bn1.param_count()
            + self.bn2.param_count()
            + self.ca_fc1.param_count()
            + self.ca_fc2.param_count()
            + self.sa_conv.param_count()
    }
}

pub fn meab_param_count(c: usize, reduction: usize) -> usize {
    let hidden = c / reduction;
    2 * (9 * c * c + c) + 4 * c + (c * hidden + hidden) + (hidden * c + c) + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL + 1
}

/// MACs for one image at `h × w`; the channel MLP runs once per image.
pub fn meab_macs(c: usize, reduction: usize, h: usize, w: usize) -> u64 {
    let hidden = c / reduction;
    2 * hdconv_macs(c, c, h, w) + (2 * c * hidden) as u64 + conv_macs(2, 1, SPATIAL_KERNEL, 1, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, Tensor};

    #[test]
    fn closed_form_param_counts() {
        assert_eq!(meab_param_count(512, 16), 4_755_075);
        // 2·(9·256 + 16) + 4·16 + (16·4 + 4 + 4·16 + 16) + 99
        assert_eq!(meab_param_count(16, 4), 4_951);
        let mut ps = ParamStore::<f32>::new(0);
        let m = Meab::new(&mut ps, "meab", 16, 4).unwrap();
        assert_eq!(m.param_count(), 4_951);
        assert_eq!(ps.element_count(), 4_951);
    }

    #[test]
    fn macs_at_paper_scale() {
        let macs = meab_macs(512, 16, 7, 7);
        assert_eq!(2 * 9 * 512 * 512 * 49, 231_211_008);
        assert_eq!(macs, 231_211_008 + 2 * 512 * 32 + 98 * 49);
    }

    #[test]
    fn construction_constraints() {
        let mut ps = ParamStore::<f32>::new(0);
        assert!(Meab::new(&mut ps, "a", 24, 4).is_err());
        assert!(Meab::new(&mut ps, "b", 32, 5).is_err());
    }

    #[test]
    fn gates_are_bounded_and_separable() {
        let mut ps = ParamStore::<f64>::new(3);
        let m = Meab::new(&mut ps, "meab", 32, 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::from_fn(&[2, 32, 5, 6], |i| ((i * 7907) % 101) as f64 / 50.0 - 1.0));
        let t = m.trace(&mut g, &mut ps, x).unwrap();
        assert_eq!(g.shape(t.channel_gate), &[2, 32, 1, 1]);
        assert_eq!(g.shape(t.spatial_gate), &[2, 1, 5, 6]);
        for gate in [t.channel_gate, t.spatial_gate] {
            assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let (u, out) = (g.value(t.features), g.value(t.out));
        for (a, b) in u.data().iter().zip(out.data()) {
            assert!(b.abs() <= a.abs());
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut ps = ParamStore::<f64>::new(3);
        let m = Meab::new(&mut ps, "meab", 16, 16).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
        let y = m.forward(&mut g, &mut ps, x).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }
}
