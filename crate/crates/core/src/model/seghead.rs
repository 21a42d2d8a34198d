//! Decoding stage: upsample, 1×1 point operation, pointwise channel change,
//! 9×9 depthwise convolution, BN and ReLU, with an optional prediction tap.

use crate::error::{Result, ResultExt};
use crate::layers::{conv_macs, conv_params, BatchNorm2d, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

pub const DEPTHWISE_KERNEL: usize = 9;

#[derive(Clone, Debug)]
pub struct SegHead {
    point_op: Conv2d,
    pointwise: Conv2d,
    depthwise: Conv2d,
    bn: BatchNorm2d,
    pred: Option<Conv2d>,
    factor: usize,
}

impl SegHead {
    /// `classes` adds a 1×1 prediction conv on the stage output.
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        classes: Option<usize>,
    ) -> Result<Self> {
        let unit = ConvSpec::default();
        let dw = ConvSpec::same(DEPTHWISE_KERNEL / 2, 1).with_groups(cout);
        Ok(Self {
            point_op: Conv2d::new(ps, &format!("{name}.point_op"), cin, cin, 1, unit, true)?,
            pointwise: Conv2d::new(ps, &format!("{name}.pointwise"), cin, cout, 1, unit, true)?,
            depthwise: Conv2d::new(ps, &format!("{name}.depthwise"), cout, cout, DEPTHWISE_KERNEL, dw, true)?,
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cout)?,
            pred: classes.map(|k| Conv2d::new(ps, &format!("{name}.pred"), cout, k, 1, unit, true)).transpose()?,
            factor,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4("seghead")?;
        let x = g.upsample_bilinear(x, h * self.factor, w * self.factor)?;
        let x = self.point_op.forward(g, ps, x).within("point_op")?;
        let x = self.pointwise.forward(g, ps, x).within("pointwise")?;
        let x = self.depthwise.forward(g, ps, x).within("depthwise")?;
        let x = self.bn.forward(g, ps, x).within("bn")?;
        Ok(g.relu(x))
    }

    /// Class logits from a stage output; panics if the head has no tap.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        self.pred.as_ref().expect("head built with a prediction tap").forward(g, ps, x).within("pred")
    }

    pub fn param_count(&self) -> usize {
        self.point_op.param_count()
            + self.pointwise.param_count()
            + self.depthwise.param_count()
            + self.bn.param_count()
            + self.pred.as_ref().map_or(0, Conv2d::param_count)
    }
}

pub fn seghead_param_count(cin: usize, cout: usize, classes: Option<usize>) -> usize {
    conv_params(cin, cin, 1, 1, true)
        + conv_params(cin, cout, 1, 1, true)
        + conv_params(cout, cout, DEPTHWISE_KERNEL, cout, true)
        + 2 * cout
        + classes.map_or(0, |k| conv_params(cout, k, 1, 1, true))
}

/// MACs with the head's output at `h × w` (after upsampling).
pub fn seghead_macs(cin: usize, cout: usize, classes: Option<usize>, h: usize, w: usize) -> u64 {
    conv_macs(cin, cin, 1, 1, h, w)
        + conv_macs(cin, cout, 1, 1, h, w)
        + conv_macs(cout, cout, DEPTHWISE_KERNEL, cout, h, w)
        + classes.map_or(0, |k| conv_macs(cout, k, 1, 1, h, w))
}
