//! Parameterized building blocks shared by the decoder modules.

use crate::error::Result;
use crate::numerics::{ConvSpec, Graph, Init, NormId, ParamId, ParamKind, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        Self::with_init(ps, name, cin, cout, kernel, spec, bias, None)
    }

    /// Like [`Conv2d::new`] but with an explicit weight initializer.
    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let cig = cin / spec.groups;
        let fan_in = cig * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[cout, cig, kernel, kernel],
            init.unwrap_or(Init::He { fan_in }),
        )?;
        let bias = if bias { Some(ps.add(format!("{name}.bias"), ParamKind::Bias, &[cout], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, cin, cout, kernel, spec })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        conv_params(self.cin, self.cout, self.kernel, self.spec.groups, self.bias.is_some())
    }
}

/// Learnable elements of a square-kernel convolution.
pub fn conv_params(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * kernel * kernel + if bias { cout } else { 0 }
}

/// Multiply-accumulates of a convolution producing `out_h × out_w` per image.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, groups: usize, out_h: usize, out_w: usize) -> u64 {
    (cout * (cin / groups) * kernel * kernel) as u64 * (out_h * out_w) as u64
}

/// Batch normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gain: ParamId,
    pub bias: ParamId,
    pub state: NormId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.add(format!("{name}.gain"), ParamKind::NormGain, &[channels], Init::Const(1.0))?,
            bias: ps.add(format!("{name}.bias"), ParamKind::NormBias, &[channels], Init::Zeros)?,
            state: ps.add_norm(name, channels)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.batch_norm(x, gain, bias, ps.norm_mut(self.state))
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub features: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.add(format!("{name}.gain"), ParamKind::NormGain, &[features], Init::Const(1.0))?,
            bias: ps.add(format!("{name}.bias"), ParamKind::NormBias, &[features], Init::Zeros)?,
            features,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let weight =
            ps.add(format!("{name}.weight"), ParamKind::Weight, &[dout, din], init.unwrap_or(Init::He { fan_in: din }))?;
        let bias = if bias { Some(ps.add(format!("{name}.bias"), ParamKind::Bias, &[dout], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, din, dout })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }
}
