//! Hybrid multi-dilated 3×3 convolution.
//!
//! Four parallel 3×3 branches at dilations 1, 2, 3 and 5 each produce a quarter
//! of the output channels. Every branch output is cut into four sub-groups and
//! the sub-groups are interleaved cyclically, so each output quarter carries
//! one sub-group from every dilation rate. The layer has exactly the parameter
//! count of one dense 3×3 convolution.

use crate::error::{Error, Result, ResultExt};
use crate::layers::{conv_macs, conv_params, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamStore, Scalar, Var};

pub const DILATIONS: [usize; 4] = [1, 2, 3, 5];

#[derive(Clone, Debug)]
pub struct HdConv {
    branches: Vec<Conv2d>,
    cin: usize,
    cout: usize,
    sources: Vec<usize>,
}

impl HdConv {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if cout == 0 || !cout.is_multiple_of(16) {
            return Err(Error::Config(format!("{name}: output channels {cout} must be a positive multiple of 16")));
        }
        let branches = DILATIONS
            .iter()
            .enumerate()
            .map(|(b, &d)| Conv2d::new(ps, &format!("{name}.branch{b}"), cin, cout / 4, 3, ConvSpec::same(d, d), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches, cin, cout, sources: regroup_sources(cout) })
    }

    pub fn dilations(&self) -> [usize; 4] {
        DILATIONS
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let raw = self.forward_branches(g, ps, x)?;
        g.gather_channels(raw, &self.sources)
    }

    /// Concatenated branch outputs before regrouping.
    pub fn forward_branches<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .enumerate()
            .map(|(b, conv)| conv.forward(g, ps, x).within(&format!("branch{b}")))
            .collect::<Result<Vec<_>>>()?;
        g.concat_channels(&outs)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Conv2d::param_count).sum()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        hdconv_macs(self.cin, self.cout, h, w)
    }
}

/// Regrouping table: output channel `o` reads concatenated branch channel
/// `sources[o]`. Output quarter `j` is the concatenation over branches `b` of
/// sub-group `(b + j) mod 4` of branch `b`.
pub fn regroup_sources(cout: usize) -> Vec<usize> {
    let quarter = cout / 4;
    let sub = cout / 16;
    let mut sources = Vec::with_capacity(cout);
    for j in 0..4 {
        for b in 0..4 {
            let k = (b + j) % 4;
            sources.extend((0..sub).map(|t| b * quarter + k * sub + t));
        }
    }
    sources
}

pub fn hdconv_param_count(cin: usize, cout: usize, with_bias: bool) -> usize {
    4 * conv_params(cin, cout / 4, 3, 1, with_bias)
}

pub fn hdconv_macs(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    4 * conv_macs(cin, cout / 4, 3, 1, h, w)
}
