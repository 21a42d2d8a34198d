//! Analytic parameter and MAC accounting; nothing is executed.

use std::fmt::Write as _;

use super::encoder::{encoder_macs, encoder_param_count};
use super::macmd::{fusion_param_count, MacmdConfig};
use super::seghead::{seghead_macs, seghead_param_count};
use crate::apm::{apm_macs, apm_param_count};
use crate::error::{Error, Result};
use crate::layers::conv_macs;
use crate::mcag::{mcag_macs, mcag_param_count};
use crate::meab::{meab_macs, meab_param_count};
use crate::model::INPUT_MULTIPLE;
use crate::msccm::{msccm_macs, msccm_param_count};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileRow {
    pub name: &'static str,
    /// Parameter-name prefix owning this row's tensors.
    pub prefix: &'static str,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Profile {
    pub rows: Vec<ProfileRow>,
    pub input_size: (usize, usize),
}

/// Per-module counts for one image of `h × w`.
pub fn profile(cfg: &MacmdConfig, h: usize, w: usize) -> Result<Profile> {
    cfg.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Config(format!("input {h}x{w} must be a multiple of {INPUT_MULTIPLE} in both axes")));
    }
    let c = cfg.channels;
    let k = cfg.num_classes;
    let (h1, w1) = (h / 4, w / 4);
    let mut rows = vec![ProfileRow {
        name: "encoder",
        prefix: "encoder.",
        params: encoder_param_count(cfg.in_channels, c),
        macs: encoder_macs(cfg.in_channels, c, h, w),
    }];
    if cfg.use_mcag_apm {
        rows.push(ProfileRow {
            name: "mcag",
            prefix: "decoder.mcag",
            params: c.iter().map(|&ci| mcag_param_count(ci)).sum(),
            macs: (0..4).map(|i| mcag_macs(c[i], h1 >> i, w1 >> i)).sum(),
        });
        rows.push(ProfileRow {
            name: "apm",
            prefix: "decoder.apm.",
            params: apm_param_count(&c, c[0]),
            macs: apm_macs(&c, c[0], h1, w1),
        });
    }
    if cfg.use_msccm {
        let c3 = [c[0], c[1], c[2]];
        rows.push(ProfileRow {
            name: "msccm",
            prefix: "decoder.msccm.",
            params: msccm_param_count(c3),
            macs: msccm_macs(c3, h1, w1),
        });
    }
    if cfg.use_meab {
        rows.push(ProfileRow {
            name: "meab",
            prefix: "decoder.meab.",
            params: meab_param_count(c[3], cfg.reduction),
            macs: meab_macs(c[3], cfg.reduction, h1 >> 3, w1 >> 3),
        });
    }
    let heads = [
        (c[3], c[2], None, h1 >> 2, w1 >> 2),
        (2 * c[2], c[1], Some(k), h1 >> 1, w1 >> 1),
        (2 * c[1], c[0], Some(k), h1, w1),
        (c[0], c[0] / 2, Some(k), h, w),
    ];
    rows.push(ProfileRow {
        name: "seghead",
        prefix: "decoder.seghead",
        params: heads.iter().map(|&(i, o, k, _, _)| seghead_param_count(i, o, k)).sum(),
        macs: heads.iter().map(|&(i, o, k, hh, ww)| seghead_macs(i, o, k, hh, ww)).sum(),
    });
    rows.push(ProfileRow {
        name: "fusion",
        prefix: "decoder.fusion.",
        params: fusion_param_count(c[0]),
        macs: conv_macs(2 * c[0], c[0], 1, 1, h1, w1) + conv_macs(c[0], c[0], 3, 1, h1, w1),
    });
    Ok(Profile { rows, input_size: (h, w) })
}

impl Profile {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn row(&self, name: &str) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Share of total parameters, in percent.
    pub fn percent(&self, row: &ProfileRow) -> f64 {
        100.0 * row.params as f64 / self.total_params().max(1) as f64
    }

    /// Tab-separated rows: name, params, MACs, percent of total parameters.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("module\tparams\tmacs\tpercent\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.2}", r.name, r.params, r.macs, self.percent(r));
        }
        let _ = writeln!(s, "total\t{}\t{}\t100.00", self.total_params(), self.total_macs());
        s
    }

    pub fn to_table(&self) -> String {
        let (h, w) = self.input_size;
        let mut s = format!("input {h}x{w}\n{:<10} {:>12} {:>10} {:>14} {:>9} {:>8}\n", "module", "params", "M", "MACs", "GMac", "%");
        let line = |s: &mut String, name: &str, p: usize, m: u64, pct: f64| {
            let _ = writeln!(s, "{name:<10} {p:>12} {:>10.3} {m:>14} {:>9.3} {pct:>8.2}", p as f64 / 1e6, m as f64 / 1e9);
        };
        for r in &self.rows {
            line(&mut s, r.name, r.params, r.macs, self.percent(r));
        }
        line(&mut s, "total", self.total_params(), self.total_macs(), 100.0);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MacmdModel;
    use crate::numerics::ParamStore;

    fn check_consistency(cfg: MacmdConfig) {
        let p = profile(&cfg, 64, 64).unwrap();
        let mut ps = ParamStore::<f32>::new(0);
        let m = MacmdModel::new(&mut ps, cfg).unwrap();
        for r in &p.rows {
            assert_eq!(ps.element_count_with_prefix(r.prefix), r.params, "{}", r.name);
        }
        assert_eq!(p.total_params(), ps.element_count());
        assert_eq!(m.param_count(), ps.element_count());
    }

    #[test]
    fn profile_matches_instantiated_counts() {
        check_consistency(MacmdConfig::toy(3));
        check_consistency(MacmdConfig::toy(1));
        check_consistency(MacmdConfig { use_msccm: false, use_meab: false, ..MacmdConfig::toy(2) });
        check_consistency(MacmdConfig { use_mcag_apm: false, ..MacmdConfig::toy(4) });
    }

    #[test]
    fn paper_scale_rows() {
        let p = profile(&MacmdConfig::paper_scale(9), 224, 224).unwrap();
        assert_eq!(p.row("mcag").unwrap().params, 3_469_324);
        assert_eq!(p.row("meab").unwrap().params, 4_755_075);
        assert_eq!(p.row("msccm").unwrap().params, 251_328);
        assert_eq!(p.row("apm").unwrap().params, 71_120);
    }

    #[test]
    fn text_outputs() {
        let p = profile(&MacmdConfig::toy(3), 64, 64).unwrap();
        let tsv = p.to_tsv();
        let first = tsv.lines().nth(1).unwrap();
        assert_eq!(first.split('\t').count(), 4);
        assert!(first.split('\t').nth(3).unwrap().split('.').nth(1).unwrap().len() == 2);
        assert!(p.to_table().lines().count() == p.rows.len() + 3);
        assert!(profile(&MacmdConfig::toy(3), 65, 64).is_err());
    }
}
