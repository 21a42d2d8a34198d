//! Finite-difference gradient checks for every differentiable building block,
//! from single ops up to the full model under the deep-supervision loss.

use std::time::{Duration, Instant};

use macmd_core::apm::Apm;
use macmd_core::hdconv::HdConv;
use macmd_core::layers::{BatchNorm2d, Conv2d, LayerNorm};
use macmd_core::mcag::Mcag;
use macmd_core::meab::Meab;
use macmd_core::model::{MacmdConfig, MacmdModel, SegHead};
use macmd_core::msccm::Msccm;
use macmd_core::numerics::{grad_check_model, CheckOptions, ConvSpec, CounterRng, GradCheckReport, Scheme};
use macmd_core::objective::{LossWeights, MaskBatch};
use macmd_core::{Graph64, Mode, ParamStore64, Result, Tensor64, Var};

/// Error bound for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Error bound for modules and losses built from several operations.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Error bound for the losses on their own.
pub const LOSS_TOLERANCE: f64 = 1e-5;

/// Training-mode passes that set running statistics before an
/// evaluation-mode check; at momentum 0.1 the initial values keep a weight
/// of 0.9³⁰⁰ ≈ 2e-14.
const CALIBRATION_PASSES: usize = 300;

pub const CASES: [&str; 14] = [
    "conv2d",
    "batch_norm",
    "layer_norm",
    "bilinear_upsample",
    "softmax",
    "hdconv",
    "mcag",
    "apm",
    "msccm",
    "meab",
    "seghead",
    "dice_loss",
    "ce_loss",
    "full_model",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut CounterRng, shape: &[usize], offset: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.normal() + offset)
}

fn labels(rng: &mut CounterRng, shape: [usize; 3], classes: usize) -> MaskBatch {
    let n = shape.iter().product();
    MaskBatch::new(shape, (0..n).map(|_| rng.below(classes as u64) as u32).collect()).expect("label shape")
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph64, out: Var, seed: u64) -> Result<Var> {
    let mut rng = CounterRng::new(seed ^ 0x5eed);
    let r = g.constant(random(&mut rng, g.shape(out), 0.0));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Ridders' extrapolation from a wide step keeps both truncation and
/// roundoff below the tolerances, including for small derivatives;
/// coordinates whose differences cross a relu or argmax boundary restart at
/// steps down to 1e-8.
fn opts(samples: usize, seed: u64, mode: Mode) -> CheckOptions {
    CheckOptions { step: 1e-2, samples_per_tensor: samples, seed, mode, scheme: Scheme::Ridders, kink_retries: 6 }
}

/// Gradient check of `f` at `xs`. Evaluation-mode checks first run
/// training-mode passes over fresh random inputs of the same shapes, so the
/// running statistics describe the input distribution rather than their
/// unit initial values or the one checked batch.
fn check<F>(f: F, ps: &mut ParamStore64, xs: &[Tensor64], offset: f64, rng: &mut CounterRng, o: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph64, &mut ParamStore64, &[Var]) -> Result<Var>,
{
    if o.mode == Mode::Eval {
        for _ in 0..CALIBRATION_PASSES {
            let mut g = Graph64::inference(Mode::Train);
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(random(rng, t.shape(), offset))).collect();
            f(&mut g, ps, &vars)?;
        }
    }
    grad_check_model(f, ps, xs, o)
}

/// Runs one named case.
pub fn run_case(name: &str, seed: u64) -> Result<CaseResult> {
    let (&name, primitive) = CASES
        .iter()
        .position(|&c| c == name)
        .map(|i| (&CASES[i], i < 5))
        .ok_or_else(|| macmd_core::Error::Config(format!("unknown gradient case `{name}`; known: {}", CASES.join(", "))))?;
    let mut rng = CounterRng::new(seed);
    let mut ps = ParamStore64::new(seed);
    let start = Instant::now();
    // Composites run their batch norms on running statistics: in training mode
    // the bias of a conv feeding a batch norm has an exactly zero gradient,
    // which differences only resolve to roundoff. Training-mode batch norm
    // has its own primitive case.
    let o = if primitive { opts(usize::MAX, seed, Mode::Train) } else { opts(6, seed, Mode::Eval) };
    let r = &mut rng;
    let report = match name {
        "conv2d" => {
            let spec = ConvSpec::same(2, 2).with_stride(2);
            let conv = Conv2d::new(&mut ps, "conv", 4, 6, 3, spec, true)?;
            let x = random(r, &[2, 4, 7, 7], 0.0);
            check(|g, ps, xs| { let y = conv.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.0, r, &o)?
        }
        "batch_norm" => {
            let bn = BatchNorm2d::new(&mut ps, "bn", 3)?;
            for p in ps.iter_mut() {
                p.value = random(r, p.value.shape(), 1.0);
            }
            let x = random(r, &[2, 3, 4, 5], 0.0);
            check(|g, ps, xs| { let y = bn.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.0, r, &o)?
        }
        "layer_norm" => {
            let ln = LayerNorm::new(&mut ps, "ln", 12)?;
            for p in ps.iter_mut() {
                p.value = random(r, p.value.shape(), 1.0);
            }
            let x = random(r, &[10, 12], 0.0);
            check(|g, ps, xs| { let y = ln.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.0, r, &o)?
        }
        "bilinear_upsample" => {
            let x = random(r, &[2, 3, 5, 4], 0.0);
            check(
                |g, _, xs| {
                    let y = g.upsample_bilinear(xs[0], 11, 8)?;
                    project(g, y, seed)
                },
                &mut ps,
                &[x],
                0.0,
                r,
                &o,
            )?
        }
        "softmax" => {
            let x = random(r, &[2, 5, 3, 3], 0.0);
            check(
                |g, _, xs| {
                    let y = g.softmax(xs[0], 1)?;
                    project(g, y, seed)
                },
                &mut ps,
                &[x],
                0.0,
                r,
                &o,
            )?
        }
        "hdconv" => {
            let hd = HdConv::new(&mut ps, "hd", 8, 16)?;
            let x = random(r, &[2, 8, 9, 9], 0.0);
            check(|g, ps, xs| { let y = hd.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.0, r, &o)?
        }
        "mcag" => {
            let m = Mcag::new(&mut ps, "mcag", 16)?;
            let x = random(r, &[2, 16, 8, 8], 0.1);
            check(|g, ps, xs| { let y = m.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.1, r, &o)?
        }
        "apm" => {
            let widths = [16, 16, 32, 32];
            let apm = Apm::new(&mut ps, "apm", &widths, 16)?;
            let xs: Vec<Tensor64> = (0..4).map(|i| random(r, &[2, widths[i], 16 >> i, 16 >> i], 0.1)).collect();
            check(|g, ps, v| { let y = apm.forward(g, ps, v)?; project(g, y, seed) }, &mut ps, &xs, 0.1, r, &o)?
        }
        "msccm" => {
            let m = Msccm::new(&mut ps, "msccm", [16, 16, 32])?;
            // W_v starts at zero; perturb it so the mixing path carries gradient
            for p in ps.iter_mut().filter(|p| p.name.ends_with("w_v.weight")) {
                p.value = random(r, p.value.shape(), 0.0).map(|v| 0.1 * v);
            }
            let xs: Vec<Tensor64> =
                [16, 16, 32].iter().enumerate().map(|(i, &c)| random(r, &[2, c, 8 >> i, 8 >> i], 0.1)).collect();
            check(
                |g, ps, v| {
                    let [a, b, c] = m.forward(g, ps, [v[0], v[1], v[2]])?;
                    let (a, b, c) = (project(g, a, seed)?, project(g, b, seed + 1)?, project(g, c, seed + 2)?);
                    let s = g.add(a, b)?;
                    g.add(s, c)
                },
                &mut ps,
                &xs,
                0.1,
                r,
                &o,
            )?
        }
        "meab" => {
            let m = Meab::new(&mut ps, "meab", 16, 4)?;
            let x = random(r, &[2, 16, 6, 6], 0.1);
            check(|g, ps, xs| { let y = m.forward(g, ps, xs[0])?; project(g, y, seed) }, &mut ps, &[x], 0.1, r, &o)?
        }
        "seghead" => {
            let h = SegHead::new(&mut ps, "head", 8, 8, 2, Some(3))?;
            let x = random(r, &[2, 8, 6, 6], 0.1);
            check(
                |g, ps, xs| {
                    let d = h.forward(g, ps, xs[0])?;
                    let p = h.predict(g, ps, d)?;
                    project(g, p, seed)
                },
                &mut ps,
                &[x],
                0.1,
                r,
                &o,
            )?
        }
        "dice_loss" | "ce_loss" => {
            let y = labels(r, [2, 6, 6], 4);
            let x = random(r, &[2, 4, 6, 6], 0.0);
            let dice = name == "dice_loss";
            check(
                |g, _, xs| if dice { g.dice_loss(xs[0], &y) } else { g.ce_loss(xs[0], &y) },
                &mut ps,
                &[x],
                0.0,
                r,
                &opts(usize::MAX, seed, Mode::Train),
            )?
        }
        "full_model" => {
            let cfg = MacmdConfig { in_channels: 1, reduction: 4, ..MacmdConfig::with_channels([16, 16, 32, 32], 3) };
            let model = MacmdModel::new(&mut ps, cfg)?;
            let x = random(r, &[2, 1, 32, 32], 0.0);
            let y = labels(r, [2, 32, 32], 3);
            let w = LossWeights::new(0.4, 0.6)?;
            check(
                |g, ps, xs| {
                    let p = model.forward(g, ps, xs[0])?;
                    g.total_loss(&p.all(), &y, w)
                },
                &mut ps,
                &[x],
                0.0,
                r,
                &opts(2, seed, Mode::Eval),
            )?
        }
        _ => unreachable!("name validated"),
    };
    let tolerance = match name {
        _ if primitive => PRIMITIVE_TOLERANCE,
        "dice_loss" | "ce_loss" => LOSS_TOLERANCE,
        _ => COMPOSITE_TOLERANCE,
    };
    Ok(CaseResult { name, report, tolerance, elapsed: start.elapsed() })
}

pub fn run_all(seed: u64) -> Result<Vec<CaseResult>> {
    CASES.iter().map(|c| run_case(c, seed)).collect()
}
