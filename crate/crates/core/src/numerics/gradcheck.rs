//! Central finite-difference checks of [`Graph::backward`] in double precision.

use crate::error::{Error, Result};
use crate::numerics::rng::CounterRng;
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the analytic gradient of the scalar
/// function `f` at `x` and central differences with step `h`, over every
/// coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new(0);
    let report = grad_check_model(
        |g, _, xs| f(g, xs[0]),
        &mut store,
        std::slice::from_ref(x),
        &CheckOptions { step: h, samples_per_tensor: usize::MAX, ..Default::default() },
    )?;
    Ok(report.max_rel_error)
}

/// How a coordinate's numeric derivative is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// `(f(x+h) - f(x-h)) / 2h` at the configured step.
    Central,
    /// Ridders' extrapolation of central differences over the steps
    /// `h, h/1.4, h/1.4², ...`, keeping the estimate with the smallest
    /// internal error. Balances truncation against roundoff per coordinate.
    Ridders,
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 10;
const RIDDERS_SAFE: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; tensors at most this large are probed
    /// exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Graph mode for every evaluation. In training mode a bias feeding a
    /// batch norm has an exactly zero gradient that differences resolve only
    /// down to roundoff.
    pub mode: Mode,
    pub scheme: Scheme,
    /// Times a coordinate's step is divided by ten when `x ± h` lands on a
    /// different side of a relu or argmax than `x`.
    pub kink_retries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, samples_per_tensor: 8, seed: 0, mode: Mode::Train, scheme: Scheme::Central, kink_retries: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and coordinate where the maximum occurred.
    pub worst: String,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    /// Difference step used at `worst`.
    pub worst_step: f64,
    pub coordinates: usize,
    /// Coordinates whose step was shrunk to stay clear of a kink.
    pub refined: usize,
    /// Coordinates that still straddle a kink at the smallest step.
    pub straddling: usize,
}

/// Checks gradients of a scalar function of several input tensors and every
/// parameter in `store`. `f` runs on a fresh graph in `opts.mode` per
/// evaluation.
pub fn grad_check_model<F>(
    f: F,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::inference(opts.mode);
        g.track_branches();
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &xs)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok((v.data()[0], g.branch_signature()))
    };

    let mut g = Graph::new(opts.mode);
    let xs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, store, &xs)?;
    g.backward(out, store)?;
    let input_grads: Vec<Tensor<f64>> = xs
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let (_, base) = eval(store, inputs)?;
    let mut rng = CounterRng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_values: (0.0, 0.0),
        worst_step: opts.step,
        coordinates: 0,
        refined: 0,
        straddling: 0,
    };
    // Central difference at `h`, and whether both sides keep every branch
    // decision of the unperturbed point.
    let central = |store: &mut ParamStore<f64>,
                   work: &mut Vec<Tensor<f64>>,
                   set: &mut dyn FnMut(&mut ParamStore<f64>, &mut Vec<Tensor<f64>>, f64),
                   h: f64|
     -> Result<(f64, bool)> {
        set(store, work, h);
        let (up, su) = eval(store, work)?;
        set(store, work, -h);
        let (down, sd) = eval(store, work)?;
        set(store, work, 0.0);
        Ok(((up - down) / (2.0 * h), su == base && sd == base))
    };
    // Numeric derivative of one coordinate and the step it started from. The
    // step is divided by ten while a side crosses a kink; Ridders' table stops
    // growing at the first step that would cross one.
    let difference = |report: &mut GradCheckReport,
                      set: &mut dyn FnMut(&mut ParamStore<f64>, &mut Vec<Tensor<f64>>, f64),
                      store: &mut ParamStore<f64>|
     -> Result<(f64, f64)> {
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut h = opts.step;
        let mut attempt = 0;
        let first = loop {
            let (d, smooth) = central(store, &mut work, set, h)?;
            if smooth || attempt == opts.kink_retries {
                report.refined += usize::from(attempt > 0);
                report.straddling += usize::from(!smooth);
                break d;
            }
            h /= 10.0;
            attempt += 1;
        };
        if opts.scheme == Scheme::Central {
            return Ok((first, h));
        }
        let start = h;
        let mut table = [[0.0f64; RIDDERS_TABLE]; RIDDERS_TABLE];
        table[0][0] = first;
        let (mut best, mut err) = (first, f64::INFINITY);
        for i in 1..RIDDERS_TABLE {
            h /= RIDDERS_SHRINK;
            let (d, smooth) = central(store, &mut work, set, h)?;
            if !smooth {
                break;
            }
            table[0][i] = d;
            let mut fac = RIDDERS_SHRINK * RIDDERS_SHRINK;
            for j in 1..=i {
                table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
                fac *= RIDDERS_SHRINK * RIDDERS_SHRINK;
                let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
                if e <= err {
                    err = e;
                    best = table[j][i];
                }
            }
            if (table[i][i] - table[i - 1][i - 1]).abs() >= RIDDERS_SAFE * err {
                break;
            }
        }
        Ok((best, start))
    };
    let note = |report: &mut GradCheckReport, label: &dyn Fn() -> String, a: f64, (n, h): (f64, f64)| {
        let e = relative_error(a, n);
        report.coordinates += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = label();
            report.worst_values = (a, n);
            report.worst_step = h;
        }
    };

    for k in 0..inputs.len() {
        for i in sample(inputs[k].len(), opts.samples_per_tensor, &mut rng) {
            let orig = inputs[k].data()[i];
            let n = difference(&mut report, &mut |_, work, d| work[k].data_mut()[i] = orig + d, store)?;
            note(&mut report, &|| format!("input{k}[{i}]"), input_grads[k].data()[i], n);
        }
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone().expect("backward fills every gradient");
        for i in sample(analytic.len(), opts.samples_per_tensor, &mut rng) {
            let orig = store.get(id).value.data()[i];
            let n = difference(&mut report, &mut |s, _, d| s.get_mut(id).value.data_mut()[i] = orig + d, store)?;
            let name = store.get(id).name.clone();
            note(&mut report, &|| format!("{name}[{i}]"), analytic.data()[i], n);
        }
    }
    Ok(report)
}

fn sample(len: usize, count: usize, rng: &mut CounterRng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..count).map(|_| rng.below(len as u64) as usize).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert!(matches!(grad_check(|_, x| Ok(x), &x, 1e-6), Err(Error::NotScalar(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    fn sigmoid_sum(g: &mut Graph<f64>, _: &mut ParamStore<f64>, xs: &[Var]) -> Result<Var> {
        let y = g.sigmoid(xs[0]);
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }

    #[test]
    fn ridders_beats_plain_central_at_a_wide_step() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let wide = CheckOptions { step: 1e-1, samples_per_tensor: usize::MAX, ..Default::default() };
        let mut ps = ParamStore::new(0);
        let plain = grad_check_model(sigmoid_sum, &mut ps, std::slice::from_ref(&x), &wide).unwrap();
        let ridders = CheckOptions { scheme: Scheme::Ridders, ..wide };
        let r = grad_check_model(sigmoid_sum, &mut ps, std::slice::from_ref(&x), &ridders).unwrap();
        assert!(plain.max_rel_error > 1e-4, "{}", plain.max_rel_error);
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn steps_shrink_away_from_relu_kinks() {
        // 2e-4 sits inside a 1e-3 step of the kink
        let x = Tensor::from_f64(&[3], &[2e-4, -0.5, 0.8]).unwrap();
        let f = |g: &mut Graph<f64>, _: &mut ParamStore<f64>, xs: &[Var]| {
            let r = g.relu(xs[0]);
            let r = g.mul(r, r)?;
            let s = g.sum(r);
            let t = g.sum(xs[0]);
            g.add(s, t)
        };
        let mut ps = ParamStore::new(0);
        let o = CheckOptions { step: 1e-3, samples_per_tensor: usize::MAX, kink_retries: 0, ..Default::default() };
        let blind = grad_check_model(f, &mut ps, std::slice::from_ref(&x), &o).unwrap();
        assert_eq!(blind.straddling, 1);
        assert!(blind.max_rel_error > 1e-4);
        let o = CheckOptions { kink_retries: 2, ..o };
        let r = grad_check_model(f, &mut ps, std::slice::from_ref(&x), &o).unwrap();
        assert_eq!((r.refined, r.straddling), (1, 0));
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }
}
