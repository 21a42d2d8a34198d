//! Evaluation metrics on hard label maps: Dice, HD95 and pixel accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objective::MaskBatch;

/// Dice of two binary masks; 1 when both are empty.
pub fn dice_coefficient(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask or outside the image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(r, c) in from {
        let best = to
            .iter()
            .map(|&(r2, c2)| {
                let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min);
        out.push(best.sqrt());
    }
}

/// Nearest-rank percentile (`rank = ⌈q·n⌉`) of an unsorted sample.
pub fn nearest_rank(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Some(values[rank - 1])
}

/// 95th percentile of pooled boundary-to-boundary nearest distances.
/// `Some(0.0)` when both masks are empty, `None` when exactly one is.
pub fn hd95(pred: &[bool], truth: &[bool], h: usize, w: usize) -> Option<f64> {
    let (bp, bt) = (boundary(pred, h, w), boundary(truth, h, w));
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let mut d = Vec::with_capacity(bp.len() + bt.len());
    nearest(&bp, &bt, &mut d);
    nearest(&bt, &bp, &mut d);
    nearest_rank(&mut d, 0.95)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    /// Mean over images where it is defined.
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Foreground classes only.
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub accuracy: f64,
}

/// Per-image Dice and HD95 averaged over the batch for each foreground class,
/// and pooled pixel accuracy. `classes` counts the background.
pub fn segmentation_metrics(pred: &MaskBatch, truth: &MaskBatch, classes: usize) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("metrics", "shape", format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let classes = classes.max(2);
    pred.check_labels(classes)?;
    truth.check_labels(classes)?;
    let [n, h, w] = pred.shape();
    let correct = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
    let mut per_class = Vec::with_capacity(classes - 1);
    for class in 1..classes {
        let (mut dsc, mut hd_sum, mut hd_n) = (0.0, 0.0, 0usize);
        for i in 0..n {
            let p: Vec<bool> = pred.image(i).iter().map(|&v| v as usize == class).collect();
            let t: Vec<bool> = truth.image(i).iter().map(|&v| v as usize == class).collect();
            dsc += dice_coefficient(&p, &t);
            if let Some(d) = hd95(&p, &t, h, w) {
                hd_sum += d;
                hd_n += 1;
            }
        }
        per_class.push(ClassMetrics { class, dsc: dsc / n as f64, hd95: (hd_n > 0).then(|| hd_sum / hd_n as f64) });
    }
    let mean_dsc = per_class.iter().map(|c| c.dsc).sum::<f64>() / per_class.len() as f64;
    Ok(Metrics { per_class, mean_dsc, accuracy: correct as f64 / pred.data().len() as f64 })
}

impl Metrics {
    pub fn mean_hd95(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().filter_map(|c| c.hd95).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Rows `class, dsc, hd95` then summary rows; a missing HD95 is written as `NA`.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
        let mut s = String::from("class\tdsc\thd95\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{}\t{:.6}\t{}", c.class, c.dsc, fmt(c.hd95));
        }
        let _ = writeln!(s, "mean_dsc\t{:.6}\t{}", self.mean_dsc, fmt(self.mean_hd95()));
        let _ = writeln!(s, "acc\t{:.6}\tNA", self.accuracy);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> Vec<bool> {
        (0..h * w).map(|i| (r0..r0 + side).contains(&(i / w)) && (c0..c0 + side).contains(&(i % w))).collect()
    }

    #[test]
    fn identical_masks() {
        let m = MaskBatch::new([1, 4, 4], vec![0, 1, 1, 0, 0, 1, 2, 0, 0, 2, 2, 0, 0, 0, 0, 0]).unwrap();
        let r = segmentation_metrics(&m, &m, 3).unwrap();
        assert_eq!(r.mean_dsc, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| c.hd95 == Some(0.0)));
    }

    #[test]
    fn complement_has_zero_dice() {
        let t: Vec<u32> = (0..16).map(|i| (i % 3 == 0) as u32).collect();
        let p: Vec<u32> = t.iter().map(|v| 1 - v).collect();
        let r = segmentation_metrics(&MaskBatch::new([1, 4, 4], p).unwrap(), &MaskBatch::new([1, 4, 4], t).unwrap(), 2).unwrap();
        assert_eq!(r.per_class[0].dsc, 0.0);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn offset_squares() {
        let (a, b) = (square(10, 10, 2, 2, 2), square(10, 10, 5, 2, 2));
        assert_eq!(hd95(&a, &b, 10, 10), Some(3.0));
        let (a, b) = (square(10, 10, 2, 2, 1), square(10, 10, 5, 2, 1));
        assert_eq!(hd95(&a, &b, 10, 10), Some(3.0));
    }

    #[test]
    fn empty_conventions() {
        let e = vec![false; 9];
        let s = square(3, 3, 1, 1, 1);
        assert_eq!(hd95(&e, &e, 3, 3), Some(0.0));
        assert_eq!(hd95(&e, &s, 3, 3), None);
        assert_eq!(dice_coefficient(&e, &e), 1.0);
        let full = vec![true; 9];
        assert_eq!(boundary(&full, 3, 3).len(), 8);
    }

    #[test]
    fn nearest_rank_convention() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 0.95), Some(19.0));
        let mut v = vec![5.0, 1.0, 3.0];
        assert_eq!(nearest_rank(&mut v, 0.95), Some(5.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = MaskBatch::new([1, 2, 2], vec![0; 4]).unwrap();
        let b = MaskBatch::new([1, 1, 4], vec![0; 4]).unwrap();
        assert!(segmentation_metrics(&a, &b, 2).is_err());
    }

    #[test]
    fn tsv_layout() {
        let m = MaskBatch::new([1, 2, 2], vec![0, 1, 0, 0]).unwrap();
        let p = MaskBatch::new([1, 2, 2], vec![0, 0, 0, 0]).unwrap();
        let tsv = segmentation_metrics(&p, &m, 2).unwrap().to_tsv();
        assert_eq!(tsv.lines().next(), Some("class\tdsc\thd95"));
        assert!(tsv.contains("1\t0.000000\tNA"));
    }
}
