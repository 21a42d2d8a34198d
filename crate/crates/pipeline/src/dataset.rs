//! Synthetic shape datasets: generation, the on-disk layout and batching.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use macmd_core::numerics::CounterRng;
use macmd_core::objective::MaskBatch;
use macmd_core::{Scalar, Tensor};

use crate::error::{PipelineError, Result};
use crate::pgm::GrayImage;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    /// Including background.
    pub classes: usize,
    /// Inclusive range of shapes painted per image.
    pub shapes: (usize, usize),
    /// Standard deviation of additive pixel noise, in grey levels.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(count: usize, size: usize, classes: usize, seed: u64) -> Self {
        Self { count, size, classes, shapes: (2, 4), noise: 8.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(PipelineError::Usage(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 255 {
            return Err(PipelineError::Usage(format!("{} classes do not fit an 8-bit mask", self.classes)));
        }
        if self.count == 0 || self.size < 8 {
            return Err(PipelineError::Usage("count must be positive and size at least 8".into()));
        }
        if self.shapes.0 > self.shapes.1 || self.shapes.1 == 0 {
            return Err(PipelineError::Usage(format!("bad shapes-per-image range {:?}", self.shapes)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(PipelineError::Usage(format!("noise level {} must be finite and nonnegative", self.noise)));
        }
        Ok(())
    }

    /// Centre grey level of class `c`; classes are spread evenly over [24, 232].
    fn band_centre(&self, c: usize) -> f64 {
        24.0 + 208.0 * c as f64 / (self.classes - 1) as f64
    }

    fn band_halfwidth(&self) -> f64 {
        52.0 / (self.classes - 1) as f64
    }

    /// Image and mask for sample `index`; each sample draws from its own substream.
    pub fn render(&self, index: usize) -> (GrayImage, GrayImage) {
        let n = self.size;
        let mut rng = CounterRng::new(self.seed).substream(index as u64);
        let mut level = vec![self.band_centre(0) + self.band_halfwidth() * rng.uniform_range(-1.0, 1.0); n * n];
        let mut mask = vec![0u8; n * n];
        let span = self.shapes.1 - self.shapes.0 + 1;
        // every foreground class appears at least once
        let shapes = (self.shapes.0 + rng.below(span as u64) as usize).max(self.classes - 1);
        let nf = n as f64;
        for s in 0..shapes {
            let class = if s < self.classes - 1 { s + 1 } else { 1 + rng.below(self.classes as u64 - 1) as usize };
            let ellipse = rng.below(2) == 0;
            let (cy, cx) = (rng.uniform_range(0.15 * nf, 0.85 * nf), rng.uniform_range(0.15 * nf, 0.85 * nf));
            let (ry, rx) = (rng.uniform_range(0.1 * nf, 0.25 * nf), rng.uniform_range(0.1 * nf, 0.25 * nf));
            let grey = self.band_centre(class) + self.band_halfwidth() * rng.uniform_range(-1.0, 1.0);
            for r in 0..n {
                for c in 0..n {
                    let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                    let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                    if inside {
                        level[r * n + c] = grey;
                        mask[r * n + c] = class as u8;
                    }
                }
            }
        }
        // Irwin-Hall noise keeps generation free of transcendental functions
        let scale = self.noise * 3f64.sqrt();
        let pixels = level
            .iter()
            .map(|&v| {
                let u: f64 = (0..4).map(|_| rng.uniform()).sum::<f64>() - 2.0;
                (v + scale * u).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        (GrayImage::new(n, n, pixels), GrayImage::new(n, n, mask))
    }
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

pub fn mask_name(index: usize) -> String {
    format!("msk_{index:05}.pgm")
}

/// Writes every sample and `manifest.tsv` into `dir` (created if missing).
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut manifest = String::from("index\timage\tmask");
    for c in 0..spec.classes {
        let _ = write!(manifest, "\tclass_{c}");
    }
    manifest.push('\n');
    for i in 0..spec.count {
        let (img, msk) = spec.render(i);
        img.write(&dir.join(image_name(i)))?;
        msk.write(&dir.join(mask_name(i)))?;
        let mut counts = vec![0usize; spec.classes];
        for &v in &msk.pixels {
            counts[v as usize] += 1;
        }
        let _ = write!(manifest, "{i}\t{}\t{}", image_name(i), mask_name(i));
        for n in counts {
            let _ = write!(manifest, "\t{n}");
        }
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| PipelineError::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: GrayImage,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub size: usize,
}

impl Dataset {
    /// Loads every sample listed in `dir/manifest.tsv`, checking sizes and labels.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PipelineError::Data(format!("{}: empty manifest", path.display())))?;
        let classes = header.split('\t').filter(|f| f.starts_with("class_")).count();
        if classes < 2 {
            return Err(PipelineError::Data(format!("{}: header lists fewer than 2 classes", path.display())));
        }
        let mut samples = Vec::new();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 + classes {
                return Err(PipelineError::Data(format!("{}: row {} has {} fields", path.display(), row + 1, fields.len())));
            }
            let image = GrayImage::read(&dir.join(fields[1]))?;
            let mask = GrayImage::read(&dir.join(fields[2]))?;
            if (image.width, image.height) != (mask.width, mask.height) {
                return Err(PipelineError::Data(format!("{}: image and mask sizes differ", fields[1])));
            }
            if let Some(&v) = mask.pixels.iter().find(|&&v| v as usize >= classes) {
                return Err(PipelineError::Data(format!("{}: label {v} outside {classes} classes", fields[2])));
            }
            samples.push(Sample { image, mask });
        }
        let first = samples.first().ok_or_else(|| PipelineError::Data(format!("{}: no samples", path.display())))?;
        let size = first.image.width;
        if samples.iter().any(|s| s.image.width != size || s.image.height != size) {
            return Err(PipelineError::Data("samples must share one square size".into()));
        }
        Ok(Self { samples, classes, size })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images as `[N, 3, S, S]` in [0, 1] (grey replicated) with their masks;
    /// `flip[i]` mirrors sample `i` horizontally.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flip: &[bool]) -> (Tensor<T>, MaskBatch) {
        let s = self.size;
        let plane = s * s;
        let mut img = Vec::with_capacity(indices.len() * 3 * plane);
        let mut lab = Vec::with_capacity(indices.len() * plane);
        for (k, &i) in indices.iter().enumerate() {
            let smp = &self.samples[i];
            let mirrored = flip.get(k).copied().unwrap_or(false);
            let at = |r: usize, c: usize| r * s + if mirrored { s - 1 - c } else { c };
            let grey: Vec<T> = (0..plane).map(|p| T::of(smp.image.pixels[at(p / s, p % s)] as f64 / 255.0)).collect();
            for _ in 0..3 {
                img.extend_from_slice(&grey);
            }
            lab.extend((0..plane).map(|p| smp.mask.pixels[at(p / s, p % s)] as u32));
        }
        let n = indices.len();
        (
            Tensor::new(&[n, 3, s, s], img).expect("batch shape"),
            MaskBatch::new([n, s, s], lab).expect("batch shape"),
        )
    }
}

/// Grey image as a `[1, 3, H, W]` tensor in [0, 1].
pub fn image_tensor<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let grey: Vec<T> = img.pixels.iter().map(|&v| T::of(v as f64 / 255.0)).collect();
    let mut data = Vec::with_capacity(3 * grey.len());
    for _ in 0..3 {
        data.extend_from_slice(&grey);
    }
    Tensor::new(&[1, 3, img.height, img.width], data).expect("image shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_covers_classes() {
        let spec = SyntheticSpec::new(4, 64, 4, 7);
        for i in 0..4 {
            let (a, m) = spec.render(i);
            assert_eq!((a.clone(), m.clone()), spec.render(i));
            for c in 1..4u8 {
                assert!(m.pixels.contains(&c), "class {c} missing from sample {i}");
            }
        }
        assert_ne!(spec.render(0), spec.render(1));
    }

    #[test]
    fn noiseless_images_are_piecewise_constant() {
        let spec = SyntheticSpec { noise: 0.0, ..SyntheticSpec::new(1, 32, 3, 1) };
        let (img, mask) = spec.render(0);
        let mut grey_of = std::collections::HashMap::new();
        for (&g, &m) in img.pixels.iter().zip(&mask.pixels) {
            grey_of.entry(m).or_insert_with(std::collections::BTreeSet::new).insert(g);
        }
        // background is one level; each shape adds at most one level
        assert_eq!(grey_of[&0].len(), 1);
        let levels: usize = grey_of.values().map(|s| s.len()).sum();
        assert!(levels <= 1 + spec.shapes.1.max(spec.classes - 1));
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::new(1, 32, 1, 0).validate().is_err());
        assert!(SyntheticSpec::new(1, 32, 256, 0).validate().is_err());
        assert!(SyntheticSpec::new(0, 32, 3, 0).validate().is_err());
        assert!(SyntheticSpec::new(1, 32, 255, 0).validate().is_ok());
    }

    #[test]
    fn batch_layout_and_flip() {
        let spec = SyntheticSpec::new(2, 32, 3, 3);
        let samples = (0..2).map(|i| spec.render(i)).map(|(image, mask)| Sample { image, mask }).collect();
        let ds = Dataset { samples, classes: 3, size: 32 };
        let (x, y) = ds.batch::<f32>(&[1, 0], &[true, false]);
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        let (img, msk) = spec.render(1);
        assert_eq!(y.image(0)[5], msk.pixels[26] as u32);
        assert_eq!(x.at4(0, 2, 0, 0), img.pixels[31] as f32 / 255.0);
        assert_eq!(y.image(1), spec.render(0).1.pixels.iter().map(|&v| v as u32).collect::<Vec<_>>().as_slice());
    }
}
