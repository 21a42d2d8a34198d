//! Inference: evaluation reports and single-image prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use macmd_core::metrics::{segmentation_metrics, Metrics};
use macmd_core::model::{MacmdModel, INPUT_MULTIPLE};
use macmd_core::objective::MaskBatch;
use macmd_core::{Graph, Mode, ParamStore, Scalar, Tensor};

use crate::checkpoint::Checkpoint;
use crate::dataset::{image_tensor, Dataset};
use crate::error::{PipelineError, Result};
use crate::pgm::GrayImage;

const EVAL_BATCH: usize = 8;

/// Hard labels: argmax over classes (first maximum wins), or `logit > 0`
/// (probability above 0.5) for a single sigmoid channel.
pub fn labels_from_logits<T: Scalar>(logits: &Tensor<T>) -> MaskBatch {
    let [n, k, h, w] = logits.dims4("labels").expect("prediction maps are rank 4");
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let at = |c: usize| x[(b * k + c) * plane + i];
            let label = if k == 1 {
                (at(0) > T::zero()) as u32
            } else {
                (1..k).fold(0, |best, c| if at(c) > at(best) { c } else { best }) as u32
            };
            out.push(label);
        }
    }
    MaskBatch::new([n, h, w], out).expect("label shape")
}

/// Eval-mode `p1` labels for the listed samples.
pub fn predict_batch(
    model: &MacmdModel,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
) -> Result<MaskBatch> {
    let mut labels = Vec::with_capacity(indices.len() * data.size * data.size);
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<f32>(chunk, &[]);
        let mut g = Graph::inference(Mode::Eval);
        let xv = g.constant(x);
        let p = model.forward(&mut g, store, xv)?;
        labels.extend_from_slice(labels_from_logits(g.value(p.p1)).data());
    }
    Ok(MaskBatch::new([indices.len(), data.size, data.size], labels)?)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_image: Vec<Metrics>,
    pub aggregate: Metrics,
}

impl EvalReport {
    /// Per-image rows then aggregate rows, each `image, class, dsc, hd95`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tclass\tdsc\thd95\n");
        let rows = self.per_image.iter().enumerate().map(|(i, m)| (i.to_string(), m));
        for (label, m) in rows.chain(std::iter::once(("all".to_string(), &self.aggregate))) {
            for line in m.to_tsv().lines().skip(1) {
                let _ = writeln!(s, "{label}\t{line}");
            }
        }
        s
    }
}

pub fn evaluate_model(model: &MacmdModel, store: &mut ParamStore<f32>, data: &Dataset) -> Result<EvalReport> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let pred = predict_batch(model, store, data, &indices)?;
    let (_, truth) = data.batch::<f32>(&indices, &[]);
    let aggregate = segmentation_metrics(&pred, &truth, data.classes)?;
    let [_, h, w] = truth.shape();
    let mut per_image = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let p = MaskBatch::new([1, h, w], pred.image(i).to_vec())?;
        let t = MaskBatch::new([1, h, w], truth.image(i).to_vec())?;
        per_image.push(segmentation_metrics(&p, &t, data.classes)?);
    }
    Ok(EvalReport { per_image, aggregate })
}

/// Rebuilds a model from a checkpoint, inferring its architecture.
pub fn load_model(path: &Path) -> Result<(MacmdModel, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let mut store = ParamStore::new(0);
    let model = MacmdModel::new(&mut store, ck.infer_config()?)?;
    ck.apply_to(&mut store)?;
    Ok((model, store))
}

pub fn evaluate(ckpt: &Path, data_dir: &Path, report: Option<&Path>) -> Result<EvalReport> {
    let (model, mut store) = load_model(ckpt)?;
    let data = Dataset::load(data_dir)?;
    let k = model.config().num_classes;
    if k != data.classes && !(k == 1 && data.classes == 2) {
        return Err(PipelineError::Data(format!("checkpoint has {k} classes but the dataset has {}", data.classes)));
    }
    let out = evaluate_model(&model, &mut store, &data)?;
    if let Some(path) = report {
        fs::write(path, out.to_tsv()).map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(out)
}

/// Writes the predicted label map of one greymap image.
pub fn predict(ckpt: &Path, image: &Path, out: &Path) -> Result<GrayImage> {
    let (model, mut store) = load_model(ckpt)?;
    let img = GrayImage::read(image)?;
    if img.width % INPUT_MULTIPLE != 0 || img.height % INPUT_MULTIPLE != 0 {
        return Err(PipelineError::Data(format!(
            "{}: {}x{} is not a multiple of {INPUT_MULTIPLE}",
            image.display(),
            img.width,
            img.height
        )));
    }
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(image_tensor::<f32>(&img));
    let p = model.forward(&mut g, &mut store, x)?;
    let labels = labels_from_logits(g.value(p.p1));
    let mask = GrayImage::new(img.width, img.height, labels.data().iter().map(|&v| v.min(255) as u8).collect());
    mask.write(out)?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_threshold() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0f32, 0.0, 2.0, 5.0, 2.0, 5.0]).unwrap();
        assert_eq!(labels_from_logits(&t).data(), &[1, 1]);
        let b = Tensor::new(&[1, 1, 1, 3], vec![-0.1f32, 0.0, 0.2]).unwrap();
        assert_eq!(labels_from_logits(&b).data(), &[0, 0, 1]);
    }
}
