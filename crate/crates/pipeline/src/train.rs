//! Seeded single-threaded training loop with deep supervision.

use std::io::Write;
use std::path::PathBuf;

use macmd_core::metrics::segmentation_metrics;
use macmd_core::model::{MacmdConfig, MacmdModel};
use macmd_core::numerics::rng::name_key;
use macmd_core::numerics::CounterRng;
use macmd_core::objective::LossWeights;
use macmd_core::{Graph, Mode, ParamStore};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{PipelineError, Result};
use crate::eval::{labels_from_logits, predict_batch};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};

pub const LR_MIN: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Defaults by class count when unset.
    pub weights: Option<LossWeights>,
    /// Must match the dataset when set.
    pub num_classes: Option<usize>,
    pub channels: [usize; 4],
    /// Must match the dataset when set.
    pub image_size: Option<usize>,
    pub val_fraction: f64,
    pub hflip: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            lr_min: LR_MIN,
            weight_decay: 1e-4,
            weights: None,
            num_classes: None,
            channels: MacmdConfig::toy(2).channels,
            image_size: None,
            val_fraction: 0.0,
            hflip: false,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(PipelineError::Usage(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return usage(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return usage("epochs and batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return usage(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        if let Some(s) = self.image_size.filter(|s| s % 32 != 0 || *s == 0) {
            return usage(format!("image size {s} must be a positive multiple of 32"));
        }
        if let Some(w) = self.weights {
            LossWeights::new(w.alpha, w.beta)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Foreground mean Dice of the training-mode `p1` predictions.
    pub train_dsc: f64,
    pub val_dsc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MacmdModel,
    /// Weights after the last step.
    pub store: ParamStore<f32>,
    /// Weights of the best-scoring epoch.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_dsc: f64,
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Trains on `data`, writing one tab-separated line per epoch to `log` and,
/// when configured, the best checkpoint each time the selection Dice improves.
pub fn train(cfg: &TrainConfig, data: &Dataset, log: &mut dyn Write) -> Result<TrainReport> {
    cfg.validate()?;
    let classes = data.classes;
    if let Some(k) = cfg.num_classes.filter(|&k| k != classes && !(k == 1 && classes == 2)) {
        return Err(PipelineError::Data(format!("model has {k} classes but the dataset has {classes}")));
    }
    if let Some(s) = cfg.image_size.filter(|&s| s != data.size) {
        return Err(PipelineError::Data(format!("configured image size {s} but the dataset holds {0}x{0} images", data.size)));
    }
    if !data.size.is_multiple_of(32) {
        return Err(PipelineError::Data(format!("dataset image size {} is not a multiple of 32", data.size)));
    }
    let k = cfg.num_classes.unwrap_or(classes);
    let weights = cfg.weights.unwrap_or_else(|| LossWeights::for_classes(classes));

    let root = CounterRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_val = (cfg.val_fraction * data.len() as f64).round() as usize;
    if n_val > 0 {
        root.substream(name_key("split")).shuffle(&mut order);
    }
    let (val_indices, train_indices) = (order[..n_val].to_vec(), order[n_val..].to_vec());
    if train_indices.is_empty() {
        return Err(PipelineError::Usage("validation split leaves no training samples".into()));
    }

    let mut store = ParamStore::<f32>::new(cfg.seed);
    let model = MacmdModel::new(&mut store, MacmdConfig::with_channels(cfg.channels, k))?;
    let steps_per_epoch = train_indices.len().div_ceil(cfg.batch_size);
    let schedule =
        CosineSchedule { lr_max: cfg.lr, lr_min: cfg.lr_min, total_steps: (cfg.epochs * steps_per_epoch) as u64 };
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let _ = writeln!(log, "epoch\tloss\ttrain_dsc\tval_dsc\tlr");

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = root.substream(name_key("epoch") ^ epoch as u64);
        let mut idx = train_indices.clone();
        rng.shuffle(&mut idx);
        let (mut loss_sum, mut dsc_sum) = (0.0f64, 0.0f64);
        let lr_epoch = schedule.lr(step);
        for chunk in idx.chunks(cfg.batch_size) {
            let flip: Vec<bool> = chunk.iter().map(|_| cfg.hflip && rng.below(2) == 1).collect();
            let (x, y) = data.batch::<f32>(chunk, &flip);
            let mut g = Graph::new(Mode::Train);
            let xv = g.constant(x);
            let p = model.forward(&mut g, &mut store, xv)?;
            let loss = g.total_loss(&p.all(), &y, weights)?;
            let pred = labels_from_logits(g.value(p.p1));
            dsc_sum += segmentation_metrics(&pred, &y, classes)?.mean_dsc * chunk.len() as f64;
            loss_sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            g.backward(loss, &mut store)?;
            drop(g);
            let lr = schedule.lr(step);
            step += 1;
            opt.step(&mut store, step, lr)?;
        }
        let n = train_indices.len() as f64;
        let val_dsc = if val_indices.is_empty() {
            None
        } else {
            let pred = predict_batch(&model, &mut store, data, &val_indices)?;
            let (_, y) = data.batch::<f32>(&val_indices, &[]);
            Some(segmentation_metrics(&pred, &y, classes)?.mean_dsc)
        };
        let entry = EpochLog { epoch, mean_loss: loss_sum / n, train_dsc: dsc_sum / n, val_dsc, lr: lr_epoch };
        let _ = writeln!(
            log,
            "{}\t{:.6}\t{:.4}\t{}\t{:.3e}",
            entry.epoch,
            entry.mean_loss,
            entry.train_dsc,
            entry.val_dsc.map_or("NA".into(), |v| format!("{v:.4}")),
            entry.lr
        );
        let score = entry.val_dsc.unwrap_or(entry.train_dsc);
        if score > best.0 {
            best = (score, epoch, store.clone());
            if let Some(path) = &cfg.checkpoint {
                Checkpoint::from_store(&store).save(path)?;
            }
        }
        epochs.push(entry);
    }
    let final_loss = epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    Ok(TrainReport {
        model,
        store,
        best: best.2,
        best_epoch: best.1,
        best_dsc: best.0,
        epochs,
        final_loss,
        train_indices,
        val_indices,
    })
}
