//! Loss, grouped-momentum SGD, the training loop with per-epoch evaluation
//! and checkpointing, and batch evaluation/prediction.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StateKind;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    preprocess_eval, preprocess_train, split_dataset, DatasetManifest, NormConstants, RgbImage,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, GradientRecord};
use crate::head::predict_labels;
use crate::kernels::sigmoid;
use crate::layers::Mode;
use crate::metrics::{EvaluationBatch, MetricsReport};
use crate::model::{build_model, param_group, Model, ParamGroup};
use crate::tensor::Tensor;

/// Momentum SGD with separate learning rates for the head and backbone
/// parameter groups: v <- m*v + g + wd*theta; theta <- theta - lr_group * v.
pub struct Sgd {
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(head_lr: f64, backbone_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            head_lr,
            backbone_lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Sgd::new(c.head_lr, c.backbone_lr, c.momentum, c.weight_decay)
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientRecord) -> Result<()> {
        let mut missing: Option<String> = None;
        let momentum = self.momentum;
        let weight_decay = self.weight_decay;
        let (head_lr, backbone_lr) = (self.head_lr, self.backbone_lr);
        let velocity = &mut self.velocity;
        model.visit_state(&mut |name, kind, t| {
            if kind != StateKind::Trainable || missing.is_some() {
                return;
            }
            let Some(grad) = grads.get(name) else {
                missing = Some(name.to_string());
                return;
            };
            let lr = match param_group(name) {
                ParamGroup::Head => head_lr,
                ParamGroup::Backbone => backbone_lr,
            };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.len()]);
            for ((theta, &g), vi) in t.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *vi = momentum * *vi + g + weight_decay * *theta;
                *theta -= lr * *vi;
            }
        });
        match missing {
            Some(name) => Err(Error::invalid(format!(
                "sgd_update: no gradient recorded for parameter {name}"
            ))),
            None => Ok(()),
        }
    }
}

/// A dataset decoded into memory; undecodable images are skipped and
/// reported.
pub struct LoadedSet {
    pub images: Vec<RgbImage>,
    pub labels: Vec<Vec<u8>>,
    pub paths: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

pub fn load_set(manifest: &DatasetManifest) -> LoadedSet {
    let mut set = LoadedSet {
        images: Vec::new(),
        labels: Vec::new(),
        paths: Vec::new(),
        skipped: Vec::new(),
    };
    for sample in &manifest.samples {
        match RgbImage::load(&sample.image) {
            Ok(img) => {
                set.images.push(img);
                set.labels.push(sample.label.clone());
                set.paths.push(sample.image.clone());
            }
            Err(e) => {
                eprintln!("warning: skipping {:?}: {e}", sample.image);
                set.skipped.push(sample.image.clone());
            }
        }
    }
    set
}

fn truths_tensor(labels: &[&[u8]], classes: usize) -> Tensor {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for row in labels {
        data.extend(row.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![labels.len(), classes], data).expect("consistent label widths")
}

/// Splitmix-style seed mixing for independent derived RNG streams.
fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Eval-mode forward over a whole set; returns per-sample probabilities.
pub fn predict_set(
    model: &mut Model,
    set: &LoadedSet,
    image_size: usize,
    norm: &NormConstants,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let classes = model.classes();
    let mut probs = Vec::with_capacity(set.images.len());
    for chunk in set.images.chunks(batch_size.max(1)) {
        let mut data = Vec::new();
        for img in chunk {
            data.extend(preprocess_eval(img, image_size, norm)?.into_data());
        }
        let batch = Tensor::new(vec![chunk.len(), 3, image_size, image_size], data)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let logits = model.forward(&mut g, x, Mode::Eval, false)?;
        let values = g.value(logits).data();
        for i in 0..chunk.len() {
            probs.push(
                values[i * classes..(i + 1) * classes]
                    .iter()
                    .map(|&z| sigmoid(z))
                    .collect(),
            );
        }
    }
    Ok(probs)
}

/// Full evaluation of a model over a loaded set at the given threshold.
pub fn evaluate_set(
    model: &mut Model,
    set: &LoadedSet,
    image_size: usize,
    norm: &NormConstants,
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    if set.images.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let classes = model.classes();
    let probs = predict_set(model, set, image_size, norm, batch_size)?;
    let n = probs.len();
    let mut scores = Vec::with_capacity(n * classes);
    let mut predictions = Vec::with_capacity(n * classes);
    let mut truths = Vec::with_capacity(n * classes);
    for (row, label) in probs.iter().zip(&set.labels) {
        for &p in row {
            scores.push(p);
            // inclusive threshold rule
            predictions.push(if p >= threshold { 1.0 } else { 0.0 });
        }
        truths.extend(label.iter().map(|&v| v as f64));
    }
    let batch = EvaluationBatch::new(n, classes, scores, truths, predictions)?;
    MetricsReport::compute(&batch)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub train_losses: Vec<f64>,
    pub epoch_reports: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub skipped_images: usize,
}

impl RunRecord {
    pub fn best_map(&self) -> f64 {
        self.epoch_reports[self.best_epoch].map
    }
}

/// Seeded split, per-epoch shuffled minibatch SGD, per-epoch test-set
/// evaluation, checkpoints per epoch plus a best-by-mAP copy. Deterministic
/// for a fixed seed.
pub fn train_model(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    config.validate()?;
    let (train_manifest, test_manifest) = split_dataset(manifest, config.train_fraction, config.seed)?;
    let train_set = load_set(&train_manifest);
    let test_set = load_set(&test_manifest);
    if train_set.images.is_empty() || test_set.images.is_empty() {
        return Err(Error::Data(
            "train or test side empty after skipping undecodable images".into(),
        ));
    }
    let classes = manifest.vocabulary.len();
    let mut model = build_model(&config.backbone, classes, config.heads.clone(), config.seed)?;
    let mut sgd = Sgd::from_config(config);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut record = RunRecord {
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        train_losses: Vec::new(),
        epoch_reports: Vec::new(),
        best_epoch: 0,
        checkpoints: Vec::new(),
        best_checkpoint: None,
        skipped_images: train_set.skipped.len() + test_set.skipped.len(),
    };

    let n_train = train_set.images.len();
    let size = config.image_size;
    for epoch in 0..config.epochs {
        // seeded epoch shuffle
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1, epoch as u64));
        for i in (1..n_train).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut data = Vec::new();
            for &idx in chunk {
                let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    config.seed,
                    2 + epoch as u64,
                    idx as u64,
                ));
                data.extend(
                    preprocess_train(&train_set.images[idx], size, &config.norm, &mut aug_rng)?
                        .into_data(),
                );
            }
            let batch = Tensor::new(vec![chunk.len(), 3, size, size], data)?;
            let labels: Vec<&[u8]> = chunk.iter().map(|&i| train_set.labels[i].as_slice()).collect();
            let truths = truths_tensor(&labels, classes);
            let mut g = Graph::new();
            let x = g.constant(batch);
            let logits = model.forward(&mut g, x, Mode::Train, true)?;
            let loss = g
                .bce_with_logits(logits, &truths)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {batch_idx}: {e}")))?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}; last-good checkpoint retained"
                )));
            }
            let grads = g.backward(loss)?;
            sgd.step(&mut model, &grads)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        record.train_losses.push(epoch_loss / batches as f64);

        let report = evaluate_set(
            &mut model,
            &test_set,
            size,
            &config.norm,
            config.threshold,
            config.batch_size,
        )?;
        if report.map > record.epoch_reports.get(record.best_epoch).map_or(f64::NEG_INFINITY, |r| r.map)
        {
            record.best_epoch = epoch;
        }
        record.epoch_reports.push(report);

        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            Checkpoint::capture(
                &mut model,
                manifest.vocabulary.names().to_vec(),
                size,
                config.norm,
                config.threshold,
            )
            .save(&path)?;
            record.checkpoints.push(path);
        }
    }

    if let Some(dir) = out_dir {
        let best = dir.join("best.ckpt");
        std::fs::copy(&record.checkpoints[record.best_epoch], &best)?;
        record.best_checkpoint = Some(best);
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Checkpoint(format!("run record: {e}")))?;
        std::fs::write(dir.join("run_record.json"), json)?;
    }
    Ok(record)
}

/// Evaluate a checkpointed model against a manifest.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<(MetricsReport, usize)> {
    if manifest.vocabulary.names() != ckpt.vocabulary.as_slice() {
        return Err(Error::Data(format!(
            "manifest vocabulary {:?} does not match checkpoint {:?}",
            manifest.vocabulary.names(),
            ckpt.vocabulary
        )));
    }
    let mut model = ckpt.restore_model()?;
    let set = load_set(manifest);
    let report = evaluate_set(&mut model, &set, ckpt.image_size, &ckpt.norm, threshold, 16)?;
    Ok((report, set.skipped.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionRow {
    pub image: PathBuf,
    pub probabilities: Option<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
    pub error: Option<String>,
}

/// Per-image probabilities and threshold decisions; undecodable images are
/// reported as failed rows and processing continues.
pub fn predict_images(
    ckpt: &Checkpoint,
    images: &[PathBuf],
    threshold: f64,
) -> Result<Vec<PredictionRow>> {
    let mut model = ckpt.restore_model()?;
    let classes = model.classes();
    let mut rows = Vec::with_capacity(images.len());
    for path in images {
        let img = match RgbImage::load(path) {
            Ok(img) => img,
            Err(e) => {
                rows.push(PredictionRow {
                    image: path.clone(),
                    probabilities: None,
                    labels: None,
                    error: Some(e.to_string()),
                });
                continue;
            }
        };
        let input = preprocess_eval(&img, ckpt.image_size, &ckpt.norm)?;
        let batch = input.reshaped(vec![1, 3, ckpt.image_size, ckpt.image_size])?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let logits = model.forward(&mut g, x, Mode::Eval, false)?;
        let z = g.value(logits).data()[..classes].to_vec();
        let (probs, labels) = predict_labels(&z, threshold)?;
        rows.push(PredictionRow {
            image: path.clone(),
            probabilities: Some(probs),
            labels: Some(labels),
            error: None,
        });
    }
    Ok(rows)
}
