//! Mini-batch SGD on softmax cross-entropy with per-epoch metric tracking.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{compute_channel_means, normalize, resize_bilinear, sample_rng, Augmentation, DataError, PreprocessConfig, Sample};
use crate::model::{argmax_rows, Model, ModelError};
use crate::nn::{self, Mode};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("epoch {epoch}, batch {batch}: loss is not finite ({loss})")]
    NonFinite { epoch: usize, batch: usize, loss: f32 },
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights indexed by binary label; `None` is uniform.
    pub class_weights: Option<[f32; 2]>,
    pub weight_decay: f32,
    /// Random flips and quarter turns on every training sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            class_weights: None,
            weight_decay: 1e-4,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be finite and non-negative", self.weight_decay));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return bad(format!("class weights {w:?} must be positive"));
            }
        }
        Ok(())
    }
}

/// `N / (2·n_c)` per class, so each class carries half the total weight.
pub fn inverse_frequency_weights(labels: &[usize]) -> Result<[f32; 2]> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::Config("inverse-frequency weights need both classes".into()));
    }
    let n = labels.len() as f32;
    Ok([n / (2.0 * neg as f32), n / (2.0 * pos as f32)])
}

/// Preprocessed samples ready for batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// Resized to the preprocessing target, before normalization.
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub preprocess: PreprocessConfig,
    inputs: Vec<Tensor>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], preprocess: PreprocessConfig) -> Result<Self> {
        let images = samples
            .par_iter()
            .map(|s| resize_bilinear(&s.image, preprocess.target_size))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = images
            .par_iter()
            .map(|img| normalize(img, &preprocess))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images,
            labels: samples.iter().map(Sample::binary_label).collect(),
            preprocess,
            inputs,
        })
    }

    /// Training-split constructor: the channel means are measured on these
    /// samples after resizing.
    pub fn with_own_means(samples: &[Sample], target_size: usize) -> Result<Self> {
        let mut set = Self::from_samples(samples, PreprocessConfig::new(target_size, [0.0; 3])?)?;
        let means = compute_channel_means(&set.images)?;
        set.preprocess.channel_means = means;
        set.inputs = set
            .images
            .par_iter()
            .map(|img| normalize(img, &set.preprocess))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalized, unaugmented 3×S×S input of sample `i`.
    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    fn batch(&self, indices: &[usize], augment: Option<(u64, u64)>) -> Result<(Tensor, Vec<usize>)> {
        let parts = indices
            .par_iter()
            .map(|&i| match augment {
                None => Ok(self.inputs[i].clone()),
                Some((seed, epoch)) => {
                    let aug = Augmentation::sample(&mut sample_rng(seed, &self.ids[i], epoch));
                    Ok(normalize(&aug.apply(&self.images[i])?, &self.preprocess)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let s = self.preprocess.target_size;
        let data = parts.into_iter().flat_map(Tensor::into_data).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(&[indices.len(), 3, s, s], data)?, labels))
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if self.preprocess.target_size != model.config.input_size {
            return Err(TrainError::Mismatch(format!(
                "images are {0}×{0} but the model expects {1}×{1}",
                self.preprocess.target_size, model.config.input_size
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= model.config.num_classes) {
            return Err(TrainError::Mismatch(format!("label {l} out of range")));
        }
        Ok(())
    }
}

/// `w ← w − lr·(g + weight_decay·w)` for every pair; shapes are checked
/// before anything is written.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f32, weight_decay: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TrainError::Config(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (d + weight_decay * *w);
        }
    }
    Ok(())
}

/// Loss and accuracy over one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// One shuffled pass of mini-batch SGD in train mode. Returns the
/// sample-weighted mean batch loss and the accuracy of the train-mode logits.
pub fn train_epoch(model: &mut Model, set: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochMetrics> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    set.check_model(model)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let weights = cfg.class_weights.map(|w| w.to_vec());

    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let augment = cfg.augment.then_some((cfg.seed, epoch as u64));
        let (x, labels) = set.batch(chunk, augment)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x);
        let trace = model.forward_on_tape(&mut tape, input, Mode::Train)?;
        let loss = nn::softmax_cross_entropy(&mut tape, trace.logits, &labels, weights.as_deref())?;
        let value = tape.value(loss)?.item()?;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: batch_index,
                loss: value,
            });
        }
        let predicted = argmax_rows(tape.value(trace.logits)?);
        correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        loss_sum += f64::from(value) * chunk.len() as f64;

        let params = trace.params.clone();
        let grads = tape.backward(loss)?;
        let grads = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>, _>>()?;
        sgd_step(&mut model.trainable_mut(), &grads, cfg.learning_rate, cfg.weight_decay)?;
        model.apply_batch_stats(&trace.bn_stats);
    }
    Ok(EpochMetrics {
        loss: loss_sum / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
    })
}

const EVAL_BATCH: usize = 32;

/// Infer-mode unweighted mean cross-entropy and argmax accuracy.
pub fn evaluate(model: &Model, set: &Dataset) -> Result<EpochMetrics> {
    if set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    set.check_model(model)?;
    let indices: Vec<usize> = (0..set.len()).collect();
    let per_batch = indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let (x, labels) = set.batch(chunk, None)?;
            let logits = model.forward(&x)?;
            Ok(sample_losses(&logits, &labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (l, c) in per_batch {
        loss += l;
        correct += c;
    }
    Ok(EpochMetrics {
        loss: loss / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
    })
}

/// Summed cross-entropy (in f64) and correct-prediction count.
fn sample_losses(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
        let lse = row.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln() + m;
        loss += lse - f64::from(row[y]);
    }
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    (loss, correct)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,train_acc,val_acc";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.train_accuracy, r.val_accuracy
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Where the history of a checkpoint is written: `run.bin` → `run.history.csv`.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

/// Where the best-validation checkpoint is written: `run.bin` → `run.best.bin`.
pub fn best_checkpoint_path(checkpoint: &Path) -> PathBuf {
    let ext = checkpoint.extension().and_then(|e| e.to_str()).unwrap_or("bin");
    checkpoint.with_extension(format!("best.{ext}"))
}

/// The snapshot with the highest validation accuracy (lower validation loss
/// breaks ties; earlier epochs win exact ties).
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub history: History,
    pub best: Option<BestModel>,
}

/// `cfg.epochs` training epochs. Train columns of the history are the
/// epoch's own train-mode metrics; validation columns come from an infer-mode
/// evaluation after the epoch. The model takes the training set's channel
/// means.
pub fn fit(model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    train.check_model(&model)?;
    val.check_model(&model)?;
    if train.preprocess.channel_means != val.preprocess.channel_means {
        return Err(TrainError::Mismatch("training and validation sets use different channel means".into()));
    }
    model.channel_means = train.preprocess.channel_means;

    let mut history = History::default();
    let mut best: Option<(BestModel, f64, f64)> = None;
    for epoch in 0..cfg.epochs {
        let t = train_epoch(&mut model, train, cfg, epoch)?;
        let v = evaluate(&model, val)?;
        for (what, m) in [("train", t), ("val", v)] {
            if !m.loss.is_finite() {
                return Err(TrainError::Config(format!("epoch {}: {what} loss is not finite", epoch + 1)));
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: t.loss,
            val_loss: v.loss,
            train_accuracy: t.accuracy,
            val_accuracy: v.accuracy,
        };
        on_epoch(&record);
        history.records.push(record);
        let improves = best
            .as_ref()
            .is_none_or(|(_, acc, loss)| v.accuracy > *acc || (v.accuracy == *acc && v.loss < *loss));
        if improves {
            let snapshot = BestModel {
                epoch: epoch + 1,
                model: model.clone(),
            };
            best = Some((snapshot, v.accuracy, v.loss));
        }
    }
    Ok(FitResult {
        model,
        history,
        best: best.map(|(b, _, _)| b),
    })
}
