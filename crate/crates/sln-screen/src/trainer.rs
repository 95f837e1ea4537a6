//! Deterministic training loop with validation-based early stopping.
//!
//! Everything stochastic flows from the one train seed: the per-epoch
//! shuffle, the per-sample augmentation flips (drawn while the batch is
//! assembled, sequentially), and the per-sample dropout streams (derived
//! from the global step, so parallel workers never race for randomness).
//! Identical (manifest, model seed, train seed) therefore reproduce
//! bit-identical checkpoints, predictions, and reports.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingMeta;
use crate::corpus::{Corpus, PatchRecord, Split, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::eval::PredictionRow;
use crate::exec;
use crate::nn::{build_model, Model, ModelConfig};
use crate::ops;
use crate::optim::{apply_update, OptimizerConfig, OptimizerState};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub augment_hflip: bool,
    pub augment_vflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            optimizer: OptimizerConfig::default(),
            patience: 5,
            augment_hflip: true,
            augment_vflip: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No validation improvement for `patience` epochs; weights restored
    /// to the best epoch.
    EarlyStop { best_epoch: usize },
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    pub wall_seconds: f64,
    pub seed: u64,
}

/// Six significant digits, plain decimal.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.5}");
    }
    let digits_before = v.abs().log10().floor() as i64 + 1;
    let precision = (6 - digits_before).clamp(0, 17) as usize;
    format!("{v:.precision$}")
}

impl TrainReport {
    /// Per-epoch CSV. Deliberately excludes wall-clock time so the file
    /// is byte-identical across reruns with the same seeds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                sig6(e.train_loss),
                sig6(e.val_loss),
                sig6(e.val_accuracy)
            ));
        }
        out
    }

    pub fn best_epoch(&self) -> usize {
        match self.stop {
            StopReason::EarlyStop { best_epoch } => best_epoch,
            StopReason::MaxEpochs => {
                self.epochs
                    .iter()
                    .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
                    .map(|e| e.epoch)
                    .unwrap_or(0)
            }
        }
    }

    /// Human-readable summary. The reported loss/accuracy are the best
    /// epoch's, i.e. the weights the returned model carries. Contains no
    /// wall-clock time, so the written file is byte-identical across
    /// reruns with the same seeds; see [`TrainReport::summary_with_timing`].
    pub fn summary(&self) -> String {
        let best = self.epochs.iter().find(|e| e.epoch == self.best_epoch());
        let mut out = String::new();
        out.push_str(&format!("epochs run:      {}\n", self.epochs.len()));
        out.push_str(&format!(
            "stopping reason: {}\n",
            match self.stop {
                StopReason::EarlyStop { best_epoch } =>
                    format!("early stop (best validation loss at epoch {best_epoch})"),
                StopReason::MaxEpochs => "max epochs reached".to_string(),
            }
        ));
        if let Some(e) = best {
            out.push_str(&format!("best val loss:   {} (epoch {})\n", sig6(e.val_loss), e.epoch));
            out.push_str(&format!("best val acc:    {}\n", sig6(e.val_accuracy)));
        }
        out.push_str(&format!("seed:            {}\n", self.seed));
        out
    }

    /// Summary plus the wall-clock line, for interactive output.
    pub fn summary_with_timing(&self) -> String {
        format!("{}wall seconds:    {:.1}\n", self.summary(), self.wall_seconds)
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: TrainingMeta,
    pub report: TrainReport,
}

struct LoadedSplit {
    /// Indices into `corpus.patches()` order as returned by split_patches.
    records: Vec<LoadedPatch>,
}

struct LoadedPatch {
    rgb: Vec<u8>,
    target: usize,
}

fn load_split(corpus: &Corpus, split: Split) -> Result<LoadedSplit> {
    let patches = corpus.split_patches(split);
    if patches.is_empty() {
        return Err(Error::EmptySplit {
            split: split.name().to_string(),
        });
    }
    let loaded = exec::map_indexed(patches.len(), |i| -> Result<LoadedPatch> {
        let p = patches[i];
        Ok(LoadedPatch {
            rgb: corpus.load_patch_rgb(p)?,
            target: p.observed_dx.code() as usize,
        })
    });
    let records = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit { records })
}

/// Copy one u8 patch into `dst` as f32 in [0,1], optionally mirrored.
fn write_sample(dst: &mut [f32], rgb: &[u8], hflip: bool, vflip: bool) {
    let side = PATCH_SIDE;
    for y in 0..side {
        let sy = if vflip { side - 1 - y } else { y };
        for x in 0..side {
            let sx = if hflip { side - 1 - x } else { x };
            let src = (sy * side + sx) * 3;
            let at = (y * side + x) * 3;
            dst[at] = rgb[src] as f32 / 255.0;
            dst[at + 1] = rgb[src + 1] as f32 / 255.0;
            dst[at + 2] = rgb[src + 2] as f32 / 255.0;
        }
    }
}

/// Mean loss and accuracy of the model on a loaded split (infer mode).
fn score_split(model: &Model<f32>, split: &LoadedSplit) -> Result<(f64, f64)> {
    let n = split.records.len();
    let results = exec::map_indexed(n, |i| -> Result<(f64, bool)> {
        let rec = &split.records[i];
        let mut data = vec![0.0f32; PATCH_SIDE * PATCH_SIDE * 3];
        write_sample(&mut data, &rec.rgb, false, false);
        let sample = Tensor::new(&[PATCH_SIDE, PATCH_SIDE, 3], data)?;
        let probs = model.forward_sample(&sample, None)?;
        let loss = ops::cross_entropy(&probs, rec.target)? as f64;
        let mut best = 0;
        for k in 1..probs.len() {
            if probs.data()[k] > probs.data()[best] {
                best = k;
            }
        }
        Ok((loss, best == rec.target))
    });
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (loss, ok) = r?;
        loss_sum += loss;
        correct += ok as usize;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Train on the corpus's train split, early-stopping on validation loss
/// and restoring the best weights.
pub fn train(corpus: &Corpus, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train_data = load_split(corpus, Split::Train)?;
    let val_data = load_split(corpus, Split::Val)?;

    let mut model: Model<f32> = build_model(model_config)?;
    let mut opt_state = OptimizerState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(config.seed, 0xE0));

    let sample_len = PATCH_SIDE * PATCH_SIDE * 3;
    let n_train = train_data.records.len();
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>)> = None;
    let mut step: u64 = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_weighted = 0.0f64;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let mut data = vec![0.0f32; b * sample_len];
            let mut targets = Vec::with_capacity(b);
            for (slot, &idx) in chunk.iter().enumerate() {
                let rec = &train_data.records[idx];
                let hflip = config.augment_hflip && rng.gen::<bool>();
                let vflip = config.augment_vflip && rng.gen::<bool>();
                write_sample(&mut data[slot * sample_len..(slot + 1) * sample_len], &rec.rgb, hflip, vflip);
                targets.push(rec.target);
            }
            let batch = Tensor::new(&[b, PATCH_SIDE, PATCH_SIDE, 3], data)?;
            step += 1;
            let dropout_seed = seeds::mix(config.seed, step);
            let (grads, loss) = model.backward_batch(&batch, &targets, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            apply_update(&mut model, &grads, &mut opt_state, &config.optimizer)?;
            loss_weighted += loss as f64 * b as f64;
        }
        let train_loss = loss_weighted / n_train as f64;
        let (val_loss, val_accuracy) = score_split(&model, &val_data)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });

        let improved = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, epoch, model.snapshot()));
        } else if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= config.patience {
                stop = StopReason::EarlyStop {
                    best_epoch: *best_epoch,
                };
                break;
            }
        }
    }

    let (best_loss, best_epoch, snapshot) = best.expect("at least one epoch ran");
    model.restore(&snapshot)?;
    let _ = best_epoch;

    Ok(TrainOutcome {
        meta: TrainingMeta {
            epochs_run: epochs.len() as u32,
            final_val_loss: best_loss,
            seed: config.seed,
        },
        report: TrainReport {
            epochs,
            stop,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: config.seed,
        },
        model,
    })
}

/// Per-patch predictions over a split, ordered by patch id.
pub fn evaluate_split(model: &Model<f32>, corpus: &Corpus, split: Split) -> Result<Vec<PredictionRow>> {
    if model.class_count() != 4 {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} classes, the diagnostic pipeline needs 4",
            model.class_count()
        )));
    }
    if model.input_shape() != [PATCH_SIDE, PATCH_SIDE, 3] {
        return Err(Error::CheckpointMismatch(format!(
            "model expects input {:?}, patches are {}x{}x3",
            model.input_shape(),
            PATCH_SIDE,
            PATCH_SIDE
        )));
    }
    let patches: Vec<&PatchRecord> = corpus.split_patches(split);
    if patches.is_empty() {
        return Err(Error::EmptySplit {
            split: split.name().to_string(),
        });
    }
    let rows = exec::map_indexed(patches.len(), |i| -> Result<PredictionRow> {
        let p = patches[i];
        let sample = corpus.load_patch_image(p)?;
        let probs = model.forward_sample(&sample, None)?;
        let predicted = crate::corpus::DiagnosticCategory::from_scores(probs.data());
        let case_id = corpus.case_of_patch(p).case_id.clone();
        Ok(PredictionRow {
            patch_id: p.patch_id.clone(),
            slide_id: p.slide_id.clone(),
            case_id,
            observed: p.observed_dx,
            predicted,
            probs: [
                probs.data()[0],
                probs.data()[1],
                probs.data()[2],
                probs.data()[3],
            ],
        })
    });
    rows.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formats_six_significant_digits() {
        assert_eq!(sig6(1.3862943), "1.38629");
        assert_eq!(sig6(0.6321), "0.632100");
        assert_eq!(sig6(123456.78), "123457");
        assert_eq!(sig6(0.0), "0.00000");
    }

    #[test]
    fn write_sample_flips_are_involutions() {
        let rgb: Vec<u8> = (0..PATCH_SIDE * PATCH_SIDE * 3).map(|i| (i % 251) as u8).collect();
        let mut plain = vec![0.0f32; rgb.len()];
        write_sample(&mut plain, &rgb, false, false);

        // flip twice = identity, via a u8 round trip
        let mut once = vec![0.0f32; rgb.len()];
        write_sample(&mut once, &rgb, true, true);
        let once_u8: Vec<u8> = once.iter().map(|v| (v * 255.0).round() as u8).collect();
        let mut twice = vec![0.0f32; rgb.len()];
        write_sample(&mut twice, &once_u8, true, true);
        assert_eq!(twice, plain);

        // flipping permutes pixels, never changes their values
        let mut sorted_plain: Vec<u32> = plain.iter().map(|v| v.to_bits()).collect();
        let mut sorted_once: Vec<u32> = once.iter().map(|v| v.to_bits()).collect();
        sorted_plain.sort();
        sorted_once.sort();
        assert_eq!(sorted_plain, sorted_once);
    }
}
