use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{counts_of, MultiRateSample};
use crate::error::{Error, Result};
use crate::loss::{ClassWeights, LossConfig};
use crate::mfc::EncoderConfig;
use crate::model::{Model, ModelConfig, ModelVariant};
use crate::nc3::predict;
use crate::optim::{lr_at_epoch, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub k: f64,
    pub loss: LossConfig,
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    pub etf_dim: Option<usize>,
    pub seed: u64,
    /// Samples per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 1e-4,
            tau: 0.4,
            k: 0.3,
            loss: LossConfig::default(),
            variant: ModelVariant::IbaNet,
            encoder: EncoderConfig::default(),
            etf_dim: None,
            seed: 0,
            eval_chunk: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_chunk == 0 {
            return Err(Error::Parameter("epochs, batch size and eval chunk must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate and weight decay must be non-negative (lr={}, wd={})",
                self.lr, self.weight_decay
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Parameter(format!("k must lie in [0, 1], got {}", self.k)));
        }
        self.loss.validate()
    }

    pub fn model_config(&self, rates_hz: &[f64], classes: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            encoder: self.encoder.clone(),
            rates_hz: rates_hz.to_vec(),
            classes,
            etf_dim: self.etf_dim,
            tau: self.tau,
            k: self.k,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub warnings: Vec<String>,
    /// Rows whose projected feature norm hit the normalisation guard.
    pub degenerate_rows: usize,
}

/// Class counts for the loss weights, from the training split only. A class
/// that is missing from training but present in validation gets count 1.
fn training_counts(train: &[MultiRateSample], val: &[MultiRateSample], classes: usize, warnings: &mut Vec<String>) -> Vec<usize> {
    let mut counts = counts_of(train, classes);
    let val_counts = counts_of(val, classes);
    for c in 0..classes {
        if counts[c] == 0 {
            if val_counts[c] > 0 {
                warnings.push(format!("class {c} appears in validation but not in training; loss weight uses count 1"));
            }
            counts[c] = 1;
        }
    }
    counts
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub fn train(config: &TrainConfig, train: &[MultiRateSample], val: &[MultiRateSample], classes: usize) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train.first().ok_or_else(|| Error::Contract("empty training split".into()))?;
    if val.is_empty() {
        return Err(Error::Contract("empty validation split".into()));
    }
    let mut model = Model::new(config.model_config(&first.rates_hz(), classes))?;
    let mut warnings = Vec::new();
    let counts = training_counts(train, val, classes, &mut warnings);
    let weights = ClassWeights::new(&counts, config.loss.beta)?;

    let mut adam = AdamState::new(model.store.values().iter().map(Tensor::shape));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_5a17);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_refs: Vec<&MultiRateSample> = val.iter().collect();
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut degenerate_rows = 0;

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&MultiRateSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = model.batch(&samples)?;
            let mut tape = Tape::new().with_finite_check(false);
            let p = model.store.bind(&mut tape, true);
            let out = model.forward(&mut tape, &p, &batch)?;
            degenerate_rows += out.degenerate_rows;
            let loss = config.loss.compute(&mut tape, out.logits, &batch.labels, &weights)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_sum += value * batch.len() as f64;
            correct += tape
                .value(out.logits)
                .data()
                .chunks(classes)
                .zip(&batch.labels)
                .filter(|(z, &y)| predict(z) == y)
                .count();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v)).collect();
            adam.step(model.store.values_mut(), &grads, lr, config.weight_decay)?;
        }

        let val_pred = model.infer(&val_refs, config.eval_chunk)?.predictions();
        let val_accuracy = accuracy(&val_pred, &val_labels);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: 100.0 * correct as f64 / train.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.store.values().to_vec()));
        }
    }

    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.store.values_mut().clone_from_slice(&params);
    Ok(TrainOutcome { model, history, best_epoch, best_val_accuracy, warnings, degenerate_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SensorWindow;
    use crate::loss::LossKind;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Vec<MultiRateSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let level = if label == 0 { -1.0 } else { 1.0 };
                let windows = [(20.0, 16), (10.0, 8)]
                    .iter()
                    .map(|&(r, w)| SensorWindow {
                        subject_id: "s".into(),
                        label,
                        sampling_rate_hz: r,
                        channels: 1,
                        samples: w,
                        values: (0..w).map(|_| level + rng.random_range(-0.3..0.3)).collect(),
                    })
                    .collect();
                MultiRateSample { label, subject_id: "s".into(), windows }
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-2,
            encoder: EncoderConfig { channels: vec![4, 8], ..EncoderConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = separable(40, 0);
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..small_config() };
        let out = train(&cfg, &data, &data, 2).unwrap();
        let fresh = Model::new(cfg.model_config(&data[0].rates_hz(), 2)).unwrap();
        assert_eq!(out.model.store.values(), fresh.store.values());
    }

    #[test]
    fn deterministic_history() {
        let data = separable(40, 1);
        let a = train(&small_config(), &data, &data, 2).unwrap();
        let b = train(&small_config(), &data, &data, 2).unwrap();
        let bits = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.model.store.values(), b.model.store.values());
    }

    #[test]
    fn learns_separable_data() {
        let data = separable(200, 2);
        let cfg = TrainConfig { epochs: 100, batch_size: 32, lr: 1e-2, ..small_config() };
        let out = train(&cfg, &data, &data, 2).unwrap();
        let pred = out.model.infer(&data.iter().collect::<Vec<_>>(), 64).unwrap().predictions();
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        assert!(accuracy(&pred, &labels) >= 99.0);
    }

    #[test]
    fn history_follows_schedule_and_best_epoch() {
        let data = separable(30, 3);
        let cfg = TrainConfig { epochs: 45, batch_size: 30, ..small_config() };
        let out = train(&cfg, &data, &data, 2).unwrap();
        for r in &out.history {
            assert_eq!(r.lr, lr_at_epoch(cfg.lr, r.epoch));
        }
        let max = out.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
        let first = out.history.iter().position(|r| r.val_accuracy == max).unwrap();
        assert_eq!(out.best_epoch, first);
        assert_eq!(out.best_val_accuracy, max);
    }

    #[test]
    fn missing_class_warns() {
        let data = separable(20, 4);
        let train_only: Vec<_> = data.iter().filter(|s| s.label == 0).cloned().collect();
        let cfg = TrainConfig { loss: LossConfig { kind: LossKind::CbFocal, ..LossConfig::default() }, ..small_config() };
        let out = train(&cfg, &train_only, &data, 2).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn divergence_is_located() {
        let data = separable(24, 5);
        let cfg = TrainConfig { batch_size: 8, lr: 1e300, ..small_config() };
        match train(&cfg, &data, &data, 2) {
            Err(Error::Divergence { epoch: 0, batch }) => assert!(batch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
