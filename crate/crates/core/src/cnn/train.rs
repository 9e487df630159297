//! Mini-batch training with Adam, binary cross-entropy and early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamConfig, AdamState, Architecture, CnnError, CnnModel, Tensor3};
use crate::augment::{augment_sample, AugmentConfig};
use crate::dicom::Label;
use crate::grid::Image;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-12;

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[ε, 1 - ε]`.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 64,
            max_epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 5,
            input_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        let bad = |msg: String| Err(CnnError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Architecture::three_layer(self.input_size).blocks()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One grayscale slice at the model's input size with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Last epoch that ran (1-based).
    pub stopped_epoch: usize,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_acc` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.8},{:.8},{:.6}",
                e.epoch, e.train_loss, e.val_loss, e.val_acc
            )
            .unwrap();
        }
        out
    }
}

/// Mean loss, accuracy and per-sample probabilities over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub probabilities: Vec<f64>,
}

/// Classification threshold on the sigmoid output.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn evaluate_samples(
    model: &CnnModel,
    samples: &[Sample],
    chunk: usize,
) -> Result<EvalSummary, CnnError> {
    if samples.is_empty() {
        return Err(CnnError::EmptySplit("evaluation"));
    }
    let ch = model.architecture().input_channels;
    let mut probabilities = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let batch: Vec<Tensor3> = group.iter().map(|s| Tensor3::replicate(&s.image, ch)).collect();
        probabilities.extend(model.logits(&batch)?.into_iter().map(super::sigmoid));
    }
    let n = samples.len() as f64;
    let loss = samples
        .iter()
        .zip(&probabilities)
        .map(|(s, &p)| bce_loss(p, s.label.as_f64()))
        .sum::<f64>()
        / n;
    let correct = samples
        .iter()
        .zip(&probabilities)
        .filter(|(s, &p)| (p >= DECISION_THRESHOLD) == s.label.is_positive())
        .count();
    Ok(EvalSummary {
        loss,
        accuracy: correct as f64 / n,
        probabilities,
    })
}

/// Trains the three-block network from a seeded initialization.
///
/// Each epoch shuffles the training set, optionally augments every sample,
/// and takes one Adam step per mini-batch. Training stops once validation
/// loss has not improved for `early_stop_patience` consecutive epochs or at
/// `max_epochs`; the parameters of the best validation epoch are returned.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    augment: Option<&AugmentConfig>,
) -> Result<(CnnModel, TrainHistory), CnnError> {
    cfg.validate()?;
    if let Some(a) = augment {
        a.validate().map_err(CnnError::InvalidConfig)?;
    }
    if train_set.is_empty() {
        return Err(CnnError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(CnnError::EmptySplit("validation"));
    }
    let first = train_set[0].label;
    if train_set.iter().all(|s| s.label == first) {
        return Err(CnnError::SingleClassTrainSet);
    }
    for s in train_set.iter().chain(val_set) {
        if s.image.shape() != (cfg.input_size, cfg.input_size) {
            return Err(CnnError::ShapeMismatch(format!(
                "sample of {}x{} for input_size {}",
                s.image.rows(),
                s.image.cols(),
                cfg.input_size
            )));
        }
    }

    let mut model = CnnModel::new(Architecture::three_layer(cfg.input_size), cfg.seed)?;
    let channels = model.architecture().input_channels;
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut history = TrainHistory {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
    };
    let mut best: Option<(f64, CnnModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train_set[i];
                let image = match augment {
                    Some(a) => augment_sample(&s.image, a, &mut rng),
                    None => s.image.clone(),
                };
                batch.push(Tensor3::replicate(&image, channels));
                labels.push(s.label.as_f64());
            }
            let (probs, grads) = model.loss_gradient(&batch, &labels)?;
            loss_sum += probs
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| bce_loss(p, y))
                .sum::<f64>();
            if !grads.iter().all(|g| g.is_finite()) {
                return Err(CnnError::NonFinite {
                    what: "gradient",
                    epoch,
                });
            }
            adam_step(model.params_mut(), &grads, &mut adam, &adam_cfg)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() || !model.is_finite() {
            return Err(CnnError::NonFinite {
                what: "training loss",
                epoch,
            });
        }
        let val = evaluate_samples(&model, val_set, cfg.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_acc: val.accuracy,
        });
        history.stopped_epoch = epoch;

        let improved = best.as_ref().is_none_or(|(l, _)| val.loss < *l);
        if improved {
            best = Some((val.loss, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert_eq!(bce_loss(0.5, 1.0), std::f64::consts::LN_2);
        assert_eq!(bce_loss(0.5, 0.0), std::f64::consts::LN_2);
        assert!(bce_loss(1.0 - BCE_EPS, 1.0) < 1e-11);
        assert!((bce_loss(0.9, 0.0) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    fn toy_set(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let v = if positive { 0.8 } else { 0.2 };
                Sample {
                    image: Image::from_fn(size, size, |r, c| {
                        v * (0.75 + 0.25 * (((r * 7 + c * 3 + i) % 5) as f64 / 4.0))
                    }),
                    label: Label::from_bool(positive),
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 3,
            input_size: 26,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let data = toy_set(8, 26);
        let cfg = small_cfg();
        let aug = AugmentConfig::default();
        let a = train(&data, &data, &cfg, Some(&aug)).unwrap();
        let b = train(&data, &data, &cfg, Some(&aug)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        assert!(a.1.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn plateau_stops_early() {
        let data = toy_set(6, 26);
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            max_epochs: 20,
            early_stop_patience: 2,
            ..small_cfg()
        };
        let (_, h) = train(&data, &data, &cfg, None).unwrap();
        assert!(h.stopped_epoch <= 1 + cfg.early_stop_patience);
        assert_eq!(h.best_epoch, 1);
        assert_eq!(h.epochs.len(), h.stopped_epoch);
    }

    #[test]
    fn split_errors() {
        let data = toy_set(4, 26);
        let cfg = small_cfg();
        assert!(matches!(train(&[], &data, &cfg, None), Err(CnnError::EmptySplit(_))));
        assert!(matches!(train(&data, &[], &cfg, None), Err(CnnError::EmptySplit(_))));
        let one_class: Vec<_> = data.iter().filter(|s| s.label.is_positive()).cloned().collect();
        assert!(matches!(
            train(&one_class, &data, &cfg, None),
            Err(CnnError::SingleClassTrainSet)
        ));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(matches!(train(&data, &data, &bad, None), Err(CnnError::InvalidConfig(_))));
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 0.75,
            }],
            stopped_epoch: 1,
            best_epoch: 1,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,val_loss,val_acc\n1,0.50000000,0.25000000,0.750000\n"
        );
    }
}
