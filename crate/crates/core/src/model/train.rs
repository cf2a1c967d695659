use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare_corpus, ModelConfig, ModelError, PreparedPatient, Prediction, TempPNet};
use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::encoder;
use crate::eval::{compute_metrics, Metrics};
use crate::sensor::{quaternion_to_rotation, sample_random_quaternion, PatientRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Random rotation of every training test, redrawn each epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            seed: 0,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 10,
            split: [0.6, 0.2, 0.2],
            augment: true,
        }
    }
}

/// Patient indices of each partition, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class is shuffled with the seed and cut by the
/// ratios, rounding the train and validation shares.
pub fn split_corpus(labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<Split, ModelError> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(ModelError::InvalidInput(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * ratios[0]).round() as usize;
        let n_val = ((n * ratios[1]).round() as usize).min(idx.len() - n_train);
        split.train.extend(&idx[..n_train]);
        split.validation.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_nll: f64,
    pub validation_loss: f64,
    pub validation: Metrics,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation F1.
    pub model: TempPNet,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub split: Split,
}

/// Mean cross-entropy of predictions.
fn mean_nll(predictions: &[Prediction], labels: &[u8]) -> f64 {
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let z = if y == 1 { p.logit } else { -p.logit };
            -crate::autodiff::log_sigmoid(z)
        })
        .sum();
    total / predictions.len().max(1) as f64
}

/// Metrics and predictions of `model` on prepared patients.
pub fn evaluate(model: &TempPNet, patients: &[PreparedPatient]) -> Result<(Metrics, Vec<Prediction>), ModelError> {
    let predictions = model.predict_prepared(patients, 32)?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = patients.iter().map(|p| p.label).collect();
    let metrics = compute_metrics(&probs, &labels).map_err(|e| ModelError::InvalidInput(e.to_string()))?;
    Ok((metrics, predictions))
}

/// One optimizer step on a batch; returns (loss, nll).
fn train_step(
    model: &mut TempPNet,
    adam: &mut Adam,
    batch: &[&PreparedPatient],
) -> Result<(f64, f64), ModelError> {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let bg = model.forward_graph(&mut g, &vars, batch, true)?;
    let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
    let loss = model.loss_graph(&mut g, &bg.patients, &labels)?;
    let grads = g.backward(loss.total)?;
    let grad_map: BTreeMap<String, Vec<f64>> = vars
        .iter()
        .filter_map(|(name, &v)| grads.raw(v).map(|d| (name.clone(), d.to_vec())))
        .collect();
    adam.step(&mut model.params, &grad_map)?;
    encoder::update_running_stats(&mut model.buffers, &bg.stats);
    Ok((g.value(loss.total).item(), g.value(loss.nll).item()))
}

/// Trains on the train split with Adam, keeping the parameters of the epoch
/// with the best validation F1 (lower validation loss breaks ties) and
/// stopping after `patience` epochs without improvement.
pub fn train(
    corpus: &[PatientRecord],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    let labels: Vec<u8> = corpus.iter().map(|p| p.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(ModelError::InvalidInput("training needs both classes in the corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(ModelError::InvalidInput("batch size must be positive".into()));
    }
    let split = split_corpus(&labels, config.split, config.seed)?;
    let prepared = prepare_corpus(corpus, model_config)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();
    let train_set = pick(&split.train);
    let val_set = pick(&split.validation);
    let val_labels: Vec<u8> = val_set.iter().map(|p| p.label).collect();

    let mut model = TempPNet::new(model_config.clone(), config.seed)?;
    let mut adam = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let mut best = model.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nll_sum) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<PreparedPatient>;
            let batch: Vec<&PreparedPatient> = if config.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| {
                        let p = &train_set[i];
                        let rotations: Vec<_> = (0..p.num_tests())
                            .map(|_| quaternion_to_rotation(sample_random_quaternion(&mut rng)).expect("unit"))
                            .collect();
                        p.rotated(&rotations)
                    })
                    .collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let (loss, nll) = train_step(&mut model, &mut adam, &batch)?;
            loss_sum += loss * batch.len() as f64;
            nll_sum += nll * batch.len() as f64;
        }
        let n = train_set.len().max(1) as f64;
        let (validation, val_loss) = if val_set.is_empty() {
            (Metrics::default(), f64::NAN)
        } else {
            let (m, preds) = evaluate(&model, &val_set)?;
            (m, mean_nll(&preds, &val_labels))
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_nll: nll_sum / n,
            validation_loss: val_loss,
            validation,
        });
        let key = (validation.f1, -val_loss);
        let improved = match best_key {
            None => true,
            Some((f1, nl)) => key.0 > f1 || (key.0 == f1 && key.1 > nl),
        };
        if improved {
            best_key = Some(key);
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        history,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<u8> = (0..50).map(|i| u8::from(i % 2 == 0)).collect();
        let s = split_corpus(&labels, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.train.len(), 30);
        assert_eq!(s.validation.len(), 10);
        assert_eq!(s.test.len(), 10);
        let pos = |v: &[usize]| v.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(pos(&s.train), 15);
        let mut all: Vec<usize> = [s.train, s.validation, s.test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_corpus(&[0, 1], [0.5, 0.5, 0.5], 0).is_err());
    }
}
