//! Mini-batch SGD with categorical crossentropy on the softmax output.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 40,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean crossentropy per epoch, each sample's loss taken just before the
    /// update of the batch it belongs to.
    pub epoch_loss: Vec<f64>,
    /// Training-set accuracy after the last epoch.
    pub accuracy: f64,
}

pub fn train(model: &mut Model, data: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {}",
            config.learning_rate
        )));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch size must be positive".into(),
        ));
    }
    let probs_node = model.probs_node().ok_or(Error::NoSoftmax)?;
    for s in data {
        if s.label >= model.classes() {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: model.classes(),
            });
        }
        model.check_input(&s.image)?;
    }

    let logits = model.logits_node();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut losses = vec![0.0; data.len()];

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Tensor> = model
                .graph()
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for &i in batch {
                let s = &data[i];
                let tape = model.forward(&s.image, &[])?;
                let z = tape.value(logits).data();
                let p = tape.value(probs_node).data();
                // log-sum-exp form stays finite for confident predictions
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
                losses[i] = lse - z[s.label];

                let mut seed = Tensor::new(vec![p.len()], p.to_vec())?;
                seed.data_mut()[s.label] -= 1.0;
                let grads = model.graph().backward_seeded(&tape, logits, &seed, true)?;
                for (a, g) in acc.iter_mut().zip(grads.params()) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, y)| *x += y);
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            let graph = model.graph_mut();
            for (id, g) in acc.iter().enumerate() {
                graph
                    .param_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, d)| *w -= step * d);
            }
        }
        let mean = losses.iter().sum::<f64>() / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss(epoch_loss.len()));
        }
        epoch_loss.push(mean);
    }

    Ok(TrainReport {
        epoch_loss,
        accuracy: accuracy(model, data)?,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &Model, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for s in data {
        if model.predict(&s.image)?.argmax() == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blobs2, build_model, LayerSpec, ModelConfig};

    fn blob_model() -> Model {
        build_model(ModelConfig {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            classes: 2,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs2(17, 40);
        let mut m = blob_model();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 4,
            seed: 1,
        };
        let r = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(r.epoch_loss.len(), 50);
        assert!(r.accuracy >= 0.95, "{}", r.accuracy);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_and_params() {
        let data = blobs2(2, 10);
        let mut m = blob_model();
        let before = m.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            batch_size: 3,
            seed: 9,
        };
        let r = train(&mut m, &data, &cfg).unwrap();
        assert!(r.epoch_loss.windows(2).all(|w| w[0] == w[1]));
        assert!(m.same_params(&before));
    }

    #[test]
    fn single_sample_loss_decreases() {
        let data = blobs2(5, 1)[..1].to_vec();
        let mut m = blob_model();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 1,
            seed: 0,
        };
        let r = train(&mut m, &data, &cfg).unwrap();
        assert!(
            r.epoch_loss.windows(2).all(|w| w[1] < w[0]),
            "{:?}",
            r.epoch_loss
        );
    }

    #[test]
    fn rejects_bad_datasets() {
        let mut m = blob_model();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&mut m, &[], &cfg), Err(Error::EmptyDataset)));
        let bad = vec![Sample {
            image: Tensor::from_vec(vec![0.0, 0.0]),
            label: 2,
        }];
        assert!(matches!(
            train(&mut m, &bad, &cfg),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }
}
