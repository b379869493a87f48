use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Mode, Network};
use super::spec::LayerSpec;
use crate::data::Dataset;
use crate::error::{invalid_param, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fixes the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_param("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid_param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_param("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.test_accuracy)
    }
}

/// Fraction of images whose inference-mode prediction equals the label.
pub fn accuracy(net: &Network<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let per = data.image_len();
    let correct: Result<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .par_chunks(64)
        .map(|chunk| {
            let mut pixels = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                pixels.extend_from_slice(data.image(i));
            }
            let batch = Tensor::new(data.batch_shape(chunk.len()), pixels)?;
            let traces = net.forward_batch(&batch)?;
            Ok(chunk
                .iter()
                .zip(&traces)
                .filter(|(&i, t)| t.predicted_label == data.label(i))
                .count())
        })
        .collect();
    Ok(correct?.into_iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Minibatch SGD with momentum on mean cross-entropy. Batch norm uses
/// batch statistics while training and its running statistics are updated
/// after every step. Single-threaded and fully determined by `config.seed`.
pub fn train(
    net: &mut Network<f32>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let classes = net.class_count();
    if let Some(bad) = train_set.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
    }
    if train_set.image_shape() != net.spec().input_chw() {
        return Err(Error::InvalidInput("dataset images do not match the model input".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Vec<Vec<f32>>> = net
        .spec()
        .layers
        .iter()
        .zip(net.params())
        .map(|(l, p)| p[..l.trainable_count()].iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let per = train_set.image_len();
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let mut report = TrainReport::default();
    let shapes = net.spec().validate()?;
    let spatial: Vec<usize> = (0..shapes.len())
        .map(|li| {
            let [_, h, w] = if li == 0 { net.spec().input_chw() } else { shapes[li - 1] };
            h * w
        })
        .collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len() * per);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                pixels.extend_from_slice(train_set.image(i));
                labels.push(train_set.label(i));
            }
            let out = net.batch_gradients(&pixels, &labels, Mode::Train);
            if !out.loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
            loss_sum += out.loss;
            batches += 1;

            for ((params, grads), vel) in net
                .params_mut()
                .iter_mut()
                .zip(&out.grads.layers)
                .zip(velocity.iter_mut())
            {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(vel.iter_mut()) {
                    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            for (li, mean, var) in out.bn_stats {
                let momentum = match net.spec().layers[li] {
                    LayerSpec::BatchNorm { momentum, .. } => momentum,
                    _ => unreachable!(),
                };
                let m = (chunk.len() * spatial[li]) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let p = &mut net.params_mut()[li];
                for ch in 0..mean.len() {
                    let rm = p[2][ch] as f64;
                    let rv = p[3][ch] as f64;
                    p[2][ch] = ((1.0 - momentum) * rm + momentum * mean[ch]) as f32;
                    p[3][ch] = ((1.0 - momentum) * rv + momentum * var[ch] * unbias) as f32;
                }
            }
            if net.params().iter().flatten().flatten().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
        }
        let train_accuracy = accuracy(net, train_set)?;
        let test_accuracy = test_set.map(|t| accuracy(net, t)).transpose()?;
        report.history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches as f64,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok(report)
}
