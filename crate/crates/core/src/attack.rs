//! Untargeted projected-gradient-descent attack under an L∞ budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid_param, Result};
use crate::nn::{ForwardTrace, Network};
use crate::tensor::Tensor;
use crate::workspace::InstancePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Number of gradient steps (κ).
    pub steps: usize,
    /// L∞ radius of the perturbation ball (ε).
    #[serde(rename = "eps")]
    pub epsilon: f64,
    /// Per-step size (α).
    #[serde(rename = "alpha")]
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 7,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            random_start: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// `ε = 0` is accepted (it yields no perturbation); otherwise a step may
    /// not exceed the ball radius.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid_param("steps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(invalid_param("eps", "must lie in [0, 1)"));
        }
        if !(self.step_size > 0.0 && self.step_size < 1.0) {
            return Err(invalid_param("alpha", "must lie in (0, 1)"));
        }
        if self.epsilon > 0.0 && self.step_size > self.epsilon {
            return Err(invalid_param("alpha", "must not exceed eps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Tensor<f32>,
    pub trace: ForwardTrace,
    /// The adversarial prediction differs from the true label.
    pub success: bool,
}

/// PGD from `image`. `stream` selects the random-start noise stream so that
/// batch attacks are independent of evaluation order.
pub fn pgd_attack(
    net: &Network<f32>,
    image: &Tensor<f32>,
    true_label: usize,
    config: &AttackConfig,
    stream: u64,
) -> Result<AttackOutcome> {
    config.validate()?;
    net.check_image(image)?;
    let eps = config.epsilon as f32;
    let alpha = config.step_size as f32;
    let lower: Vec<f32> = image.data().iter().map(|&v| (v - eps).max(0.0)).collect();
    let upper: Vec<f32> = image.data().iter().map(|&v| (v + eps).min(1.0)).collect();

    let mut x = image.clone();
    if config.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        for (v, (&lo, &hi)) in x.data_mut().iter_mut().zip(lower.iter().zip(&upper)) {
            let noise: f32 = rng.random_range(-eps..=eps);
            *v = (*v + noise).clamp(lo, hi);
        }
    }
    if eps > 0.0 {
        for _ in 0..config.steps {
            let grad = net.input_gradient(&x, true_label)?;
            for (i, (v, g)) in x.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let step = if *g > 0.0 {
                    alpha
                } else if *g < 0.0 {
                    -alpha
                } else {
                    0.0
                };
                *v = (*v + step).clamp(lower[i], upper[i]);
            }
        }
    }
    let trace = net.forward(&x)?;
    let success = trace.predicted_label != true_label;
    Ok(AttackOutcome {
        adversarial: x,
        trace,
        success,
    })
}

/// Attacks every image the model classifies correctly and keeps the
/// successful ones. Pair ids follow dataset order; the random-start stream
/// of image `i` is `i`.
pub fn attack_dataset(net: &Network<f32>, data: &Dataset, config: &AttackConfig) -> Result<Vec<InstancePair>> {
    config.validate()?;
    let results: Result<Vec<Option<InstancePair>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let image = data.image_tensor(i);
            let y = data.label(i);
            let benign = net.forward(&image)?;
            if benign.predicted_label != y {
                return Ok(None);
            }
            let outcome = pgd_attack(net, &image, y, config, i as u64)?;
            if !outcome.success {
                return Ok(None);
            }
            let l2 = image.l2_distance(&outcome.adversarial);
            Ok(Some(InstancePair {
                id: 0,
                source_index: i,
                label: y,
                adversarial_label: outcome.trace.predicted_label,
                benign_probabilities: benign.probabilities,
                adversarial_probabilities: outcome.trace.probabilities,
                perturbation_l2: l2,
                benign: image,
                adversarial: outcome.adversarial,
            }))
        })
        .collect();
    let mut pairs: Vec<InstancePair> = results?.into_iter().flatten().collect();
    for (id, p) in pairs.iter_mut().enumerate() {
        p.id = id;
    }
    Ok(pairs)
}

/// Fraction of correctly classified images that the attack flips.
pub fn success_rate(net: &Network<f32>, data: &Dataset, config: &AttackConfig) -> Result<f64> {
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| net.forward(&data.image_tensor(i)).map(|t| t.predicted_label == data.label(i)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    if correct == 0 {
        return Ok(0.0);
    }
    Ok(attack_dataset(net, data, config)?.len() as f64 / correct as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelSpec};

    /// Conv 1×1 (identity on 3 channels) → ReLU-free → pool → dense, so the
    /// logits are an affine function of the per-channel pixel means.
    fn linear_net() -> Network<f32> {
        let spec = ModelSpec {
            input: [4, 4, 3],
            class_names: vec!["a".into(), "b".into()],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 3,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { inputs: 3, outputs: 2 },
            ],
        };
        let conv_w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let dense_w = vec![2.0, -1.0, 0.5, -1.0, 1.5, 0.0];
        Network::from_params(
            spec,
            vec![vec![conv_w, vec![0.0; 3]], vec![], vec![dense_w, vec![0.1, -0.1]]],
        )
        .unwrap()
    }

    fn image() -> Tensor<f32> {
        Tensor::new(vec![3, 4, 4], (0..48).map(|i| (i as f32 * 0.37) % 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_budget_leaves_image_unchanged() {
        let net = linear_net();
        let img = image();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let out = pgd_attack(&net, &img, 0, &cfg, 0).unwrap();
        assert_eq!(out.adversarial, img);
        let pred = net.forward(&img).unwrap().predicted_label;
        assert_eq!(out.success, pred != 0);
    }

    /// One step on an affine model moves every pixel by α in the direction
    /// of `Wᵀ(p − onehot(y))` for its channel.
    #[test]
    fn one_step_matches_closed_form() {
        let net = linear_net();
        let img = image();
        let cfg = AttackConfig {
            steps: 1,
            epsilon: 0.05,
            step_size: 0.02,
            random_start: false,
            seed: 0,
        };
        let y = 0;
        let p = net.forward(&img).unwrap().probabilities;
        let w = [[2.0, -1.0, 0.5], [-1.0, 1.5, 0.0]];
        let dir: Vec<f64> = (0..3)
            .map(|ch| (0..2).map(|c| w[c][ch] * (p[c] - if c == y { 1.0 } else { 0.0 })).sum())
            .collect();
        let out = pgd_attack(&net, &img, y, &cfg, 0).unwrap();
        for ch in 0..3 {
            for i in 0..16 {
                let x = img.data()[ch * 16 + i];
                let s = if dir[ch] > 0.0 { 0.02 } else if dir[ch] < 0.0 { -0.02 } else { 0.0 };
                let expected = (x + s).clamp((x - 0.05).max(0.0), (x + 0.05).min(1.0));
                assert_eq!(out.adversarial.data()[ch * 16 + i], expected);
            }
        }
    }

    #[test]
    fn budget_and_range_hold_with_random_start() {
        let net = linear_net();
        let img = image();
        let cfg = AttackConfig {
            steps: 10,
            epsilon: 0.1,
            step_size: 0.05,
            random_start: true,
            seed: 9,
        };
        let out = pgd_attack(&net, &img, 1, &cfg, 3).unwrap();
        assert!(out.adversarial.linf_distance(&img) <= 0.1 + 1e-6);
        assert!(out.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = pgd_attack(&net, &img, 1, &cfg, 3).unwrap();
        assert_eq!(out.adversarial, again.adversarial);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            step_size: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_ok());
    }
}
