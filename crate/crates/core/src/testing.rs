//! Independent oracles used by the test suites: central finite differences
//! for gradients and a direct-definition agglomerative clustering.
//!
//! Nothing here is used by the library itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::Linkage;
use crate::nn::{LayerSpec, Mode, ModelSpec, Network};
use crate::tensor::Tensor;

/// A network whose every parameter, including batch-norm statistics, is
/// randomized away from its initial value.
pub fn random_network(spec: ModelSpec, seed: u64) -> Network<f64> {
    let mut net = Network::<f64>::init(spec, seed).expect("valid spec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layers = net.spec().layers.clone();
    for (layer, group) in layers.iter().zip(net.params_mut()) {
        match layer {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                for b in group[1].iter_mut() {
                    *b = rng.random_range(-0.1..0.1);
                }
            }
            LayerSpec::BatchNorm { .. } => {
                for v in group[0].iter_mut() {
                    *v = rng.random_range(0.5..1.5);
                }
                for v in group[1].iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
                for v in group[2].iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
                for v in group[3].iter_mut() {
                    *v = rng.random_range(0.5..1.5);
                }
            }
            _ => {}
        }
    }
    net
}

/// Batch of `n` random images with pixels in `[0.1, 0.9]`, so that small
/// finite-difference probes stay inside the valid pixel range.
pub fn random_images(spec: &ModelSpec, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = spec.input_chw();
    let data = (0..n * c * h * w).map(|_| rng.random_range(0.1..0.9)).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Probes discarded because the perturbation crossed a ReLU or max-pool
    /// switch point.
    pub skipped: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_relative_error = self.max_relative_error.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error_floor() -> f64 {
    1e-6
}

/// Compares parameter gradients against central differences of the loss
/// on `probes` randomly chosen entries of every trainable tensor.
pub fn check_parameter_gradients(
    net: &Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    probes: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = net.parameter_gradients(images, labels, mode).unwrap();
    let base_pattern = net.activation_pattern(images, mode).unwrap();
    let mut out = GradCheck::default();
    let mut probe_net = net.clone();
    for (li, layer) in net.spec().layers.iter().enumerate() {
        for ti in 0..layer.trainable_count() {
            let len = net.params()[li][ti].len();
            for _ in 0..probes {
                let idx = rng.random_range(0..len);
                let orig = net.params()[li][ti][idx];
                probe_net.params_mut()[li][ti][idx] = orig + h;
                let plus = probe_net.loss(images, labels, mode).unwrap();
                let p_plus = probe_net.activation_pattern(images, mode).unwrap();
                probe_net.params_mut()[li][ti][idx] = orig - h;
                let minus = probe_net.loss(images, labels, mode).unwrap();
                let p_minus = probe_net.activation_pattern(images, mode).unwrap();
                probe_net.params_mut()[li][ti][idx] = orig;
                if p_plus != base_pattern || p_minus != base_pattern {
                    out.skipped += 1;
                    continue;
                }
                out.record(grads.layers[li][ti][idx], (plus - minus) / (2.0 * h));
            }
        }
    }
    out
}

/// Compares [`Network::input_gradient`] against central differences on
/// `probes` random pixels.
pub fn check_input_gradient(net: &Network<f64>, image: &Tensor<f64>, label: usize, probes: usize, h: f64, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad = net.input_gradient(image, label).unwrap();
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(image.shape());
    let as_batch = |t: &Tensor<f64>| t.clone().reshape(batch_shape.clone()).unwrap();
    let base_pattern = net.activation_pattern(&as_batch(image), Mode::Inference).unwrap();
    let mut out = GradCheck::default();
    for _ in 0..probes {
        let idx = rng.random_range(0..image.len());
        let mut probe = image.clone();
        probe.data_mut()[idx] += h;
        let plus_img = as_batch(&probe);
        probe.data_mut()[idx] -= 2.0 * h;
        let minus_img = as_batch(&probe);
        if net.activation_pattern(&plus_img, Mode::Inference).unwrap() != base_pattern
            || net.activation_pattern(&minus_img, Mode::Inference).unwrap() != base_pattern
        {
            out.skipped += 1;
            continue;
        }
        let plus = net.loss(&plus_img, &[label], Mode::Inference).unwrap();
        let minus = net.loss(&minus_img, &[label], Mode::Inference).unwrap();
        out.record(grad.data()[idx], (plus - minus) / (2.0 * h));
    }
    out
}

/// One merge of the reference clustering: the two merged cluster ids
/// (leaves `0..n`, merges numbered from `n`) and the merge height.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveMerge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Agglomerative clustering straight from the linkage definitions: every
/// step rescans all cluster pairs and recomputes their distance from the
/// original point distances. Ties go to the smallest `(min id, max id)`.
pub fn naive_agglomerate(dist: &[Vec<f64>], linkage: Linkage) -> Vec<NaiveMerge> {
    let n = dist.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    let mut next_id = n;
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let (ida, ma) = &clusters[i];
                let (idb, mb) = &clusters[j];
                let pairs = ma.iter().flat_map(|&p| mb.iter().map(move |&q| dist[p][q]));
                let d = match linkage {
                    Linkage::Single => pairs.fold(f64::INFINITY, f64::min),
                    Linkage::Complete => pairs.fold(f64::NEG_INFINITY, f64::max),
                    Linkage::Average => pairs.sum::<f64>() / (ma.len() * mb.len()) as f64,
                };
                let key = (d, (*ida).min(*idb), (*ida).max(*idb));
                let better = match best {
                    None => true,
                    Some((bd, blo, bhi, _, _)) => {
                        key.0 < bd || (key.0 == bd && (key.1, key.2) < (blo, bhi))
                    }
                };
                if better {
                    best = Some((key.0, key.1, key.2, i, j));
                }
            }
        }
        let (d, lo, hi, i, j) = best.unwrap();
        let mut members = clusters[i].1.clone();
        members.extend_from_slice(&clusters[j].1);
        clusters.remove(j);
        clusters.remove(i);
        clusters.push((next_id, members));
        merges.push(NaiveMerge { a: lo, b: hi, height: d });
        next_id += 1;
    }
    merges
}

/// A small trained model and its attack run: shapes dataset at
/// `image_size`, every 5th image held out and attacked with default PGD.
pub fn small_run(seed: u64, per_class: usize, image_size: usize, epochs: usize) -> (Network<f32>, crate::workspace::Run) {
    use crate::attack::{attack_dataset, AttackConfig};
    use crate::data::generate_shapes_dataset;
    use crate::nn::{train, TrainConfig};

    let data = generate_shapes_dataset(seed, per_class, image_size).expect("valid dataset");
    let (train_set, test_set) = data.split_holdout(5);
    let spec = ModelSpec::mini_net_sized(image_size, data.class_names().to_vec());
    let mut net = Network::<f32>::init(spec, seed).expect("valid spec");
    let config = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    train(&mut net, &train_set, None, &config).expect("training converges");
    let attack = AttackConfig {
        seed,
        ..AttackConfig::default()
    };
    let pairs = attack_dataset(&net, &test_set, &attack).expect("attack runs");
    let run = crate::workspace::Run::new(
        "model.bin".into(),
        "data".into(),
        5,
        attack,
        data.class_names().to_vec(),
        data.image_shape(),
        pairs,
    );
    (net, run)
}
