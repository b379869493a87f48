use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache, ConvGeom};
use super::spec::{ActShape, LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-layer record of one inference pass, restricted to the parts the
/// analysis needs: last-conv maps, pooled vector, logits, probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// `n × h_f × w_f` activations feeding the global average pool.
    pub last_conv_maps: Tensor<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_label: usize,
}

impl ForwardTrace {
    pub fn neuron_count(&self) -> usize {
        self.pooled.len()
    }

    /// Feature-map extent `(h_f, w_f)`.
    pub fn map_size(&self) -> (usize, usize) {
        let s = self.last_conv_maps.shape();
        (s[1], s[2])
    }

    /// Feature map of neuron `k`, row-major.
    pub fn map(&self, k: usize) -> &[f64] {
        let (h, w) = self.map_size();
        &self.last_conv_maps.data()[k * h * w..(k + 1) * h * w]
    }
}

/// Gradients of the trainable tensors, laid out like [`Network::params`]
/// (batch-norm running statistics are omitted).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<Vec<T>>>,
}

pub(crate) enum LayerCache<T> {
    Conv { cols: Vec<T> },
    Bn(BnCache<T>),
    Relu { out: Vec<T> },
    MaxPool { argmax: Vec<u32>, in_len: usize },
    Gap,
    Dense { input: Vec<T> },
}

pub(crate) struct BatchOutput<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
    pub input_grad: Vec<T>,
    /// Per batch-norm layer (by layer index): batch mean and biased variance.
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Index of the largest value; the first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A sequential CNN with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    spec: ModelSpec,
    shapes: Vec<ActShape>,
    params: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Seeded He-uniform initialization for conv and dense weights, zero
    /// biases, identity batch norm.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let tensors = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    vec![
                        he_uniform(&mut rng, fan_in, out_channels * fan_in),
                        vec![T::ZERO; out_channels],
                    ]
                }
                LayerSpec::BatchNorm { channels, .. } => vec![
                    vec![T::ONE; channels],
                    vec![T::ZERO; channels],
                    vec![T::ZERO; channels],
                    vec![T::ONE; channels],
                ],
                LayerSpec::Dense { inputs, outputs } => vec![
                    he_uniform(&mut rng, inputs, inputs * outputs),
                    vec![T::ZERO; outputs],
                ],
                _ => vec![],
            };
            params.push(tensors);
        }
        Ok(Self { spec, shapes, params })
    }

    /// Assembles a network from explicit parameter tensors.
    pub fn from_params(spec: ModelSpec, params: Vec<Vec<Vec<T>>>) -> Result<Self> {
        let shapes = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::InvalidModel(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, group)) in spec.layers.iter().zip(&params).enumerate() {
            let expected = layer.param_shapes();
            if expected.len() != group.len()
                || expected
                    .iter()
                    .zip(group)
                    .any(|(s, t)| s.iter().product::<usize>() != t.len())
            {
                return Err(Error::InvalidModel(format!("layer {i}: parameter sizes do not match")));
            }
            if group.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { spec, shapes, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<Vec<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Vec<T>>] {
        &mut self.params
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count()
    }

    pub fn neuron_count(&self) -> usize {
        self.spec.neuron_count()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Vec::len).sum()
    }

    /// Dense weights as `classes × neurons`, row-major.
    pub fn dense_weights(&self) -> (&[T], &[T]) {
        let last = self.params.last().expect("validated model");
        (&last[0], &last[1])
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|t| t.iter().map(|v| U::from_f64(v.to_f64())).collect())
                        .collect()
                })
                .collect(),
        }
    }

    fn in_shape(&self, layer: usize) -> ActShape {
        if layer == 0 {
            self.spec.input_chw()
        } else {
            self.shapes[layer - 1]
        }
    }

    /// Validates a single `C×H×W` image with pixels in `[0, 1]`.
    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.spec.input_chw();
        if image.shape() != [c, h, w] {
            return Err(Error::InvalidInput(format!(
                "expected image of shape [{c}, {h}, {w}], got {:?}",
                image.shape()
            )));
        }
        if image
            .data()
            .iter()
            .any(|v| !v.is_finite() || v.to_f64() < 0.0 || v.to_f64() > 1.0)
        {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn check_batch(&self, images: &Tensor<T>) -> Result<usize> {
        let [c, h, w] = self.spec.input_chw();
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::InvalidInput(format!(
                "expected a batch of shape [N, {c}, {h}, {w}], got {s:?}"
            )));
        }
        if images
            .data()
            .iter()
            .any(|v| !v.is_finite() || v.to_f64() < 0.0 || v.to_f64() > 1.0)
        {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(s[0])
    }

    /// Runs layers `0..end` on a batch of `n` images.
    pub(crate) fn forward_layers(
        &self,
        x: &[T],
        n: usize,
        end: usize,
        mode: Mode,
        keep: bool,
    ) -> (Vec<T>, Vec<LayerCache<T>>) {
        let mut act = x.to_vec();
        let mut caches = Vec::new();
        for li in 0..end {
            let [c, h, w] = self.in_shape(li);
            let p = &self.params[li];
            let (next, cache) = match self.spec.layers[li] {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let [_, ho, wo] = self.shapes[li];
                    let g = ConvGeom {
                        c,
                        h,
                        w,
                        out_c: out_channels,
                        k: kernel,
                        stride,
                        pad,
                        ho,
                        wo,
                    };
                    let (out, cols) = layers::conv_forward(&g, n, &act, &p[0], &p[1], keep);
                    (out, LayerCache::Conv { cols })
                }
                LayerSpec::BatchNorm { eps, .. } => {
                    let (out, cache) = layers::batchnorm_forward(
                        n,
                        c,
                        h * w,
                        &act,
                        p,
                        eps,
                        mode == Mode::Train,
                        keep,
                    );
                    match cache {
                        Some(bc) => (out, LayerCache::Bn(bc)),
                        None => (out, LayerCache::Gap),
                    }
                }
                LayerSpec::Relu => {
                    let out = layers::relu_forward(&act);
                    let cache = if keep {
                        LayerCache::Relu { out: out.clone() }
                    } else {
                        LayerCache::Gap
                    };
                    (out, cache)
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let (out, argmax) = layers::maxpool_forward(n, c, h, w, kernel, stride, &act);
                    (
                        out,
                        LayerCache::MaxPool {
                            argmax,
                            in_len: act.len(),
                        },
                    )
                }
                LayerSpec::GlobalAvgPool => (layers::gap_forward(n * c, h * w, &act), LayerCache::Gap),
                LayerSpec::Dense { inputs, outputs } => {
                    let out = layers::dense_forward(n, inputs, outputs, &act, &p[0], &p[1]);
                    let cache = LayerCache::Dense {
                        input: if keep { std::mem::take(&mut act) } else { Vec::new() },
                    };
                    (out, cache)
                }
            };
            if keep {
                caches.push(cache);
            }
            act = next;
        }
        (act, caches)
    }

    /// Backpropagates `dout` through all layers. Returns the input gradient
    /// and parameter gradients.
    pub(crate) fn backward(&self, n: usize, caches: &[LayerCache<T>], dout: Vec<T>) -> (Vec<T>, Gradients<T>) {
        let mut grads: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.spec.layers.len()];
        let mut d = dout;
        for li in (0..self.spec.layers.len()).rev() {
            let [c, h, w] = self.in_shape(li);
            let p = &self.params[li];
            d = match (&self.spec.layers[li], &caches[li]) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    LayerCache::Conv { cols },
                ) => {
                    let [_, ho, wo] = self.shapes[li];
                    let g = ConvGeom {
                        c,
                        h,
                        w,
                        out_c: *out_channels,
                        k: *kernel,
                        stride: *stride,
                        pad: *pad,
                        ho,
                        wo,
                    };
                    let (dx, dw, db) = layers::conv_backward(&g, n, cols, &d, &p[0]);
                    grads[li] = vec![dw, db];
                    dx
                }
                (LayerSpec::BatchNorm { .. }, LayerCache::Bn(cache)) => {
                    let (dx, dg, db) = layers::batchnorm_backward(n, c, h * w, cache, &p[0], &d);
                    grads[li] = vec![dg, db];
                    dx
                }
                (LayerSpec::Relu, LayerCache::Relu { out }) => layers::relu_backward(out, &d),
                (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax, in_len }) => {
                    layers::maxpool_backward(*in_len, argmax, &d)
                }
                (LayerSpec::GlobalAvgPool, _) => layers::gap_backward(n * c, h * w, &d),
                (LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                    let (dx, dw, db) = layers::dense_backward(n, *inputs, *outputs, input, &p[0], &d);
                    grads[li] = vec![dw, db];
                    dx
                }
                _ => unreachable!("cache recorded for every layer"),
            };
        }
        (d, Gradients { layers: grads })
    }

    /// Mean cross-entropy over a batch, with gradients.
    pub(crate) fn batch_gradients(&self, x: &[T], labels: &[usize], mode: Mode) -> BatchOutput<T> {
        let n = labels.len();
        let classes = self.class_count();
        let (logits, caches) = self.forward_layers(x, n, self.spec.layers.len(), mode, true);
        let mut loss = 0.0;
        let mut dlogits = vec![T::ZERO; n * classes];
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = logits[i * classes..(i + 1) * classes].iter().map(|v| v.to_f64()).collect();
            let logp = log_softmax(&z);
            loss -= logp[y];
            for (j, lp) in logp.iter().enumerate() {
                let target = if j == y { 1.0 } else { 0.0 };
                dlogits[i * classes + j] = T::from_f64((lp.exp() - target) / n as f64);
            }
        }
        let bn_stats = caches
            .iter()
            .enumerate()
            .filter_map(|(li, c)| match c {
                LayerCache::Bn(BnCache {
                    batch_stats: Some((m, v)),
                    ..
                }) => Some((li, m.clone(), v.clone())),
                _ => None,
            })
            .collect();
        let (input_grad, grads) = self.backward(n, &caches, dlogits);
        BatchOutput {
            loss: loss / n as f64,
            grads,
            input_grad,
            bn_stats,
        }
    }

    /// Mean cross-entropy of a batch (`N×C×H×W`) against `labels`.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<f64> {
        let n = self.check_batch(images)?;
        self.check_labels(labels, n)?;
        let classes = self.class_count();
        let (logits, _) = self.forward_layers(images.data(), n, self.spec.layers.len(), mode, false);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = logits[i * classes..(i + 1) * classes].iter().map(|v| v.to_f64()).collect();
            loss -= log_softmax(&z)[y];
        }
        Ok(loss / n as f64)
    }

    /// Parameter gradients of [`Network::loss`].
    pub fn parameter_gradients(&self, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<Gradients<T>> {
        let n = self.check_batch(images)?;
        self.check_labels(labels, n)?;
        Ok(self.batch_gradients(images.data(), labels, mode).grads)
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::InvalidInput(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.class_count()) {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        Ok(())
    }

    /// Gradient of the cross-entropy loss with respect to the input pixels,
    /// with batch norm in inference mode.
    pub fn input_gradient(&self, image: &Tensor<T>, true_label: usize) -> Result<Tensor<T>> {
        self.check_image(image)?;
        self.check_labels(&[true_label], 1)?;
        let out = self.batch_gradients(image.data(), &[true_label], Mode::Inference);
        Ok(Tensor::from_parts(image.shape().to_vec(), out.input_grad))
    }

    /// Dense layer and softmax applied to a pooled vector, in `f64`.
    pub fn head(&self, pooled: &[f64]) -> Vec<f64> {
        let (w, b) = self.dense_weights();
        let n = pooled.len();
        b.iter()
            .enumerate()
            .map(|(c, bias)| {
                bias.to_f64()
                    + w[c * n..(c + 1) * n]
                        .iter()
                        .zip(pooled)
                        .map(|(wk, pk)| wk.to_f64() * pk)
                        .sum::<f64>()
            })
            .collect()
    }

    fn traces_from_maps(&self, maps: Vec<T>, n: usize) -> Result<Vec<ForwardTrace>> {
        let [k, hf, wf] = self.shapes[self.spec.gap_index() - 1];
        let per = k * hf * wf;
        let mut traces = Vec::with_capacity(n);
        for i in 0..n {
            let data: Vec<f64> = maps[i * per..(i + 1) * per].iter().map(|v| v.to_f64()).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("forward pass produced non-finite activations".into()));
            }
            let pooled: Vec<f64> = (0..k)
                .map(|j| data[j * hf * wf..(j + 1) * hf * wf].iter().sum::<f64>() / (hf * wf) as f64)
                .collect();
            let logits = self.head(&pooled);
            let probabilities = softmax(&logits);
            let predicted_label = argmax(&probabilities);
            traces.push(ForwardTrace {
                last_conv_maps: Tensor::from_parts(vec![k, hf, wf], data),
                pooled,
                logits,
                probabilities,
                predicted_label,
            });
        }
        Ok(traces)
    }

    /// Inference on one `C×H×W` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let (maps, _) = self.forward_layers(image.data(), 1, self.spec.gap_index(), Mode::Inference, false);
        Ok(self.traces_from_maps(maps, 1)?.remove(0))
    }

    /// Inference on an `N×C×H×W` batch. Each trace is identical to what
    /// [`Network::forward`] returns for that image alone.
    pub fn forward_batch(&self, images: &Tensor<T>) -> Result<Vec<ForwardTrace>> {
        let n = self.check_batch(images)?;
        let (maps, _) = self.forward_layers(images.data(), n, self.spec.gap_index(), Mode::Inference, false);
        self.traces_from_maps(maps, n)
    }

    /// ReLU on/off pattern and max-pool winners for a batch. Two inputs with
    /// equal patterns lie in the same linear region of the network.
    #[doc(hidden)]
    pub fn activation_pattern(&self, images: &Tensor<T>, mode: Mode) -> Result<Vec<u32>> {
        let n = self.check_batch(images)?;
        let (_, caches) = self.forward_layers(images.data(), n, self.spec.layers.len(), mode, true);
        let mut pattern = Vec::new();
        for c in &caches {
            match c {
                LayerCache::Relu { out } => pattern.extend(out.iter().map(|&v| (v > T::ZERO) as u32)),
                LayerCache::MaxPool { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        Ok(pattern)
    }
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
}
