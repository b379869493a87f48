use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    /// Shapes of the parameter tensors in serialization order.
    ///
    /// Conv: weight `O×I×K×K`, bias `O`. BatchNorm: gamma, beta, running
    /// mean, running variance. Dense: weight `outputs×inputs`, bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels]; 4],
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::GlobalAvgPool => vec![],
        }
    }

    /// Number of leading parameter tensors that receive gradients.
    pub fn trainable_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. } | LayerSpec::Dense { .. } => 2,
            _ => 0,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Architecture of a sequential classifier: conv blocks, one global average
/// pool, one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[height, width, channels]`.
    pub input: [usize; 3],
    pub class_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

/// Channel-major activation shape `[C, H, W]`.
pub type ActShape = [usize; 3];

impl ModelSpec {
    /// Reference architecture: three conv/BN/ReLU blocks (16, 32, 64
    /// filters), max-pooling after the first two, then global average
    /// pooling and a dense classifier over 64 neurons.
    pub fn mini_net(class_names: Vec<String>) -> Self {
        Self::mini_net_sized(32, class_names)
    }

    pub fn mini_net_sized(image_size: usize, class_names: Vec<String>) -> Self {
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let bn = |c| LayerSpec::BatchNorm {
            channels: c,
            eps: 1e-5,
            momentum: 0.1,
        };
        let pool = LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        };
        let classes = class_names.len();
        Self {
            input: [image_size, image_size, 3],
            class_names,
            layers: vec![
                conv(3, 16),
                bn(16),
                LayerSpec::Relu,
                pool.clone(),
                conv(16, 32),
                bn(32),
                LayerSpec::Relu,
                pool,
                conv(32, 64),
                bn(64),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: classes,
                },
            ],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_chw(&self) -> ActShape {
        [self.input[2], self.input[0], self.input[1]]
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Index of the global-average-pool layer.
    pub fn gap_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::GlobalAvgPool))
            .expect("validated spec has a pooling layer")
    }

    /// Number of last-conv neurons (the dense layer's input width).
    pub fn neuron_count(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    /// Checks that layer shapes compose and the head is `… → pool → dense`.
    /// Returns the activation shape after every layer.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c != 3 {
            return bad(format!("input must be H×W×3 with positive extents, got {:?}", self.input));
        }
        if self.class_count() < 2 {
            return bad("at least two classes are required".into());
        }
        let n = self.layers.len();
        if n < 3 {
            return bad("model needs a conv block, a pooling layer and a dense layer".into());
        }
        let gaps: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::GlobalAvgPool))
            .map(|(i, _)| i)
            .collect();
        if gaps.len() != 1 {
            return bad(format!("expected exactly one global_avg_pool, found {}", gaps.len()));
        }
        let dense_count = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. }))
            .count();
        if dense_count != 1 || !matches!(self.layers[n - 1], LayerSpec::Dense { .. }) {
            return bad("the single dense layer must be the last layer".into());
        }
        if gaps[0] != n - 2 {
            return bad("global_avg_pool must immediately precede the dense layer".into());
        }
        if !matches!(
            self.layers[n - 3],
            LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. } | LayerSpec::Relu
        ) {
            return bad("global_avg_pool must follow the last conv/batch_norm/relu block".into());
        }

        let mut shape: ActShape = self.input_chw();
        let mut last_conv_channels = None;
        let mut shapes = Vec::with_capacity(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let [ch, hh, ww] = shape;
            shape = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if in_channels != ch {
                        return bad(format!("layer {i}: conv expects {in_channels} channels, got {ch}"));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return bad(format!("layer {i}: conv extents must be positive"));
                    }
                    if hh + 2 * pad < kernel || ww + 2 * pad < kernel {
                        return bad(format!("layer {i}: kernel larger than padded input"));
                    }
                    last_conv_channels = Some(out_channels);
                    [
                        out_channels,
                        (hh + 2 * pad - kernel) / stride + 1,
                        (ww + 2 * pad - kernel) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm { channels, eps, momentum } => {
                    if channels != ch {
                        return bad(format!("layer {i}: batch_norm expects {channels} channels, got {ch}"));
                    }
                    if !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) {
                        return bad(format!("layer {i}: batch_norm eps/momentum out of range"));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 || hh < kernel || ww < kernel {
                        return bad(format!("layer {i}: max_pool window does not fit"));
                    }
                    [ch, (hh - kernel) / stride + 1, (ww - kernel) / stride + 1]
                }
                LayerSpec::GlobalAvgPool => [ch, 1, 1],
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != ch {
                        return bad(format!("layer {i}: dense expects {inputs} inputs, got {ch}"));
                    }
                    if Some(inputs) != last_conv_channels {
                        return bad("dense width must equal the last conv layer's channels".into());
                    }
                    if outputs != self.class_count() {
                        return bad(format!(
                            "dense produces {outputs} logits for {} classes",
                            self.class_count()
                        ));
                    }
                    [outputs, 1, 1]
                }
            };
            if i < gaps[0] && matches!(layer, LayerSpec::Dense { .. }) {
                return bad(format!("layer {i}: {} before pooling", layer.name()));
            }
            shapes.push(shape);
        }
        if last_conv_channels.is_none() {
            return bad("model has no conv layer".into());
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn mini_net_shapes() {
        let spec = ModelSpec::mini_net(names(4));
        let shapes = spec.validate().unwrap();
        let gap = spec.gap_index();
        assert_eq!(shapes[gap - 1], [64, 8, 8]);
        assert_eq!(shapes[gap], [64, 1, 1]);
        assert_eq!(*shapes.last().unwrap(), [4, 1, 1]);
        assert_eq!(spec.neuron_count(), 64);
    }

    /// A 224×224 input through a VGG-style trunk lands on 512 maps of 14×14
    /// and a 512-wide pooled vector.
    #[test]
    fn reference_pipeline_shapes() {
        let mut layers = Vec::new();
        let mut ch = 3;
        for (i, out) in [64, 128, 256, 512].into_iter().enumerate() {
            layers.push(LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: out,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::Relu);
            if i < 4 {
                layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            }
            ch = out;
        }
        layers.push(LayerSpec::Conv2d {
            in_channels: 512,
            out_channels: 512,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense { inputs: 512, outputs: 10 });
        let spec = ModelSpec {
            input: [224, 224, 3],
            class_names: names(10),
            layers,
        };
        let shapes = spec.validate().unwrap();
        let gap = spec.gap_index();
        assert_eq!(shapes[gap - 1], [512, 14, 14]);
        assert_eq!(shapes[gap], [512, 1, 1]);
    }

    #[test]
    fn rejects_broken_heads() {
        let mut spec = ModelSpec::mini_net(names(4));
        spec.layers.swap(10, 11);
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mini_net(names(4));
        spec.layers.insert(11, LayerSpec::MaxPool { kernel: 2, stride: 2 });
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mini_net(names(4));
        spec.class_names.push("extra".into());
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mini_net(names(4));
        if let LayerSpec::Conv2d { in_channels, .. } = &mut spec.layers[4] {
            *in_channels = 8;
        }
        assert!(spec.validate().is_err());
    }
}
