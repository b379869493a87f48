//! Receptive fields of last-conv neurons: the input image and a feature map
//! are both resized to the RF size, the map is thresholded relative to its
//! maximum, and the mask is applied to the resized image.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::nn::ForwardTrace;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CONTEXT_COUNT: usize = 6;

/// Bilinear resize of a `channels×h×w` array with half-pixel centres. Equal
/// sizes give the identity.
pub fn resize_bilinear(src: &[f64], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Run lengths alternating between zeros and ones, starting with zeros (so
/// a mask that begins with a one starts with a zero-length run).
pub fn rle(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Binary `size×size` mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RfMask {
    pub size: usize,
    pub bits: Vec<bool>,
    pub threshold: f64,
    /// The feature map had no positive activation.
    pub dead: bool,
}

impl RfMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &RfMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn rle(&self) -> Vec<usize> {
        rle(&self.bits)
    }

    pub fn from_rle(size: usize, runs: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(size * size);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        if bits.len() != size * size {
            return Err(Error::Format(format!("run lengths cover {} cells, expected {}", bits.len(), size * size)));
        }
        let dead = !bits.iter().any(|&b| b);
        Ok(Self { size, bits, threshold: 0.0, dead })
    }
}

/// `3×size×size` image, zero outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RfImage {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl RfImage {
    pub fn squared_distance(&self, other: &RfImage) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// An input image resized once to the RF size, reused across neurons.
#[derive(Debug, Clone)]
pub struct RfCanvas {
    size: usize,
    resized: Vec<f64>,
}

impl RfCanvas {
    pub fn new(image: &Tensor<f32>, rf_size: usize) -> Result<Self> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::InvalidInput(format!("expected a C×H×W image, got shape {:?}", image.shape())));
        };
        if rf_size == 0 {
            return Err(invalid_param("rf_size", "must be positive"));
        }
        let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
        Ok(Self {
            size: rf_size,
            resized: resize_bilinear(&src, c, h, w, rf_size, rf_size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn resized(&self) -> &[f64] {
        &self.resized
    }

    /// Mask of neuron `k`: resized map (negatives clamped to zero) at or
    /// above `threshold · max`.
    pub fn mask(&self, trace: &ForwardTrace, k: usize, threshold: f64) -> Result<RfMask> {
        check_threshold(threshold)?;
        if k >= trace.neuron_count() {
            return Err(Error::NotFound { what: "neuron", id: k });
        }
        let (hf, wf) = trace.map_size();
        if self.size < hf.max(wf) {
            return Err(invalid_param("rf_size", "must be at least the feature-map size"));
        }
        let map = resize_bilinear(trace.map(k), 1, hf, wf, self.size, self.size);
        let max = map.iter().fold(0.0f64, |m, &v| m.max(v));
        if max <= 0.0 {
            return Ok(RfMask {
                size: self.size,
                bits: vec![false; self.size * self.size],
                threshold,
                dead: true,
            });
        }
        let cut = threshold * max;
        Ok(RfMask {
            size: self.size,
            bits: map.iter().map(|&v| v.max(0.0) >= cut).collect(),
            threshold,
            dead: false,
        })
    }

    pub fn apply(&self, mask: &RfMask) -> Result<RfImage> {
        if mask.size != self.size {
            return Err(invalid_param("rf_size", "mask and image sizes differ"));
        }
        let plane = self.size * self.size;
        let pixels = self
            .resized
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.bits[i % plane] { v } else { 0.0 })
            .collect();
        Ok(RfImage { size: self.size, pixels })
    }

    pub fn receptive_field(&self, trace: &ForwardTrace, k: usize, threshold: f64) -> Result<(RfMask, RfImage)> {
        let mask = self.mask(trace, k, threshold)?;
        let image = self.apply(&mask)?;
        Ok((mask, image))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(invalid_param("t", "must lie in (0, 1]"))
    }
}

/// RF of neuron `k` for `image`, whose trace is `trace`.
pub fn receptive_field(
    trace: &ForwardTrace,
    k: usize,
    image: &Tensor<f32>,
    rf_size: usize,
    threshold: f64,
) -> Result<(RfMask, RfImage)> {
    RfCanvas::new(image, rf_size)?.receptive_field(trace, k, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOp {
    Union,
    Intersection,
}

fn combine(masks: &[RfMask], op: MaskOp) -> Result<RfMask> {
    let first = masks.first().ok_or_else(|| invalid_param("masks", "at least one mask is required"))?;
    if masks.iter().any(|m| m.size != first.size) {
        return Err(invalid_param("masks", "masks differ in size"));
    }
    let bits: Vec<bool> = (0..first.bits.len())
        .map(|i| match op {
            MaskOp::Union => masks.iter().any(|m| m.bits[i]),
            MaskOp::Intersection => masks.iter().all(|m| m.bits[i]),
        })
        .collect();
    let dead = !bits.iter().any(|&b| b);
    Ok(RfMask {
        size: first.size,
        bits,
        threshold: first.threshold,
        dead,
    })
}

pub fn mask_union(masks: &[RfMask]) -> Result<RfMask> {
    combine(masks, MaskOp::Union)
}

pub fn mask_intersection(masks: &[RfMask]) -> Result<RfMask> {
    combine(masks, MaskOp::Intersection)
}

pub fn combine_masks(masks: &[RfMask], op: MaskOp) -> Result<RfMask> {
    combine(masks, op)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSort {
    /// Pooled activation of the neuron on the benign image.
    Activation,
    /// Probability of the true label on the benign image.
    Confidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextCandidate {
    pub pair_id: usize,
    pub activation: f64,
    pub confidence: f64,
}

/// The `m` candidates with the largest sort key, ties to the smaller pair id.
pub fn select_context(candidates: &[ContextCandidate], sort: ContextSort, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(invalid_param("m", "must be at least 1"));
    }
    let key = |c: &ContextCandidate| match sort {
        ContextSort::Activation => c.activation,
        ContextSort::Confidence => c.confidence,
    };
    let mut order: Vec<&ContextCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.pair_id.cmp(&b.pair_id)));
    Ok(order.into_iter().take(m).map(|c| c.pair_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with_maps(maps: Vec<f64>, n: usize, side: usize) -> ForwardTrace {
        let per = side * side;
        let pooled = (0..n).map(|k| maps[k * per..(k + 1) * per].iter().sum::<f64>() / per as f64).collect();
        ForwardTrace {
            last_conv_maps: Tensor::new(vec![n, side, side], maps).unwrap(),
            pooled,
            logits: vec![0.0, 0.0],
            probabilities: vec![0.5, 0.5],
            predicted_label: 0,
        }
    }

    fn image(size: usize) -> Tensor<f32> {
        Tensor::new(vec![3, size, size], (0..3 * size * size).map(|i| ((i * 7) % 11) as f32 / 10.0).collect()).unwrap()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f64> = (0..2 * 5 * 5).map(|i| i as f64 * 0.3).collect();
        assert_eq!(resize_bilinear(&src, 2, 5, 5, 5, 5), src);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = resize_bilinear(&[0.25; 9], 1, 3, 3, 7, 7);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn reference_pipeline_sizes() {
        let t = trace_with_maps((0..512 * 14 * 14).map(|i| (i % 13) as f64).collect(), 512, 14);
        let img = Tensor::new(vec![3, 224, 224], vec![0.5f32; 3 * 224 * 224]).unwrap();
        let (mask, rf) = receptive_field(&t, 3, &img, 120, 0.5).unwrap();
        assert_eq!(mask.bits.len(), 120 * 120);
        assert_eq!(rf.pixels.len(), 3 * 120 * 120);
    }

    #[test]
    fn tiny_threshold_keeps_everything() {
        let t = trace_with_maps((0..16).map(|i| 0.1 + i as f64).collect(), 1, 4);
        let img = image(8);
        let canvas = RfCanvas::new(&img, 8).unwrap();
        let (mask, rf) = canvas.receptive_field(&t, 0, 1e-9).unwrap();
        assert!(mask.bits.iter().all(|&b| b));
        assert_eq!(rf.pixels, canvas.resized());
    }

    #[test]
    fn constant_map_gives_full_mask_and_zero_map_is_dead() {
        let t = trace_with_maps([vec![2.0; 4], vec![0.0; 4]].concat(), 2, 2);
        let img = image(4);
        let (m0, _) = receptive_field(&t, 0, &img, 4, 1.0).unwrap();
        assert!(m0.bits.iter().all(|&b| b) && !m0.dead);
        let (m1, r1) = receptive_field(&t, 1, &img, 4, 0.5).unwrap();
        assert!(m1.dead && m1.count() == 0);
        assert!(r1.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rf_image_support_matches_mask() {
        let t = trace_with_maps(vec![0.0, 1.0, 3.0, 0.5], 1, 2);
        let img = image(6);
        let canvas = RfCanvas::new(&img, 6).unwrap();
        let (mask, rf) = canvas.receptive_field(&t, 0, 0.4).unwrap();
        for i in 0..rf.pixels.len() {
            let expected = if mask.bits[i % 36] { canvas.resized()[i] } else { 0.0 };
            assert_eq!(rf.pixels[i], expected);
        }
    }

    #[test]
    fn parameter_errors() {
        let t = trace_with_maps(vec![1.0; 4], 1, 2);
        let img = image(4);
        assert!(receptive_field(&t, 0, &img, 4, 0.0).is_err());
        assert!(receptive_field(&t, 0, &img, 4, 1.5).is_err());
        assert!(matches!(receptive_field(&t, 1, &img, 4, 0.5), Err(Error::NotFound { .. })));
        assert!(receptive_field(&t, 0, &img, 1, 0.5).is_err());
    }

    #[test]
    fn mask_algebra() {
        let a = RfMask { size: 2, bits: vec![true, false, true, false], threshold: 0.5, dead: false };
        let not_a = RfMask { bits: a.bits.iter().map(|b| !b).collect(), ..a.clone() };
        assert!(mask_union(&[a.clone(), not_a.clone()]).unwrap().bits.iter().all(|&b| b));
        assert!(mask_intersection(&[a.clone(), not_a]).unwrap().dead);
        assert_eq!(mask_union(std::slice::from_ref(&a)).unwrap().bits, a.bits);
        assert!(mask_union(&[]).is_err());
    }

    #[test]
    fn rle_round_trip() {
        let m = RfMask { size: 3, bits: vec![true, true, false, false, false, true, false, true, true], threshold: 0.5, dead: false };
        assert_eq!(m.rle(), vec![0, 2, 3, 1, 1, 2]);
        assert_eq!(RfMask::from_rle(3, &m.rle()).unwrap().bits, m.bits);
        assert!(RfMask::from_rle(3, &[1, 2]).is_err());
    }

    #[test]
    fn context_selection() {
        let c = |id, a, p| ContextCandidate { pair_id: id, activation: a, confidence: p };
        let cands = vec![c(4, 0.1, 0.9), c(2, 0.7, 0.5), c(3, 0.7, 0.95), c(9, 0.2, 0.6)];
        assert_eq!(select_context(&cands, ContextSort::Activation, 2).unwrap(), vec![2, 3]);
        assert_eq!(select_context(&cands, ContextSort::Confidence, 10).unwrap(), vec![3, 4, 9, 2]);
        assert!(select_context(&cands, ContextSort::Activation, 0).is_err());
    }
}
