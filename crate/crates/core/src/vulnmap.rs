//! Vulnerability maps by region substitution.
//!
//! For every position of a stride-`s` lattice, a `2k×2k` window of the benign
//! image (clamped to the image) is overwritten with the adversarial pixels
//! and the model re-evaluated. `b_map` records how the benign-label value
//! changes (`y'_b − y_b`) and `a_map` how the adversarial-label value
//! changes in reverse (`y_a − y'_a`). Values are stored as `f32`, the same
//! precision as the on-disk cache.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::nn::{ForwardTrace, Network};
use crate::rf::RfMask;
use crate::tensor::Tensor;
use crate::workspace::{InstancePair, Side};

pub const DEFAULT_TOP_FRACTION: f64 = 0.2;
pub const CACHE_MAGIC: &[u8; 6] = b"VMAP1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    Probability,
    Logit,
}

impl ValueSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Probability => "probability",
            Self::Logit => "logit",
        }
    }

    fn value(self, trace: &ForwardTrace, class: usize) -> f64 {
        match self {
            Self::Probability => trace.probabilities[class],
            Self::Logit => trace.logits[class],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VulnParams {
    /// Window half-size.
    pub k: usize,
    /// Lattice stride.
    pub s: usize,
    pub value_space: ValueSpace,
}

impl Default for VulnParams {
    fn default() -> Self {
        Self {
            k: 2,
            s: 1,
            value_space: ValueSpace::Probability,
        }
    }
}

impl VulnParams {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.k == 0 {
            return Err(invalid_param("k", "must be at least 1"));
        }
        if self.s == 0 || self.s > h.min(w) {
            return Err(invalid_param("s", "must lie in [1, min(w, h)]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VulnerabilityMap {
    pub params: VulnParams,
    pub pair_id: usize,
    pub benign_label: usize,
    pub adversarial_label: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Lattice rows and columns: `ceil(h / s)` and `ceil(w / s)`.
    pub rows: usize,
    pub cols: usize,
    pub b_map: Vec<f32>,
    pub a_map: Vec<f32>,
}

impl VulnerabilityMap {
    pub fn grid(&self, side: Side) -> &[f32] {
        match side {
            Side::Benign => &self.b_map,
            Side::Adv => &self.a_map,
        }
    }

    pub fn at(&self, side: Side, row: usize, col: usize) -> f32 {
        self.grid(side)[row * self.cols + col]
    }
}

/// Half-open window `[c − k, c + k)` clamped to `[0, len)`.
pub fn window(center: usize, k: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(k), (center + k).min(len))
}

/// Copy of `benign` with the window around `(row, col)` taken from `adversarial`.
pub fn substitute(benign: &Tensor<f32>, adversarial: &Tensor<f32>, row: usize, col: usize, k: usize) -> Tensor<f32> {
    let [c, h, w] = [benign.shape()[0], benign.shape()[1], benign.shape()[2]];
    let (r0, r1) = window(row, k, h);
    let (c0, c1) = window(col, k, w);
    let mut out = benign.clone();
    let src = adversarial.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in r0..r1 {
            let base = ch * h * w + y * w;
            dst[base + c0..base + c1].copy_from_slice(&src[base + c0..base + c1]);
        }
    }
    out
}

const CHUNK: usize = 16;

/// Computes both maps. `progress` counts finished lattice positions.
pub fn vulnerability_maps_with_progress(
    net: &Network<f32>,
    pair: &InstancePair,
    params: VulnParams,
    progress: Option<&AtomicUsize>,
) -> Result<VulnerabilityMap> {
    let shape = pair.benign.shape();
    if shape.len() != 3 || pair.adversarial.shape() != shape {
        return Err(Error::InvalidInput("pair images must share a C×H×W shape".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    params.validate(h, w)?;
    let base = net.forward(&pair.benign)?;
    let (yb, ya) = (pair.label, pair.adversarial_label);
    let space = params.value_space;
    let base_b = space.value(&base, yb);
    let base_a = space.value(&base, ya);

    let positions: Vec<(usize, usize)> = (0..h)
        .step_by(params.s)
        .flat_map(|r| (0..w).step_by(params.s).map(move |col| (r, col)))
        .collect();
    let rows = h.div_ceil(params.s);
    let cols = w.div_ceil(params.s);
    let per = c * h * w;

    let chunks: Vec<Vec<(f32, f32)>> = positions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut batch = Vec::with_capacity(chunk.len() * per);
            for &(r, col) in chunk {
                batch.extend_from_slice(substitute(&pair.benign, &pair.adversarial, r, col, params.k).data());
            }
            let traces = net.forward_batch(&Tensor::new(vec![chunk.len(), c, h, w], batch)?)?;
            if let Some(p) = progress {
                p.fetch_add(chunk.len(), Ordering::Relaxed);
            }
            Ok(traces
                .iter()
                .map(|t| {
                    (
                        (space.value(t, yb) - base_b) as f32,
                        (base_a - space.value(t, ya)) as f32,
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let (b_map, a_map) = chunks.into_iter().flatten().unzip();
    Ok(VulnerabilityMap {
        params,
        pair_id: pair.id,
        benign_label: yb,
        adversarial_label: ya,
        image_h: h,
        image_w: w,
        rows,
        cols,
        b_map,
        a_map,
    })
}

pub fn vulnerability_maps(net: &Network<f32>, pair: &InstancePair, params: VulnParams) -> Result<VulnerabilityMap> {
    vulnerability_maps_with_progress(net, pair, params, None)
}

/// Nonnegative full-resolution score, larger meaning more vulnerable:
/// `max(−map, 0)` spread to each pixel from its nearest lattice point.
pub fn vulnerability_score(map: &VulnerabilityMap, side: Side) -> Vec<f64> {
    let grid = map.grid(side);
    let s = map.params.s;
    let mut out = Vec::with_capacity(map.image_h * map.image_w);
    for y in 0..map.image_h {
        let r = ((y + s / 2) / s).min(map.rows - 1);
        for x in 0..map.image_w {
            let col = ((x + s / 2) / s).min(map.cols - 1);
            out.push((-(grid[r * map.cols + col] as f64)).max(0.0));
        }
    }
    out
}

/// Marks the `round(q·N)` highest scores (at least one); ties go to the
/// earlier pixel in row-major order.
pub fn binarize_top_q(scores: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid_param("q", "must lie in (0, 1]"));
    }
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let count = ((q * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..count] {
        bits[i] = true;
    }
    Ok(bits)
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(neuron, IoU)` sorted by decreasing IoU, ties to the smaller neuron id.
pub fn rank_neurons_by_iou(masks: &[RfMask], binarized: &[bool]) -> Result<Vec<(usize, f64)>> {
    if masks.iter().any(|m| m.bits.len() != binarized.len()) {
        return Err(invalid_param("rf_size", "RF masks must match the image resolution"));
    }
    let mut ranked: Vec<(usize, f64)> = masks.iter().enumerate().map(|(k, m)| (k, iou(&m.bits, binarized))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

pub fn cache_file_name(pair: usize, params: &VulnParams) -> String {
    format!("vuln_{pair}_{}_{}_{}.bin", params.k, params.s, params.value_space.as_str())
}

/// Cache encoding: magic, ten little-endian `u32` header fields (pair, k, s,
/// value space, rows, cols, height, width, benign label, adversarial
/// label), then `b_map` and `a_map` as little-endian `f32`.
pub fn map_to_bytes(map: &VulnerabilityMap) -> Vec<u8> {
    let space = match map.params.value_space {
        ValueSpace::Probability => 0u32,
        ValueSpace::Logit => 1,
    };
    let header = [
        map.pair_id as u32,
        map.params.k as u32,
        map.params.s as u32,
        space,
        map.rows as u32,
        map.cols as u32,
        map.image_h as u32,
        map.image_w as u32,
        map.benign_label as u32,
        map.adversarial_label as u32,
    ];
    let mut out = Vec::with_capacity(6 + 40 + 8 * map.b_map.len());
    out.extend_from_slice(CACHE_MAGIC);
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.b_map.iter().chain(&map.a_map) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<VulnerabilityMap> {
    let bad = |m: &str| Error::Format(format!("vulnerability cache: {m}"));
    if bytes.len() < 46 || &bytes[..6] != CACHE_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let value_space = match field(3) {
        0 => ValueSpace::Probability,
        1 => ValueSpace::Logit,
        _ => return Err(bad("unknown value space")),
    };
    let (rows, cols) = (field(4), field(5));
    let body = &bytes[46..];
    if body.len() != rows * cols * 8 {
        return Err(bad("grid length does not match the header"));
    }
    let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let (b, a) = floats.split_at(rows * cols);
    Ok(VulnerabilityMap {
        params: VulnParams {
            k: field(1),
            s: field(2),
            value_space,
        },
        pair_id: field(0),
        benign_label: field(8),
        adversarial_label: field(9),
        image_h: field(6),
        image_w: field(7),
        rows,
        cols,
        b_map: b.to_vec(),
        a_map: a.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_clamp() {
        assert_eq!(window(0, 2, 32), (0, 2));
        assert_eq!(window(5, 2, 32), (3, 7));
        assert_eq!(window(31, 2, 32), (29, 32));
        assert_eq!(window(3, 40, 32), (0, 32));
    }

    #[test]
    fn substitution_touches_only_the_window() {
        let b = Tensor::new(vec![3, 4, 4], vec![0.0; 48]).unwrap();
        let a = Tensor::new(vec![3, 4, 4], vec![1.0; 48]).unwrap();
        let s = substitute(&b, &a, 0, 3, 1);
        let ones: Vec<usize> = (0..48).filter(|&i| s.data()[i] == 1.0).collect();
        assert_eq!(ones, vec![2, 3, 18, 19, 34, 35]);
    }

    #[test]
    fn top_q() {
        assert!(binarize_top_q(&[1.0, 2.0], 1.0).unwrap().iter().all(|&b| b));
        assert_eq!(binarize_top_q(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap(), vec![true, true, false, false]);
        assert_eq!(binarize_top_q(&[0.0; 5], 0.4).unwrap(), vec![true, true, false, false, false]);
        assert_eq!(binarize_top_q(&[0.0; 5], 0.01).unwrap().iter().filter(|&&b| b).count(), 1);
        assert!(binarize_top_q(&[1.0], 0.0).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]), 0.0);
        let mut small = vec![false; 40];
        small[..10].iter_mut().for_each(|b| *b = true);
        assert_eq!(iou(&small, &[true; 40]), 0.25);
    }

    #[test]
    fn score_upsampling() {
        let map = VulnerabilityMap {
            params: VulnParams { k: 1, s: 2, value_space: ValueSpace::Probability },
            pair_id: 0,
            benign_label: 0,
            adversarial_label: 1,
            image_h: 3,
            image_w: 3,
            rows: 2,
            cols: 2,
            b_map: vec![-0.5, 0.25, 0.0, -1.0],
            a_map: vec![0.0; 4],
        };
        assert_eq!(
            vulnerability_score(&map, Side::Benign),
            vec![0.5, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
        assert!(vulnerability_score(&map, Side::Adv).iter().all(|&v| v == 0.0));
        let back = map_from_bytes(&map_to_bytes(&map)).unwrap();
        assert_eq!(back, map);
        let mut bytes = map_to_bytes(&map);
        bytes.pop();
        assert!(map_from_bytes(&bytes).is_err());
        assert_eq!(cache_file_name(7, &map.params), "vuln_7_1_2_probability.bin");
    }

    #[test]
    fn iou_ranking() {
        let mask = |bits: Vec<bool>| RfMask { size: 2, dead: !bits.contains(&true), bits, threshold: 0.5 };
        let target = vec![true, true, false, false];
        let masks = vec![mask(vec![false; 4]), mask(vec![true, false, false, false]), mask(target.clone())];
        let ranked = rank_neurons_by_iou(&masks, &target).unwrap();
        assert_eq!(ranked, vec![(2, 1.0), (1, 0.5), (0, 0.0)]);
    }
}
