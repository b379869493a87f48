//! Neuron-perturbation measures: activation×weight contributions, per-class
//! bands over those contributions, band gaps and single-neuron substitution.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid_param, Error, Result};
use crate::nn::{softmax, ForwardTrace, Network};
use crate::tensor::Scalar;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// `v[k] = pooled[k] · W[class][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionVector {
    pub class: usize,
    pub values: Vec<f64>,
}

pub fn contribution<T: Scalar>(net: &Network<T>, trace: &ForwardTrace, class: usize) -> Result<ContributionVector> {
    if class >= net.class_count() {
        return Err(Error::NotFound { what: "class", id: class });
    }
    let n = net.neuron_count();
    if trace.pooled.len() != n {
        return Err(Error::InvalidInput("trace does not come from this network".into()));
    }
    let (w, _) = net.dense_weights();
    let row = &w[class * n..(class + 1) * n];
    Ok(ContributionVector {
        class,
        values: trace.pooled.iter().zip(row).map(|(p, wk)| p * wk.to_f64()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Adversarial,
}

/// Per-neuron `mean ± z(γ)·σ` of the members' contributions, with σ the
/// population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBand {
    pub class: usize,
    pub role: Role,
    pub confidence: f64,
    pub members: usize,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Two-sided normal quantile: `z(0.95) ≈ 1.96`.
pub fn z_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(invalid_param("gamma", "must lie in (0, 1)"));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + confidence / 2.0))
}

pub fn class_band(members: &[ContributionVector], class: usize, role: Role, confidence: f64) -> Result<ClassBand> {
    let z = z_value(confidence)?;
    if members.len() < 2 {
        return Err(Error::InsufficientMembers {
            class,
            role: match role {
                Role::Benign => "benign",
                Role::Adversarial => "adversarial",
            },
            count: members.len(),
        });
    }
    if members.iter().any(|m| m.class != class) {
        return Err(Error::InvalidInput("band members were weighted by a different class".into()));
    }
    let n = members[0].values.len();
    let count = members.len() as f64;
    let mut mean = vec![0.0; n];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(&m.values) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; n];
    for m in members {
        for ((acc, v), mu) in var.iter_mut().zip(&m.values).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let half: Vec<f64> = var.iter().map(|v| z * (v / count).sqrt()).collect();
    Ok(ClassBand {
        class,
        role,
        confidence,
        members: members.len(),
        lower: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        upper: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
        mean,
    })
}

/// Signed separation of the adversarial band `(cl_a, cu_a)` from the benign
/// band `(cl_b, cu_b)`: negative when the adversarial band lies below,
/// positive when above, zero when they overlap.
pub fn band_gap(cl_a: f64, cu_a: f64, cl_b: f64, cu_b: f64) -> f64 {
    if cl_b > cu_a {
        cu_a - cl_b
    } else if cl_a > cu_b {
        cl_a - cu_b
    } else {
        0.0
    }
}

pub fn band_gaps(adversarial: &ClassBand, benign: &ClassBand) -> Vec<f64> {
    (0..adversarial.lower.len())
        .map(|k| band_gap(adversarial.lower[k], adversarial.upper[k], benign.lower[k], benign.upper[k]))
        .collect()
}

/// Neurons by decreasing signed gap, ties to the smaller id.
pub fn rank_by_gap(gaps: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[b].total_cmp(&gaps[a]).then(a.cmp(&b)));
    order
}

/// Change in the probabilities of `benign_label` and `adversarial_label`
/// when `pooled[k]` of the benign trace takes its adversarial value.
pub fn neuron_substitution_delta<T: Scalar>(
    net: &Network<T>,
    benign: &ForwardTrace,
    adversarial: &ForwardTrace,
    benign_label: usize,
    adversarial_label: usize,
    k: usize,
) -> Result<(f64, f64)> {
    if k >= benign.pooled.len() {
        return Err(Error::NotFound { what: "neuron", id: k });
    }
    let mut pooled = benign.pooled.clone();
    pooled[k] = adversarial.pooled[k];
    let p = softmax(&net.head(&pooled));
    Ok((
        p[benign_label] - benign.probabilities[benign_label],
        p[adversarial_label] - benign.probabilities[adversarial_label],
    ))
}
