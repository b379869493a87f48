//! The instance store: benign/adversarial pairs of one attack run, the
//! prediction matrix, pair sorting and the run archive on disk.
//!
//! A run directory holds `manifest.json` and `images.bin`. The blob stores
//! every benign image followed by every adversarial image, each as
//! little-endian `f32` in `C×H×W` order, in pair-id order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::tensor::Tensor;

/// A correctly classified image and its successful adversarial counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePair {
    pub id: usize,
    /// Position of the benign image in the attacked dataset.
    pub source_index: usize,
    /// True (and benign) label.
    pub label: usize,
    pub adversarial_label: usize,
    pub benign_probabilities: Vec<f64>,
    pub adversarial_probabilities: Vec<f64>,
    pub perturbation_l2: f64,
    pub benign: Tensor<f32>,
    pub adversarial: Tensor<f32>,
}

impl InstancePair {
    pub fn benign_confidence(&self) -> f64 {
        self.benign_probabilities[self.label]
    }

    pub fn adversarial_confidence(&self) -> f64 {
        self.adversarial_probabilities[self.adversarial_label]
    }

    /// Checks the pair's internal consistency against the attack budget.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("pair {}: {m}", self.id)));
        if self.benign_probabilities.len() != self.adversarial_probabilities.len() {
            return bad("probability vectors differ in length".into());
        }
        let classes = self.benign_probabilities.len();
        if self.label >= classes || self.adversarial_label >= classes {
            return bad("label out of range".into());
        }
        if argmax(&self.benign_probabilities) != self.label {
            return bad("benign probabilities do not peak at the label".into());
        }
        if argmax(&self.adversarial_probabilities) != self.adversarial_label {
            return bad("adversarial probabilities do not peak at the adversarial label".into());
        }
        if self.label == self.adversarial_label {
            return bad("adversarial label equals the benign label".into());
        }
        if self.benign.shape() != self.adversarial.shape() {
            return bad("image shapes differ".into());
        }
        let l2 = self.benign.l2_distance(&self.adversarial);
        if (l2 - self.perturbation_l2).abs() > 1e-5 {
            return bad(format!("recorded L2 {} but images differ by {l2}", self.perturbation_l2));
        }
        if self.benign.linf_distance(&self.adversarial) > epsilon + 1e-6 {
            return bad("perturbation exceeds the attack budget".into());
        }
        Ok(())
    }
}

/// One of the two images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Benign,
    Adv,
}

impl Side {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "benign" => Some(Self::Benign),
            "adv" | "adversarial" => Some(Self::Adv),
            _ => None,
        }
    }

    pub fn image(self, pair: &InstancePair) -> &Tensor<f32> {
        match self {
            Self::Benign => &pair.benign,
            Self::Adv => &pair.adversarial,
        }
    }
}

/// Counts of successful attacks by `(true label, adversarial label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl PredictionMatrix {
    pub fn build<'a>(pairs: impl IntoIterator<Item = &'a InstancePair>, classes: usize) -> Self {
        let mut counts = vec![vec![0; classes]; classes];
        for p in pairs {
            counts[p.label][p.adversarial_label] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Ids of the pairs falling into matrix cell `(true_label, adversarial_label)`.
pub fn cell_pairs<'a>(
    pairs: impl IntoIterator<Item = &'a InstancePair>,
    true_label: usize,
    adversarial_label: usize,
) -> Vec<usize> {
    pairs
        .into_iter()
        .filter(|p| p.label == true_label && p.adversarial_label == adversarial_label)
        .map(|p| p.id)
        .collect()
}

/// Orderings for the image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortMeasure {
    /// Increasing perturbation magnitude.
    L2Asc,
    /// Decreasing perturbation magnitude.
    L2Desc,
    /// Decreasing probability of the benign label on the benign image.
    BenignDesc,
    /// Increasing probability of the adversarial label on the adversarial image.
    AdvAsc,
}

impl SortMeasure {
    pub const ALL: [SortMeasure; 4] = [
        SortMeasure::L2Asc,
        SortMeasure::L2Desc,
        SortMeasure::BenignDesc,
        SortMeasure::AdvAsc,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2_asc" => Some(Self::L2Asc),
            "l2_desc" => Some(Self::L2Desc),
            "benign_desc" => Some(Self::BenignDesc),
            "adv_asc" => Some(Self::AdvAsc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L2Asc => "l2_asc",
            Self::L2Desc => "l2_desc",
            Self::BenignDesc => "benign_desc",
            Self::AdvAsc => "adv_asc",
        }
    }
}

/// Pair ids in the requested order; ties go to the smaller id.
pub fn sort_pairs<'a>(pairs: impl IntoIterator<Item = &'a InstancePair>, measure: SortMeasure) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = pairs
        .into_iter()
        .map(|p| {
            let key = match measure {
                SortMeasure::L2Asc => p.perturbation_l2,
                SortMeasure::L2Desc => -p.perturbation_l2,
                SortMeasure::BenignDesc => -p.benign_confidence(),
                SortMeasure::AdvAsc => p.adversarial_confidence(),
            };
            (key, p.id)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    pub source_index: usize,
    pub y: usize,
    pub adv_label: usize,
    pub p_benign: Vec<f64>,
    pub p_adv: Vec<f64>,
    pub l2: f64,
}

/// Everything needed to reproduce an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_path: String,
    pub data_path: String,
    /// The attacked images are every `holdout_every`-th image of the dataset.
    pub holdout_every: usize,
    pub attack: AttackConfig,
    pub class_names: Vec<String>,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub pairs: Vec<PairRecord>,
}

/// A loaded attack run.
#[derive(Debug, Clone)]
pub struct Run {
    pub manifest: RunManifest,
    pub pairs: Vec<InstancePair>,
}

impl Run {
    pub fn new(
        model_path: String,
        data_path: String,
        holdout_every: usize,
        attack: AttackConfig,
        class_names: Vec<String>,
        image_shape: [usize; 3],
        pairs: Vec<InstancePair>,
    ) -> Self {
        let records = pairs
            .iter()
            .map(|p| PairRecord {
                id: p.id,
                source_index: p.source_index,
                y: p.label,
                adv_label: p.adversarial_label,
                p_benign: p.benign_probabilities.clone(),
                p_adv: p.adversarial_probabilities.clone(),
                l2: p.perturbation_l2,
            })
            .collect();
        Self {
            manifest: RunManifest {
                model_path,
                data_path,
                holdout_every,
                attack,
                class_names,
                image_shape,
                pairs: records,
            },
            pairs,
        }
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn pair(&self, id: usize) -> Result<&InstancePair> {
        self.pairs.get(id).ok_or(Error::NotFound { what: "pair", id })
    }

    pub fn prediction_matrix(&self) -> PredictionMatrix {
        PredictionMatrix::build(&self.pairs, self.class_count())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let per: usize = self.manifest.image_shape.iter().product();
        let mut blob = Vec::with_capacity(self.pairs.len() * per * 8);
        for p in &self.pairs {
            for v in p.benign.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        for p in &self.pairs {
            for v in p.adversarial.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::write(dir.join("images.bin"), blob)?;
        Ok(())
    }

    /// Loads a run and re-validates every pair against its images.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: RunManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
        let blob = fs::read(dir.join("images.bin"))?;
        let per: usize = manifest.image_shape.iter().product();
        let n = manifest.pairs.len();
        if blob.len() != n * per * 2 * 4 {
            return Err(Error::Format(format!(
                "images.bin holds {} bytes, expected {} for {n} pairs",
                blob.len(),
                n * per * 8
            )));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let classes = manifest.class_names.len();
        let mut pairs = Vec::with_capacity(n);
        for (i, r) in manifest.pairs.iter().enumerate() {
            if r.id != i {
                return Err(Error::Format(format!("pair ids must be 0..{n} in order")));
            }
            if r.p_benign.len() != classes || r.p_adv.len() != classes {
                return Err(Error::Format(format!("pair {i}: probability vectors need {classes} entries")));
            }
            let shape = manifest.image_shape.to_vec();
            let benign = Tensor::new(shape.clone(), floats[i * per..(i + 1) * per].to_vec())?;
            let adversarial = Tensor::new(shape, floats[(n + i) * per..(n + i + 1) * per].to_vec())?;
            let pair = InstancePair {
                id: r.id,
                source_index: r.source_index,
                label: r.y,
                adversarial_label: r.adv_label,
                benign_probabilities: r.p_benign.clone(),
                adversarial_probabilities: r.p_adv.clone(),
                perturbation_l2: r.l2,
                benign,
                adversarial,
            };
            pair.validate(manifest.attack.epsilon)?;
            pairs.push(pair);
        }
        Ok(Self { manifest, pairs })
    }
}
