//! A trained model and one attack run, with the traces of every pair kept
//! in memory. All per-pair analyses start here.

use std::sync::atomic::AtomicUsize;

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{agglomerate, neuron_distance_matrix, Dendrogram, Linkage};
use crate::error::{Error, Result};
use crate::measures::{
    band_gaps, class_band, contribution, neuron_substitution_delta, ClassBand, ContributionVector, Role,
};
use crate::nn::{ForwardTrace, Network};
use crate::projection::{project, ProjectionMethod, ProjectionResult};
use crate::rf::{combine_masks, select_context, ContextCandidate, ContextSort, MaskOp, RfCanvas, RfImage, RfMask};
use crate::vulnmap::{
    binarize_top_q, rank_neurons_by_iou, vulnerability_maps_with_progress, vulnerability_score, VulnParams,
    VulnerabilityMap,
};
use crate::workspace::{cell_pairs, InstancePair, Run, Side};

pub struct Workbench {
    net: Network<f32>,
    run: Run,
    benign: Vec<ForwardTrace>,
    adversarial: Vec<ForwardTrace>,
}

/// Per-neuron measures of one pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronEntry {
    pub id: usize,
    /// Benign contributions weighted by the benign label's row.
    pub curve_b: f64,
    /// Adversarial contributions weighted by the adversarial label's row.
    pub curve_a: f64,
    pub band_b: [f64; 2],
    pub band_a: [f64; 2],
    pub bg: f64,
    /// Probability changes of the benign and adversarial labels when this
    /// neuron alone takes its adversarial value.
    pub substitution_delta: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct ContextItem {
    pub pair_id: usize,
    pub activation: f64,
    pub confidence: f64,
    pub benign: (RfMask, RfImage),
    pub adversarial: (RfMask, RfImage),
}

impl Workbench {
    /// Re-runs both images of every pair and checks that the stored
    /// probabilities came from this model.
    pub fn new(net: Network<f32>, run: Run) -> Result<Self> {
        let [h, w, c] = net.spec().input;
        if run.manifest.image_shape != [c, h, w] {
            return Err(Error::InvalidModel(format!(
                "model input {:?} does not match run images {:?}",
                [c, h, w],
                run.manifest.image_shape
            )));
        }
        if net.class_count() != run.class_count() {
            return Err(Error::InvalidModel("model and run disagree on the number of classes".into()));
        }
        let traces: Vec<(ForwardTrace, ForwardTrace)> = run
            .pairs
            .par_iter()
            .map(|p| Ok((net.forward(&p.benign)?, net.forward(&p.adversarial)?)))
            .collect::<Result<_>>()?;
        for (p, (b, a)) in run.pairs.iter().zip(&traces) {
            let drift = p
                .benign_probabilities
                .iter()
                .zip(&b.probabilities)
                .chain(p.adversarial_probabilities.iter().zip(&a.probabilities))
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if drift > 1e-5 {
                return Err(Error::InvalidModel(format!(
                    "pair {} was not produced by this model (probabilities differ by {drift:.3e})",
                    p.id
                )));
            }
        }
        let (benign, adversarial) = traces.into_iter().unzip();
        Ok(Self {
            net,
            run,
            benign,
            adversarial,
        })
    }

    pub fn net(&self) -> &Network<f32> {
        &self.net
    }

    pub fn run(&self) -> &Run {
        &self.run
    }

    pub fn neuron_count(&self) -> usize {
        self.net.neuron_count()
    }

    /// RF masks are drawn at the input resolution.
    pub fn rf_size(&self) -> usize {
        self.run.manifest.image_shape[1]
    }

    pub fn pair(&self, id: usize) -> Result<&InstancePair> {
        self.run.pair(id)
    }

    pub fn trace(&self, id: usize, side: Side) -> Result<&ForwardTrace> {
        self.pair(id)?;
        Ok(match side {
            Side::Benign => &self.benign[id],
            Side::Adv => &self.adversarial[id],
        })
    }

    fn check_neuron(&self, k: usize) -> Result<()> {
        if k < self.neuron_count() {
            Ok(())
        } else {
            Err(Error::NotFound { what: "neuron", id: k })
        }
    }

    pub fn projection(&self, method: ProjectionMethod, seed: u64) -> Result<ProjectionResult> {
        let pooled = |ts: &[ForwardTrace]| ts.iter().map(|t| t.pooled.clone()).collect::<Vec<_>>();
        Ok(ProjectionResult {
            method,
            seed,
            benign: project(&pooled(&self.benign), method, seed)?,
            adversarial: project(&pooled(&self.adversarial), method, seed)?,
        })
    }

    /// Contributions of every member of a band: benign images whose label is
    /// `class`, or adversarial images whose adversarial label is `class`.
    pub fn band_members(&self, role: Role, class: usize) -> Result<Vec<ContributionVector>> {
        self.run
            .pairs
            .iter()
            .filter_map(|p| match role {
                Role::Benign if p.label == class => Some(&self.benign[p.id]),
                Role::Adversarial if p.adversarial_label == class => Some(&self.adversarial[p.id]),
                _ => None,
            })
            .map(|t| contribution(&self.net, t, class))
            .collect()
    }

    pub fn band(&self, role: Role, class: usize, confidence: f64) -> Result<ClassBand> {
        class_band(&self.band_members(role, class)?, class, role, confidence)
    }

    /// Neuron measures in neuron-id order.
    pub fn neuron_entries(&self, id: usize, confidence: f64) -> Result<Vec<NeuronEntry>> {
        let p = self.pair(id)?;
        let (bt, at) = (&self.benign[id], &self.adversarial[id]);
        let curve_b = contribution(&self.net, bt, p.label)?;
        let curve_a = contribution(&self.net, at, p.adversarial_label)?;
        let band_b = self.band(Role::Benign, p.label, confidence)?;
        let band_a = self.band(Role::Adversarial, p.adversarial_label, confidence)?;
        let gaps = band_gaps(&band_a, &band_b);
        (0..self.neuron_count())
            .map(|k| {
                let (db, da) = neuron_substitution_delta(&self.net, bt, at, p.label, p.adversarial_label, k)?;
                Ok(NeuronEntry {
                    id: k,
                    curve_b: curve_b.values[k],
                    curve_a: curve_a.values[k],
                    band_b: [band_b.lower[k], band_b.upper[k]],
                    band_a: [band_a.lower[k], band_a.upper[k]],
                    bg: gaps[k],
                    substitution_delta: [db, da],
                })
            })
            .collect()
    }

    pub fn canvas(&self, id: usize, side: Side) -> Result<RfCanvas> {
        RfCanvas::new(side.image(self.pair(id)?), self.rf_size())
    }

    pub fn receptive_field(&self, id: usize, k: usize, side: Side, threshold: f64) -> Result<(RfMask, RfImage)> {
        self.check_neuron(k)?;
        self.canvas(id, side)?.receptive_field(self.trace(id, side)?, k, threshold)
    }

    pub fn receptive_fields(&self, id: usize, side: Side, threshold: f64) -> Result<Vec<(RfMask, RfImage)>> {
        let canvas = self.canvas(id, side)?;
        let trace = self.trace(id, side)?;
        (0..self.neuron_count())
            .into_par_iter()
            .map(|k| canvas.receptive_field(trace, k, threshold))
            .collect()
    }

    /// Top-`m` pairs of the selected pair's matrix cell for neuron `k`,
    /// ranked on the benign images, with both RFs.
    pub fn context(&self, id: usize, k: usize, sort: ContextSort, m: usize, threshold: f64) -> Result<Vec<ContextItem>> {
        self.check_neuron(k)?;
        let p = self.pair(id)?;
        let candidates: Vec<ContextCandidate> = cell_pairs(&self.run.pairs, p.label, p.adversarial_label)
            .into_iter()
            .map(|j| ContextCandidate {
                pair_id: j,
                activation: self.benign[j].pooled[k],
                confidence: self.benign[j].probabilities[self.run.pairs[j].label],
            })
            .collect();
        let chosen = select_context(&candidates, sort, m)?;
        chosen
            .into_iter()
            .map(|j| {
                let c = candidates.iter().find(|c| c.pair_id == j).expect("chosen from candidates");
                Ok(ContextItem {
                    pair_id: j,
                    activation: c.activation,
                    confidence: c.confidence,
                    benign: self.receptive_field(j, k, Side::Benign, threshold)?,
                    adversarial: self.receptive_field(j, k, Side::Adv, threshold)?,
                })
            })
            .collect()
    }

    pub fn vulnerability_map(&self, id: usize, params: VulnParams, progress: Option<&AtomicUsize>) -> Result<VulnerabilityMap> {
        vulnerability_maps_with_progress(&self.net, self.pair(id)?, params, progress)
    }

    /// Binarized top-`q` score of `map` at full resolution.
    pub fn binarized_map(&self, map: &VulnerabilityMap, side: Side, q: f64) -> Result<Vec<bool>> {
        binarize_top_q(&vulnerability_score(map, side), q)
    }

    /// Neurons ranked by IoU between their benign RF and the binarized map.
    pub fn iou_ranking(&self, map: &VulnerabilityMap, side: Side, threshold: f64, q: f64) -> Result<Vec<(usize, f64)>> {
        let masks: Vec<RfMask> = self
            .receptive_fields(map.pair_id, Side::Benign, threshold)?
            .into_iter()
            .map(|(m, _)| m)
            .collect();
        rank_neurons_by_iou(&masks, &self.binarized_map(map, side, q)?)
    }

    pub fn dendrogram(&self, id: usize, threshold: f64, linkage: Linkage) -> Result<Dendrogram> {
        let images = |side| -> Result<Vec<RfImage>> {
            Ok(self.receptive_fields(id, side, threshold)?.into_iter().map(|(_, i)| i).collect())
        };
        let dist = neuron_distance_matrix(&images(Side::Benign)?, &images(Side::Adv)?)?;
        agglomerate(&dist, linkage)
    }

    /// Union or intersection of the RF masks of `neurons`, applied to one
    /// side's resized image.
    pub fn cluster_rf(&self, id: usize, neurons: &[usize], op: MaskOp, side: Side, threshold: f64) -> Result<(RfMask, RfImage)> {
        let canvas = self.canvas(id, side)?;
        let trace = self.trace(id, side)?;
        let masks = neurons
            .iter()
            .map(|&k| {
                self.check_neuron(k)?;
                canvas.mask(trace, k, threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = combine_masks(&masks, op)?;
        let image = canvas.apply(&mask)?;
        Ok((mask, image))
    }
}
