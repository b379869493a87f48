//! Response bodies, built from a [`Workbench`] and shared with the CLI
//! export command.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use advscope_core::cluster::{Dendrogram, Linkage};
use advscope_core::image::{encode_png, heatmap_rgb8, planar_png};
use advscope_core::measures::rank_by_gap;
use advscope_core::projection::ProjectionMethod;
use advscope_core::rf::{rle, ContextSort, MaskOp, RfImage, RfMask};
use advscope_core::vulnmap::{binarize_top_q, vulnerability_score, VulnParams, VulnerabilityMap};
use advscope_core::workspace::{cell_pairs, sort_pairs, InstancePair, Side, SortMeasure};
use advscope_core::{Result, Tensor, Workbench};

pub fn side_name(side: Side) -> &'static str {
    match side {
        Side::Benign => "benign",
        Side::Adv => "adv",
    }
}

pub fn linkage_name(linkage: Linkage) -> &'static str {
    match linkage {
        Linkage::Single => "single",
        Linkage::Complete => "complete",
        Linkage::Average => "average",
    }
}

pub fn image_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = image.shape();
    let planar: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    planar_png(&planar, shape[1], shape[2])
}

fn data_url(png: &[u8]) -> String {
    format!("data:image/png;base64,{}", STANDARD.encode(png))
}

fn rf_json(mask: &RfMask, image: &RfImage) -> Result<Value> {
    Ok(json!({
        "dead": mask.dead,
        "mask": {"size": mask.size, "ones": mask.count(), "rle": mask.rle()},
        "image_png": data_url(&planar_png(&image.pixels, image.size, image.size)?),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorBy {
    True,
    Predicted,
}

pub fn overview(wb: &Workbench, method: ProjectionMethod, color_by: ColorBy, seed: u64) -> Result<Value> {
    let proj = wb.projection(method, seed)?;
    let pairs = &wb.run().pairs;
    let points = |coords: &[[f64; 2]], adversarial: bool| -> Vec<Value> {
        coords
            .iter()
            .zip(pairs)
            .map(|(c, p)| {
                let label = if adversarial && color_by == ColorBy::Predicted { p.adversarial_label } else { p.label };
                json!({"pair_id": p.id, "x": c[0], "y": c[1], "label": label})
            })
            .collect()
    };
    Ok(json!({
        "class_names": wb.run().manifest.class_names,
        "method": match method { ProjectionMethod::Pca => "pca", ProjectionMethod::Tsne => "tsne" },
        "color_by": match color_by { ColorBy::True => "true", ColorBy::Predicted => "predicted" },
        "seed": seed,
        "benign": points(&proj.benign, false),
        "adversarial": points(&proj.adversarial, true),
    }))
}

pub fn matrix(wb: &Workbench) -> Value {
    let m = wb.run().prediction_matrix();
    json!({
        "class_names": wb.run().manifest.class_names,
        "total": m.total(),
        "counts": m.counts,
    })
}

fn pair_summary(p: &InstancePair) -> Result<Value> {
    Ok(json!({
        "id": p.id,
        "y": p.label,
        "adv_label": p.adversarial_label,
        "p_benign": p.benign_probabilities,
        "p_adv": p.adversarial_probabilities,
        "l2": p.perturbation_l2,
        "benign_thumbnail": data_url(&image_png(&p.benign)?),
        "adv_thumbnail": data_url(&image_png(&p.adversarial)?),
        "benign_image": format!("/pair/{}/image/benign.png", p.id),
        "adv_image": format!("/pair/{}/image/adv.png", p.id),
    }))
}

pub fn cell(wb: &Workbench, true_label: usize, adversarial_label: usize, sort: SortMeasure) -> Result<Value> {
    let pairs = &wb.run().pairs;
    let ids = cell_pairs(pairs, true_label, adversarial_label);
    let members: Vec<&InstancePair> = ids.iter().map(|&i| &pairs[i]).collect();
    let order = sort_pairs(members.iter().copied(), sort);
    Ok(json!({
        "true_label": true_label,
        "adv_label": adversarial_label,
        "sort": sort.as_str(),
        "order": order,
        "pairs": order.iter().map(|&i| pair_summary(&pairs[i])).collect::<Result<Vec<_>>>()?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronSort {
    Gap,
    IouB,
    IouA,
}

impl NeuronSort {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gap => "gap",
            Self::IouB => "iou_b",
            Self::IouA => "iou_a",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronQuery {
    pub sort: NeuronSort,
    pub vuln: VulnParams,
    pub t: f64,
    pub q: f64,
    pub gamma: f64,
}

/// Neuron payload ordered by `query.sort`. IoU sorts need the pair's
/// vulnerability map.
pub fn neurons(wb: &Workbench, id: usize, query: &NeuronQuery, map: Option<&VulnerabilityMap>) -> Result<Value> {
    let entries = wb.neuron_entries(id, query.gamma)?;
    let (order, iou): (Vec<usize>, Option<Vec<f64>>) = match (query.sort, map) {
        (NeuronSort::Gap, _) | (_, None) => (rank_by_gap(&entries.iter().map(|e| e.bg).collect::<Vec<_>>()), None),
        (sort, Some(map)) => {
            let side = if sort == NeuronSort::IouB { Side::Benign } else { Side::Adv };
            let ranked = wb.iou_ranking(map, side, query.t, query.q)?;
            let mut iou = vec![0.0; entries.len()];
            for &(k, v) in &ranked {
                iou[k] = v;
            }
            (ranked.into_iter().map(|(k, _)| k).collect(), Some(iou))
        }
    };
    let neurons: Vec<Value> = order
        .iter()
        .map(|&k| {
            let mut v = serde_json::to_value(&entries[k]).expect("plain data");
            if let Some(iou) = &iou {
                v["iou"] = json!(iou[k]);
            }
            v
        })
        .collect();
    Ok(json!({
        "pair_id": id,
        "sort": query.sort.as_str(),
        "params": {
            "k": query.vuln.k,
            "s": query.vuln.s,
            "value_space": query.vuln.value_space.as_str(),
            "t": query.t,
            "q": query.q,
            "gamma": query.gamma,
        },
        "order": order,
        "neurons": neurons,
    }))
}

pub fn receptive_field(wb: &Workbench, id: usize, k: usize, side: Side, t: f64) -> Result<Value> {
    let (mask, image) = wb.receptive_field(id, k, side, t)?;
    let trace = wb.trace(id, side)?;
    let mut v = rf_json(&mask, &image)?;
    v["pair_id"] = json!(id);
    v["neuron"] = json!(k);
    v["side"] = json!(side_name(side));
    v["params"] = json!({"t": t, "rf_size": mask.size});
    v["activation"] = json!(trace.pooled[k]);
    v["probabilities"] = json!(trace.probabilities);
    Ok(v)
}

pub fn context(wb: &Workbench, id: usize, k: usize, sort: ContextSort, m: usize, t: f64) -> Result<Value> {
    let items = wb
        .context(id, k, sort, m, t)?
        .into_iter()
        .map(|it| {
            Ok(json!({
                "pair_id": it.pair_id,
                "activation": it.activation,
                "confidence": it.confidence,
                "benign": rf_json(&it.benign.0, &it.benign.1)?,
                "adv": rf_json(&it.adversarial.0, &it.adversarial.1)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "pair_id": id,
        "neuron": k,
        "sort": match sort { ContextSort::Activation => "activation", ContextSort::Confidence => "confidence" },
        "params": {"m": m, "t": t},
        "items": items,
    }))
}

pub fn vulnmap(map: &VulnerabilityMap, which: Side, q: f64) -> Result<Value> {
    let score = vulnerability_score(map, which);
    let binarized = binarize_top_q(&score, q)?;
    let overlay = encode_png(map.image_w, map.image_h, &heatmap_rgb8(&score))?;
    Ok(json!({
        "pair_id": map.pair_id,
        "which": side_name(which),
        "params": {
            "k": map.params.k,
            "s": map.params.s,
            "q": q,
            "value_space": map.params.value_space.as_str(),
        },
        "benign_label": map.benign_label,
        "adv_label": map.adversarial_label,
        "rows": map.rows,
        "cols": map.cols,
        "height": map.image_h,
        "width": map.image_w,
        "map": map.grid(which),
        "score": score,
        "binarized": {"ones": binarized.iter().filter(|&&b| b).count(), "rle": rle(&binarized)},
        "overlay_png": data_url(&overlay),
    }))
}

pub fn dendrogram(id: usize, t: f64, linkage: Linkage, tree: Value) -> Value {
    json!({
        "pair_id": id,
        "params": {"t": t, "linkage": linkage_name(linkage)},
        "dendrogram": tree,
    })
}

pub fn cluster_rf(
    wb: &Workbench,
    id: usize,
    tree: &Dendrogram,
    nodes: &[usize],
    op: MaskOp,
    side: Side,
    t: f64,
    linkage: Linkage,
) -> Result<Value> {
    let neurons = tree.select_subtree(nodes)?;
    let (mask, image) = wb.cluster_rf(id, &neurons, op, side, t)?;
    let mut v = rf_json(&mask, &image)?;
    v["pair_id"] = json!(id);
    v["nodes"] = json!(nodes);
    v["neurons"] = json!(neurons);
    v["side"] = json!(side_name(side));
    v["params"] = json!({
        "t": t,
        "op": match op { MaskOp::Union => "union", MaskOp::Intersection => "intersection" },
        "linkage": linkage_name(linkage),
    });
    Ok(v)
}

