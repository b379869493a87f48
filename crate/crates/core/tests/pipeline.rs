//! End-to-end properties on a small trained model and its attack run.

use std::sync::OnceLock;

use advscope_core::attack::{success_rate, AttackConfig};
use advscope_core::cluster::Linkage;
use advscope_core::data::generate_shapes_dataset;
use advscope_core::measures::{contribution, Role};
use advscope_core::nn::Network;
use advscope_core::projection::ProjectionMethod;
use advscope_core::rf::{ContextSort, MaskOp};
use advscope_core::testing::small_run;
use advscope_core::vulnmap::VulnParams;
use advscope_core::workspace::{Run, Side};
use advscope_core::Workbench;

fn fixture() -> &'static (Network<f32>, Run) {
    static F: OnceLock<(Network<f32>, Run)> = OnceLock::new();
    F.get_or_init(|| small_run(11, 80, 16, 5))
}

fn workbench() -> Workbench {
    let (net, run) = fixture();
    Workbench::new(net.clone(), run.clone()).unwrap()
}

#[test]
fn every_pair_satisfies_the_attack_contract() {
    let (net, run) = fixture();
    let eps = run.manifest.attack.epsilon;
    assert!(run.pairs.len() >= 10, "only {} pairs", run.pairs.len());
    for p in &run.pairs {
        assert!(p.adversarial.linf_distance(&p.benign) <= eps + 1e-6);
        assert!(p.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(p.label, p.adversarial_label);
        assert_eq!(net.forward(&p.adversarial).unwrap().predicted_label, p.adversarial_label);
        assert_eq!(net.forward(&p.benign).unwrap().predicted_label, p.label);
        p.validate(eps).unwrap();
    }
}

#[test]
fn larger_budget_never_lowers_success() {
    let (net, _) = fixture();
    let data = generate_shapes_dataset(11, 80, 16).unwrap();
    let (_, test) = data.split_holdout(5);
    let small = success_rate(net, &test, &AttackConfig::default()).unwrap();
    let large = success_rate(
        net,
        &test,
        &AttackConfig {
            epsilon: 16.0 / 255.0,
            ..AttackConfig::default()
        },
    )
    .unwrap();
    assert!(small >= 0.5, "success {small}");
    assert!(large >= small, "{large} < {small}");
}

#[test]
fn contributions_decompose_every_logit() {
    let (net, run) = fixture();
    let (_, bias) = net.dense_weights();
    for p in &run.pairs {
        for img in [&p.benign, &p.adversarial] {
            let trace = net.forward(img).unwrap();
            for class in 0..net.class_count() {
                let v = contribution(net, &trace, class).unwrap();
                let total: f64 = v.values.iter().sum::<f64>() + bias[class] as f64;
                assert!((total - trace.logits[class]).abs() < 1e-5, "{total} vs {}", trace.logits[class]);
            }
        }
    }
}

#[test]
fn run_survives_a_disk_round_trip() {
    let (_, run) = fixture();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    let back = Run::load(dir.path()).unwrap();
    assert_eq!(back.manifest, run.manifest);
    for (a, b) in back.pairs.iter().zip(&run.pairs) {
        assert_eq!(a.benign, b.benign);
        assert_eq!(a.adversarial, b.adversarial);
    }
}

#[test]
fn the_fixture_is_reproducible() {
    let (net, run) = small_run(11, 80, 16, 5);
    let (net0, run0) = fixture();
    assert_eq!(net.params(), net0.params());
    assert_eq!(run.manifest, run0.manifest);
}

#[test]
fn workbench_views_are_consistent() {
    let wb = workbench();
    let n = wb.neuron_count();
    let proj = wb.projection(ProjectionMethod::Pca, 0).unwrap();
    assert_eq!(proj.benign.len(), wb.run().pairs.len());

    for id in 0..wb.run().pairs.len().min(4) {
        let (mask, image) = wb.receptive_field(id, 0, Side::Benign, 0.5).unwrap();
        assert_eq!(mask.size, wb.rf_size());
        assert_eq!(image.pixels.len(), 3 * mask.size * mask.size);

        let all: Vec<usize> = (0..n).collect();
        let union = wb.cluster_rf(id, &all, MaskOp::Union, Side::Adv, 0.5).unwrap().0;
        let inter = wb.cluster_rf(id, &all, MaskOp::Intersection, Side::Adv, 0.5).unwrap().0;
        assert!(inter.is_subset_of(&union));

        let tree = wb.dendrogram(id, 0.5, Linkage::Average).unwrap();
        tree.check_invariants().unwrap();
        assert_eq!(tree.leaf_count(), n);

        let ctx = wb.context(id, 3, ContextSort::Activation, 4, 0.5).unwrap();
        assert!(!ctx.is_empty() && ctx.len() <= 4);
        assert!(ctx.windows(2).all(|w| w[0].activation >= w[1].activation));
        let p = wb.pair(id).unwrap();
        for item in &ctx {
            let q = wb.pair(item.pair_id).unwrap();
            assert_eq!((q.label, q.adversarial_label), (p.label, p.adversarial_label));
        }

        let map = wb.vulnerability_map(id, VulnParams { k: 2, s: 4, ..VulnParams::default() }, None).unwrap();
        let ranking = wb.iou_ranking(&map, Side::Benign, 0.5, 0.2).unwrap();
        assert_eq!(ranking.len(), n);
        assert!(ranking.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn bands_need_two_members() {
    let wb = workbench();
    let counts = wb.run().prediction_matrix();
    for class in 0..wb.run().class_count() {
        let benign_members = counts.row_sums()[class];
        match wb.band(Role::Benign, class, 0.95) {
            Ok(band) => {
                assert!(benign_members >= 2);
                assert!(band.lower.iter().zip(&band.upper).all(|(l, u)| l <= u));
            }
            Err(e) => {
                assert!(benign_members < 2, "{e}");
            }
        }
    }
}
