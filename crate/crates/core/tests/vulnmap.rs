//! Occlusion-style vulnerability maps checked against direct per-position
//! evaluation and closed-form special cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advscope_core::nn::{argmax, ModelSpec, Network};
use advscope_core::testing::random_network;
use advscope_core::vulnmap::{substitute, vulnerability_maps, ValueSpace, VulnParams};
use advscope_core::workspace::{InstancePair, Side};
use advscope_core::Tensor;

const SIZE: usize = 16;

fn net(seed: u64) -> Network<f32> {
    let spec = ModelSpec::mini_net_sized(SIZE, vec!["a".into(), "b".into(), "c".into()]);
    random_network(spec, seed).cast()
}

fn image(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..3 * SIZE * SIZE).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![3, SIZE, SIZE], data).unwrap()
}

fn pair(net: &Network<f32>, benign: Tensor<f32>, adversarial: Tensor<f32>) -> InstancePair {
    let pb = net.forward(&benign).unwrap().probabilities;
    let pa = net.forward(&adversarial).unwrap().probabilities;
    let label = argmax(&pb);
    let mut adversarial_label = argmax(&pa);
    if adversarial_label == label {
        adversarial_label = (label + 1) % pb.len();
    }
    InstancePair {
        id: 0,
        source_index: 0,
        label,
        adversarial_label,
        benign_probabilities: pb,
        adversarial_probabilities: pa,
        perturbation_l2: benign.l2_distance(&adversarial),
        benign,
        adversarial,
    }
}

fn perturbed(benign: &Tensor<f32>, rng: &mut ChaCha8Rng, eps: f32) -> Tensor<f32> {
    let data = benign.data().iter().map(|&v| (v + rng.random_range(-eps..eps)).clamp(0.0, 1.0)).collect();
    Tensor::new(benign.shape().to_vec(), data).unwrap()
}

fn value(net: &Network<f32>, img: &Tensor<f32>, class: usize, space: ValueSpace) -> f64 {
    let t = net.forward(img).unwrap();
    match space {
        ValueSpace::Probability => t.probabilities[class],
        ValueSpace::Logit => t.logits[class],
    }
}

#[test]
fn identical_images_give_all_zero_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..3 {
        let net = net(seed);
        let b = image(&mut rng);
        let p = pair(&net, b.clone(), b);
        for space in [ValueSpace::Probability, ValueSpace::Logit] {
            let map = vulnerability_maps(&net, &p, VulnParams { k: 2, s: 1, value_space: space }).unwrap();
            assert!(map.b_map.iter().chain(&map.a_map).all(|&v| v == 0.0));
        }
    }
}

#[test]
fn full_image_substitution_equals_class_deltas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..3 {
        let net = net(seed);
        let b = image(&mut rng);
        let a = perturbed(&b, &mut rng, 0.2);
        let p = pair(&net, b.clone(), a.clone());
        for space in [ValueSpace::Probability, ValueSpace::Logit] {
            let map = vulnerability_maps(&net, &p, VulnParams { k: SIZE, s: 3, value_space: space }).unwrap();
            let db = value(&net, &a, p.label, space) - value(&net, &b, p.label, space);
            let da = value(&net, &b, p.adversarial_label, space) - value(&net, &a, p.adversarial_label, space);
            let tol = 1e-6 * (1.0 + db.abs().max(da.abs()));
            for (&vb, &va) in map.b_map.iter().zip(&map.a_map) {
                assert!((vb as f64 - db).abs() < tol, "{vb} vs {db}");
                assert!((va as f64 - da).abs() < tol, "{va} vs {da}");
            }
        }
    }
}

#[test]
fn strided_map_is_the_dense_map_sampled_on_its_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = net(4);
    let b = image(&mut rng);
    let p = pair(&net, b.clone(), perturbed(&b, &mut rng, 0.1));
    let dense = vulnerability_maps(&net, &p, VulnParams { k: 2, s: 1, value_space: ValueSpace::Probability }).unwrap();
    for s in [2, 3, 5] {
        let sparse = vulnerability_maps(&net, &p, VulnParams { k: 2, s, value_space: ValueSpace::Probability }).unwrap();
        assert_eq!(sparse.rows, SIZE.div_ceil(s));
        for r in 0..sparse.rows {
            for c in 0..sparse.cols {
                for side in [Side::Benign, Side::Adv] {
                    assert_eq!(sparse.at(side, r, c), dense.at(side, r * s, c * s), "s={s} ({r},{c})");
                }
            }
        }
    }
}

#[test]
fn batched_map_matches_direct_per_position_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = net(6);
    let b = image(&mut rng);
    let p = pair(&net, b.clone(), perturbed(&b, &mut rng, 0.1));
    let params = VulnParams { k: 3, s: 2, value_space: ValueSpace::Logit };
    let map = vulnerability_maps(&net, &p, params).unwrap();
    let base_b = value(&net, &p.benign, p.label, params.value_space);
    let base_a = value(&net, &p.benign, p.adversarial_label, params.value_space);
    for r in 0..map.rows {
        for c in 0..map.cols {
            let img = substitute(&p.benign, &p.adversarial, r * 2, c * 2, 3);
            let vb = (value(&net, &img, p.label, params.value_space) - base_b) as f32;
            let va = (base_a - value(&net, &img, p.adversarial_label, params.value_space)) as f32;
            assert_eq!(map.at(Side::Benign, r, c), vb);
            assert_eq!(map.at(Side::Adv, r, c), va);
        }
    }
}

#[test]
fn a_localized_perturbation_only_moves_windows_that_touch_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = net(8);
    let b = image(&mut rng);
    let mut a = b.clone();
    let (py, px) = (9usize, 4usize);
    for ch in 0..3 {
        for y in py..py + 3 {
            for x in px..px + 3 {
                let v = &mut a.data_mut()[(ch * SIZE + y) * SIZE + x];
                *v = 1.0 - *v;
            }
        }
    }
    let p = pair(&net, b, a);
    let k = 2;
    let map = vulnerability_maps(&net, &p, VulnParams { k, s: 1, value_space: ValueSpace::Logit }).unwrap();
    let mut touched = 0;
    for r in 0..SIZE {
        for c in 0..SIZE {
            let hits = r + k > py && r < py + 3 + k && c + k > px && c < px + 3 + k;
            let v = map.at(Side::Benign, r, c);
            if hits {
                touched += usize::from(v != 0.0);
            } else {
                assert_eq!(v, 0.0, "({r},{c}) lies outside the perturbation");
                assert_eq!(map.at(Side::Adv, r, c), 0.0);
            }
        }
    }
    assert!(touched > 0);
}

#[test]
fn thread_count_does_not_change_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = net(10);
    let b = image(&mut rng);
    let p = pair(&net, b.clone(), perturbed(&b, &mut rng, 0.1));
    let params = VulnParams::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| vulnerability_maps(&net, &p, params).unwrap())
    };
    let serial = run(1);
    assert_eq!(serial, run(4));
    assert_eq!(serial, run(3));
}
