use std::time::Instant;

use advscope_core::nn::{Mode, ModelSpec};
use advscope_core::testing::{check_input_gradient, check_parameter_gradients, random_images, random_network, GradCheck};

fn spec(classes: usize) -> ModelSpec {
    ModelSpec::mini_net_sized(16, (0..classes).map(|c| format!("c{c}")).collect())
}

#[test]
fn twenty_random_instances_match_central_differences() {
    let started = Instant::now();
    let mut total = GradCheck::default();
    for seed in 0..20u64 {
        let classes = 2 + (seed as usize % 4);
        let net = random_network(spec(classes), seed);
        let images = random_images(net.spec(), 2, 100 + seed);
        let labels = [seed as usize % classes, (seed as usize + 1) % classes];
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Inference };
        total.merge(&check_parameter_gradients(&net, &images, &labels, mode, 2, 1e-5, seed));

        let image = random_images(net.spec(), 1, 200 + seed).reshape(vec![3, 16, 16]).unwrap();
        total.merge(&check_input_gradient(&net, &image, labels[0], 24, 1e-5, seed));
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(total.checked > 1000, "{total:?}");
    assert!(total.skipped * 10 < total.checked, "too many kink crossings: {total:?}");
    assert!(total.max_relative_error < 1e-4, "{total:?}");
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
}

#[test]
fn float_network_agrees_with_double_network() {
    let net64 = random_network(spec(3), 7);
    let net32 = net64.cast::<f32>();
    let images = random_images(net64.spec(), 1, 1).reshape(vec![3, 16, 16]).unwrap();
    let t64 = net64.forward(&images).unwrap();
    let t32 = net32.forward(&images.cast::<f32>()).unwrap();
    for (a, b) in t64.probabilities.iter().zip(&t32.probabilities) {
        assert!((a - b).abs() < 1e-4);
    }
}
