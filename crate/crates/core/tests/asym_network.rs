mod common;

use asymnet::network::{count_weights, read_model, write_model, Layer, ProfileSpec, Schedule, SensitivityProfile};
use asymnet::training::{loss, LossKind};
use asymnet::{Activation, Network, Rng};
use common::{batch_shape, gradient_check, random_network, random_spec, random_tensor, PlainNet};
use proptest::prelude::*;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn assert_same_params(net: &Network, plain: &PlainNet) {
    for (layer, (w, b)) in net.layers.iter().zip(plain.params()) {
        match layer.params() {
            Some((nw, nb)) => {
                assert_eq!(bits(nw.data()), bits(&w));
                assert_eq!(bits(nb), bits(&b));
            }
            None => assert!(w.is_empty()),
        }
    }
}

fn symmetric_reduction(seed: u64, explicit_ones: bool) {
    let mut rng = Rng::new(seed);
    let spec = random_spec(&mut rng);
    let mut net = random_network(&spec, &ProfileSpec::flat(), &mut rng);
    if explicit_ones {
        for layer in &mut net.layers {
            if let Some(p) = layer.profile_mut() {
                *p = SensitivityProfile::explicit(vec![1.0; p.len()]).unwrap();
            }
        }
    }
    let mut plain = PlainNet::from_network(&net);
    let batch = 3;
    let x = random_tensor(&batch_shape(batch, &spec.input_shape), &mut rng);
    let out_shape = batch_shape(batch, &net.output_shape().unwrap());

    let (out, state) = net.forward(&x).unwrap();
    let (pout, cache) = plain.forward(x.data(), batch);
    assert_eq!(bits(out.data()), bits(&pout));
    let g = random_tensor(&out_shape, &mut rng);
    let grads = net.backward(&state, &g).unwrap();
    let pgrads = plain.backward(&cache, g.data(), batch);
    for (lg, (pw, pb)) in grads.layers.iter().zip(&pgrads) {
        if let Some(lg) = lg {
            assert_eq!(bits(lg.weights.data()), bits(pw));
            assert_eq!(bits(&lg.bias), bits(pb));
        }
    }

    let target = random_tensor(&out_shape, &mut rng);
    for _ in 0..10 {
        let (out, state) = net.forward(&x).unwrap();
        let (_, g) = loss(LossKind::Mse, &out, &target).unwrap();
        let grads = net.backward(&state, &g).unwrap();
        asymnet::network::apply_update(&mut net, &grads, 0.1).unwrap();
        let (pout, cache) = plain.forward(x.data(), batch);
        let pout = asymnet::Tensor::new(&out_shape, pout).unwrap();
        let (_, pg) = loss(LossKind::Mse, &pout, &target).unwrap();
        let pgrads = plain.backward(&cache, pg.data(), batch);
        plain.sgd(&pgrads, 0.1);
    }
    assert_same_params(&net, &plain);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn all_ones_profile_is_bit_identical_to_plain_network(seed in any::<u64>(), explicit in any::<bool>()) {
        symmetric_reduction(seed, explicit);
    }

    #[test]
    fn backprop_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let spec = random_spec(&mut rng);
        let profile = ProfileSpec::new(common::random_schedule(&mut rng));
        let net = random_network(&spec, &profile, &mut rng);
        let x = random_tensor(&batch_shape(2, &spec.input_shape), &mut rng);
        let t = random_tensor(&batch_shape(2, &net.output_shape().unwrap()), &mut rng);
        let (worst, compared, _) = gradient_check(&net, &x, &t, 1e-5);
        prop_assert!(compared > 0);
        prop_assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn profiles_obey_the_ordering_law(n in 1usize..200, which in 0usize..4, floor in 1e-6f64..0.5) {
        let schedule = [Schedule::Linear, Schedule::Quadratic, Schedule::ClampedRamp, Schedule::Flat][which];
        let p = SensitivityProfile::make(schedule, n, floor).unwrap();
        let s = p.values();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s[0] <= 1.0);
        for w in s.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(s[n - 1] > 0.0);
        // Node-wise slopes are non-increasing at every u for relu and linear bases.
        for base in [Activation::Relu, Activation::Linear] {
            for u in [-1.0, 0.5, 3.0] {
                let d: Vec<f64> = s.iter().map(|&si| asymnet::network::scaled_derivative(u, si, base)).collect();
                prop_assert!(d.iter().all(|&v| v >= 0.0));
                prop_assert!(d.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn removals_keep_the_network_sound(seed in any::<u64>(), removals in 1usize..8) {
        let mut rng = Rng::new(seed);
        let spec = random_spec(&mut rng);
        let mut net = random_network(&spec, &ProfileSpec::new(Schedule::Linear), &mut rng);
        let out_shape = net.output_shape().unwrap();
        let before = count_weights(&net);
        let mut removed = 0;
        for _ in 0..removals {
            let hidden = net.hidden_layers();
            if hidden.is_empty() {
                break;
            }
            let l = hidden[rng.below(hidden.len())];
            let w = net.layers[l].width();
            if w > 1 {
                net.remove_node(l, rng.below(w)).unwrap();
                removed += 1;
            }
        }
        prop_assert_eq!(net.output_shape().unwrap(), out_shape.clone());
        let x = random_tensor(&batch_shape(2, &spec.input_shape), &mut rng);
        let y = net.predict(&x).unwrap();
        prop_assert_eq!(&y.shape()[1..], out_shape.as_slice());
        if removed > 0 {
            prop_assert!(count_weights(&net) < before);
        }
    }

    #[test]
    fn removing_a_silent_node_preserves_outputs_exactly(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let spec = random_spec(&mut rng);
        let mut net = random_network(&spec, &ProfileSpec::new(Schedule::Quadratic), &mut rng);
        let hidden = net.hidden_layers();
        prop_assume!(!hidden.is_empty());
        let l = hidden[rng.below(hidden.len())];
        let w = net.layers[l].width();
        prop_assume!(w > 1);
        let node = rng.below(w);
        net.silence_node(l, node).unwrap();
        let x = random_tensor(&batch_shape(3, &spec.input_shape), &mut rng);
        let before = net.predict(&x).unwrap();
        let after = net.with_node_removed(l, node).unwrap().predict(&x).unwrap();
        let dev = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert_eq!(dev, 0.0);
    }

    #[test]
    fn model_files_round_trip(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let spec = random_spec(&mut rng);
        let net = random_network(&spec, &ProfileSpec::new(common::random_schedule(&mut rng)), &mut rng);
        let mut bytes = Vec::new();
        write_model(&net, &mut bytes).unwrap();
        let back = read_model(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &net);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn twin_keeps_weights_and_flattens_profiles() {
    let mut rng = Rng::new(11);
    let spec = random_spec(&mut rng);
    let net = random_network(&spec, &ProfileSpec::new(Schedule::Quadratic), &mut rng);
    let twin = net.symmetric_twin();
    for (a, b) in net.layers.iter().zip(&twin.layers) {
        assert_eq!(a.params(), b.params());
        if let Layer::Dense(_) | Layer::Conv2d(_) = b {
            assert!(b.profile().unwrap().values().iter().all(|&s| s == 1.0));
        }
    }
}
