mod common;

use common::*;
use pflsim::nn::{LayerSpec, Mode, Network, NetworkSpec, ParamVector};
use pflsim::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_network_gives_zero_logits() {
    let net = Network::new(NetworkSpec::desk_classifier(1, 16, 5)).unwrap();
    let mut p = ParamVector::zeros(net.layout().clone());
    // BN with zero gamma/beta and unit running var still yields zeros
    for e in net.layout().entries() {
        if e.kind == pflsim::nn::ParamKind::BnRunningVar {
            p.slice_mut(e).iter_mut().for_each(|v| *v = 1.0);
        }
    }
    let x = random_input(&[1, 16, 16], 3, 1, false).cast::<f32>();
    for mode in [Mode::Train, Mode::Eval] {
        let y = net.forward(&p, &x, mode).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn dense_hand_matmul() {
    let spec = NetworkSpec { input_shape: vec![2], layers: vec![LayerSpec::Dense { out: 2 }], classes: Some(2), head_split: None };
    let net = Network::new(spec).unwrap();
    let p = ParamVector::new(net.layout().clone(), vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap();
    let y = net.forward(&p, &x, Mode::Eval).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0]);
}

#[test]
fn conv_net_matches_naive_forward() {
    let spec = NetworkSpec {
        input_shape: vec![2, 7, 7],
        layers: vec![
            LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Conv2d { out_channels: 3, kernel: 4, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 4 },
        ],
        classes: Some(4),
        head_split: Some(6),
    };
    let net = Network::new(spec.clone()).unwrap();
    for seed in 0..3 {
        let p = random_params(&net, seed);
        let x = random_input(&[2, 7, 7], 5, seed, false);
        for (mode, train) in [(Mode::Train, true), (Mode::Eval, false)] {
            let want = naive_forward(&spec, &p, &x, train);
            // the production path runs in f32
            let got = net.forward(&p.cast::<f32>(), &x.cast::<f32>(), mode).unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn generator_matches_naive_forward_and_is_bounded() {
    let spec = NetworkSpec::generator(1, 16, 4, 2);
    let net = Network::new(spec.clone()).unwrap();
    let p = random_params(&net, 9);
    let x = random_input(&[1, 16, 16], 2, 9, false);
    let want = naive_forward(&spec, &p, &x, true);
    let got = net.forward(&p.cast::<f32>(), &x.cast::<f32>(), Mode::Train).unwrap();
    assert_eq!(got.shape(), &[2, 1, 16, 16]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
        assert!(a.abs() < 1.0);
    }
}

#[test]
fn zero_input_gives_zero_weight_gradient() {
    let spec = NetworkSpec { input_shape: vec![3], layers: vec![LayerSpec::Dense { out: 2 }], classes: Some(2), head_split: None };
    let net = Network::new(spec).unwrap();
    let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::zeros(vec![4, 3]);
    let g = net.backward(&p, &x, &[0, 1, 1, 0], Mode::Train, false).unwrap();
    let w = net.layout().entries()[0].clone();
    assert!(g.param_grads.slice(&w).iter().all(|v| *v == 0.0));
    assert!(g.input_grad.is_none());
}

#[test]
fn input_grad_of_softmax_model_matches_closed_form() {
    // single dense layer: dL/dx = (softmax - onehot) W^T / batch
    let spec = NetworkSpec { input_shape: vec![4], layers: vec![LayerSpec::Dense { out: 3 }], classes: Some(3), head_split: None };
    let net = Network::new(spec).unwrap();
    let p = random_params(&net, 4);
    let x = random_input(&[4], 2, 4, false);
    let labels = [2usize, 0];
    let g = net.backward(&p, &x, &labels, Mode::Eval, true).unwrap();
    let probs = pflsim::nn::loss::softmax(&g.logits);
    let w = &p.values()[..12];
    for s in 0..2 {
        for i in 0..4 {
            let mut want = 0.0;
            for o in 0..3 {
                let d = probs[s][o] - if o == labels[s] { 1.0 } else { 0.0 };
                want += d * w[i * 3 + o];
            }
            want /= 2.0;
            let got = g.input_grad.as_ref().unwrap().data()[s * 4 + i];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences_per_layer_kind() {
    for (name, spec, mode, away) in layer_probes() {
        let net = Network::new(spec).unwrap();
        for seed in 0..10 {
            let (ep, ex) = max_fd_error(&net, seed, 4, mode, away);
            assert!(ep <= 1e-3 && ex <= 1e-3, "{name} seed {seed}: param {ep:e}, input {ex:e}");
        }
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    // Whole encoder-decoder in train mode. ReLUs sit right after batch norm,
    // so a 1e-3 step regularly crosses kinks; a 1e-6 step does not.
    let net = Network::new(NetworkSpec::generator(1, 8, 2, 2)).unwrap();
    for seed in 0..3 {
        let (ep, ex) = max_fd_error_with_step(&net, seed, 3, Mode::Train, false, 1e-6);
        assert!(ep <= 1e-3 && ex <= 1e-3, "seed {seed}: {ep:e} {ex:e}");
    }
}

#[test]
fn bn_eval_output_approaches_train_output() {
    let spec = NetworkSpec { input_shape: vec![2, 3, 3], layers: vec![LayerSpec::BatchNorm, LayerSpec::Flatten, LayerSpec::Dense { out: 2 }], classes: Some(2), head_split: None };
    let net = Network::new(spec).unwrap();
    let mut p = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
    // values in [0, 1): variance well below the initial running var of 1
    let x = random_input(&[2, 3, 3], 8, 3, false).map(|v| (v + 1.0) / 2.0).cast::<f32>();
    let train_out = net.forward(&p, &x, Mode::Train).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..30 {
        let gap: f64 = net
            .forward(&p, &x, Mode::Eval)
            .unwrap()
            .data()
            .iter()
            .zip(train_out.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        assert!(gap <= last + 1e-9, "gap grew: {gap} > {last}");
        last = gap;
        let trace = net.forward_trace(&p, &x, Mode::Train).unwrap();
        net.commit_running_stats(&mut p, trace.running_stats(), None);
    }
}

#[test]
fn forward_is_deterministic_across_threads() {
    let net = Network::new(NetworkSpec::desk_classifier(1, 16, 5)).unwrap();
    let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(11));
    let x = random_input(&[1, 16, 16], 8, 11, false).cast::<f32>();
    let base = net.forward(&p, &x, Mode::Train).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (net, p, x) = (net.clone(), p.clone(), x.clone());
            std::thread::spawn(move || net.forward(&p, &x, Mode::Train).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().data(), base.data());
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let net = Network::new(NetworkSpec::desk_classifier(1, 16, 5)).unwrap();
    let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::<f32>::zeros(vec![2, 1, 8, 8]);
    assert!(net.forward(&p, &x, Mode::Eval).is_err());
    let other = Network::new(NetworkSpec::desk_classifier(1, 16, 3)).unwrap();
    let q = other.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    assert!(net.forward(&q, &Tensor::zeros(vec![1, 1, 16, 16]), Mode::Eval).is_err());
}
