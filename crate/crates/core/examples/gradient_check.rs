//! Compares backprop against central finite differences on the desk
//! classifier, in f64, for every parameter tensor and the input.

use pflsim::nn::{cross_entropy, Mode, Network, NetworkSpec, ParamVector};
use pflsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(net: &Network, p: &ParamVector<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let logits = net.forward(p, x, Mode::Train).unwrap();
    cross_entropy(&logits, y).unwrap().0
}

fn main() -> pflsim::Result<()> {
    let net = Network::new(NetworkSpec::desk_classifier(1, 8, 3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p: ParamVector<f64> = net.init_params(&mut rng).cast();
    let x = Tensor::new(vec![4, 1, 8, 8], (0..256).map(|_| rng.random::<f64>()).collect())?;
    let y = vec![0, 1, 2, 1];
    let g = net.backward(&p, &x, &y, Mode::Train, true)?;
    let h = 1e-6;
    for e in p.layout().entries().iter().filter(|e| e.kind.is_trainable()) {
        let mut worst: f64 = 0.0;
        for i in e.range() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.values_mut()[i] += h;
            b.values_mut()[i] -= h;
            let fd = (loss(&net, &a, &x, &y) - loss(&net, &b, &x, &y)) / (2.0 * h);
            let an = g.param_grads.values()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        println!("{:<24} {:>6} coords  max rel err {worst:.2e}", e.name, e.len());
    }
    let dx = g.input_grad.expect("requested");
    let mut worst: f64 = 0.0;
    for i in (0..x.len()).step_by(7) {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        let fd = (loss(&net, &p, &a, &y) - loss(&net, &p, &b, &y)) / (2.0 * h);
        worst = worst.max((fd - dx.data()[i]).abs() / fd.abs().max(dx.data()[i].abs()).max(1e-6));
    }
    println!("{:<24} {:>6} coords  max rel err {worst:.2e}", "input", x.len().div_ceil(7));
    Ok(())
}
