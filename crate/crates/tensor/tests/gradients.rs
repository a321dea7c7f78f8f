//! Central finite differences against the tape's analytic gradients, one op at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::{Conv2dOpts, CropOrigin, Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks d(loss)/d(input i) for every element of every input.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for input");
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

/// Random linear read-out so every output element matters.
fn readout(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(v), &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w);
    g.sum_all(p)
}

#[test]
fn conv2d_with_bias_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[2, 2, 6, 5], &mut rng), random(&[3, 2, 4, 4], &mut rng), random(&[3], &mut rng)];
    check(inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts { stride: 2, pad: 1 });
        readout(g, y, 9)
    });
}

#[test]
fn instance_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(vec![random(&[2, 3, 3, 2], &mut rng)], |g, v| {
        let y = g.instance_norm(v[0], 1e-5);
        readout(g, y, 3)
    });
    check(vec![random(&[2, 3, 3, 2], &mut rng)], |g, v| {
        let y = g.layer_norm(v[0], 1e-5);
        readout(g, y, 4)
    });
}

#[test]
fn channel_affine_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    check(inputs, |g, v| {
        let y = g.channel_affine(v[0], v[1], v[2]);
        let y = g.leaky_relu(y, 0.2);
        let y = g.tanh(y);
        let y = g.relu(y);
        readout(g, y, 5)
    });
}

#[test]
fn upsample_crop_and_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&[2, 2, 3, 3], &mut rng), random(&[2, 2, 6, 6], &mut rng)], |g, v| {
        let up = g.upsample2x(v[0]);
        let s = g.add(up, v[1]);
        let s = g.scale(s, 0.5);
        let origins = [
            CropOrigin { sample: 1, top: 1, left: 2 },
            CropOrigin { sample: 1, top: 0, left: 0 },
            CropOrigin { sample: 0, top: 3, left: 1 },
        ];
        let c = g.crop(s, 3, 4, &origins);
        readout(g, c, 6)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(vec![random(&[1, 2, 3, 3], &mut rng), random(&[1, 2, 3, 3], &mut rng)], |g, v| {
        let a = g.l1_mean(v[0], v[1]);
        let r = g.mean_softplus(v[0], -1.0);
        let f = g.mean_softplus(v[1], 1.0);
        g.weighted_sum(&[(a, 10.0), (r, 1.0), (f, 2.5)])
    });
}

#[test]
fn detached_values_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(&[2], vec![1.0, -2.0]));
    let d = g.detach(x);
    let y = g.mul(x, d);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0]);
    assert!(grads.get(d).is_none());
}

#[test]
fn softplus_is_stable_for_large_logits() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(&[3], vec![1e4, -1e4, 0.0]));
    let l = g.mean_softplus(x, -1.0);
    let v = g.value(l).item();
    // softplus(-1e4) = 0, softplus(1e4) = 1e4, softplus(0) = ln 2
    assert!((v - (1e4 + std::f32::consts::LN_2) / 3.0).abs() < 1e-2);
    let grads = g.backward(l);
    assert!(grads.get(x).unwrap().all_finite());
}
