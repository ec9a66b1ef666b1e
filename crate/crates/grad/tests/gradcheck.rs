//! Central finite-difference checks for every differentiable op.

use footprint_grad::{pixel_shuffle, pixel_unshuffle, Graph, NodeId, ParamKind, ParamStore, Tensor};
use rand::{rngs::StdRng, Rng, SeedableRng};

fn random(shape: &[usize], rng: &mut StdRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Checks d/dx sum(f(x) * r) against central differences in f64-accumulated
/// f32 arithmetic.
fn check_input_grad(
    shape: &[usize],
    seed: u64,
    f: impl Fn(&mut Graph<'_>, NodeId) -> NodeId,
) {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let store = ParamStore::new();
    let eval = |x: &Tensor, r: Option<&Tensor>| -> (f64, Tensor, Option<Tensor>) {
        let mut g = Graph::new(&store, true);
        let xv = g.variable(x.clone());
        let y = f(&mut g, xv);
        let r = r.cloned().unwrap_or_else(|| {
            let mut rr = StdRng::seed_from_u64(seed + 1);
            random(g.value(y).shape(), &mut rr)
        });
        let rn = g.input(r.clone());
        let prod = g.mul(y, rn).unwrap();
        let loss = g.sum(prod);
        let val: f64 = g
            .value(y)
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let grads = g.backward(loss).unwrap();
        (val, r, grads.node(xv).cloned())
    };
    let (_, r, analytic) = eval(&x, None);
    let analytic = analytic.expect("input gradient");
    let h = 2e-3f32;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&xp, Some(&r)).0 - eval(&xm, Some(&r)).0) / (2.0 * h as f64);
        let an = analytic.data()[i] as f64;
        let tol = 2e-2 * (1.0 + fd.abs());
        assert!((fd - an).abs() <= tol, "element {i}: finite diff {fd}, analytic {an}");
    }
}

#[test]
fn conv2d_same_padding_input_gradient() {
    let mut rng = StdRng::seed_from_u64(3);
    let w = random(&[3, 2, 3, 3], &mut rng);
    check_input_grad(&[2, 2, 4, 5], 10, move |g, x| {
        let wn = g.input(w.clone());
        g.conv2d(x, wn, None, 1, 1).unwrap()
    });
}

#[test]
fn strided_conv_input_gradient() {
    let mut rng = StdRng::seed_from_u64(4);
    let w = random(&[2, 3, 3, 3], &mut rng);
    check_input_grad(&[1, 3, 6, 6], 11, move |g, x| {
        let wn = g.input(w.clone());
        g.conv2d(x, wn, None, 2, 1).unwrap()
    });
}

#[test]
fn conv_transpose_input_gradient() {
    let mut rng = StdRng::seed_from_u64(5);
    let w = random(&[3, 2, 2, 2], &mut rng);
    check_input_grad(&[2, 3, 3, 2], 12, move |g, x| {
        let wn = g.input(w.clone());
        g.conv_transpose2d(x, wn, None, 2, 0).unwrap()
    });
}

#[test]
fn elementwise_and_pooling_gradients() {
    check_input_grad(&[2, 3, 4, 4], 13, |g, x| g.sigmoid(x));
    check_input_grad(&[2, 3, 4, 4], 14, |g, x| g.max_pool2(x).unwrap());
    check_input_grad(&[2, 3, 4, 4], 15, |g, x| g.global_avg_pool(x).unwrap());
    check_input_grad(&[1, 8, 2, 3], 16, |g, x| g.pixel_shuffle(x, 2).unwrap());
    check_input_grad(&[2, 3, 2, 2], 17, |g, x| g.softmax_channels(x).unwrap());
    check_input_grad(&[2, 2, 3, 3], 18, |g, x| {
        let pooled = g.global_avg_pool(x).unwrap();
        let gate = g.sigmoid(pooled);
        g.mul(x, gate).unwrap()
    });
    check_input_grad(&[2, 2, 3, 3], 19, |g, x| {
        let a = g.scale(x, 0.5);
        let cat = g.concat(&[x, a]).unwrap();
        let bias = g.global_avg_pool(cat).unwrap();
        g.add(cat, bias).unwrap()
    });
}

#[test]
fn parameter_gradients_match_finite_differences() {
    // conv -> batch norm (train) -> relu -> 1x1 conv with bias -> softmax.
    let mut rng = StdRng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(&[3, 2, 3, 3], &mut rng), ParamKind::Trainable).unwrap();
    let gamma = store.add("bn.weight", Tensor::full(&[3], 1.2), ParamKind::Trainable).unwrap();
    let beta = store.add("bn.bias", Tensor::full(&[3], 0.1), ParamKind::Trainable).unwrap();
    let rm = store.add("bn.running_mean", Tensor::zeros(&[3]), ParamKind::Buffer).unwrap();
    let rv = store.add("bn.running_var", Tensor::full(&[3], 1.0), ParamKind::Buffer).unwrap();
    let w2 = store.add("w2", random(&[2, 3, 1, 1], &mut rng), ParamKind::Trainable).unwrap();
    let b2 = store.add("b2", random(&[2], &mut rng), ParamKind::Trainable).unwrap();
    let wt = store.add("wt", random(&[2, 2, 2, 2], &mut rng), ParamKind::Trainable).unwrap();
    let x = random(&[2, 2, 4, 4], &mut rng);
    let r = random(&[2, 2, 8, 8], &mut rng);

    let loss_of = |store: &ParamStore| -> (f64, footprint_grad::Gradients) {
        let mut g = Graph::new(store, true);
        let xn = g.input(x.clone());
        let w1n = g.param(w1);
        let c = g.conv2d(xn, w1n, None, 1, 1).unwrap();
        let bn = g.batch_norm(c, gamma, beta, rm, rv, 0.1).unwrap();
        let a = g.relu(bn);
        let w2n = g.param(w2);
        let b2n = g.param(b2);
        let h = g.conv2d(a, w2n, Some(b2n), 1, 0).unwrap();
        let wtn = g.param(wt);
        let up = g.conv_transpose2d(h, wtn, None, 2, 0).unwrap();
        let p = g.softmax_channels(up).unwrap();
        let rn = g.input(r.clone());
        let m = g.mul(p, rn).unwrap();
        let l = g.sum(m);
        let v = g.value(l).data()[0] as f64;
        (v, g.backward(l).unwrap())
    };
    let (_, grads) = loss_of(&store);
    let h = 2e-3f32;
    for id in [w1, gamma, beta, w2, b2, wt] {
        let analytic = grads.param(id).expect("gradient").clone();
        for i in 0..analytic.len() {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[i] -= h;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!(
                (fd - an).abs() <= 2e-2 * (1.0 + fd.abs()),
                "{} [{i}]: fd {fd} vs analytic {an}",
                store.get(id).name
            );
        }
    }
}

#[test]
fn pixel_shuffle_definition_and_inverse() {
    let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    let mut rng = StdRng::seed_from_u64(1);
    let z = random(&[2, 8, 3, 3], &mut rng);
    assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, 2).unwrap(), 2).unwrap(), z);
    assert!(pixel_shuffle(&z, 3).is_err());
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let mut store = ParamStore::new();
    let gamma = store.add("g", Tensor::full(&[1], 2.0), ParamKind::Trainable).unwrap();
    let beta = store.add("b", Tensor::full(&[1], 1.0), ParamKind::Trainable).unwrap();
    let rm = store.add("rm", Tensor::full(&[1], 3.0), ParamKind::Buffer).unwrap();
    let rv = store.add("rv", Tensor::full(&[1], 4.0 - 1e-5), ParamKind::Buffer).unwrap();
    let mut g = Graph::new(&store, false);
    let x = g.input(Tensor::new(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
    let y = g.batch_norm(x, gamma, beta, rm, rv, 0.1).unwrap();
    let out = g.value(y).data().to_vec();
    assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] - 3.0).abs() < 1e-5, "{out:?}");
    assert!(g.into_buffer_updates().is_empty());
}

#[test]
fn dropout_is_identity_in_eval_and_scales_in_train() {
    let store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(0);
    let t = Tensor::full(&[1, 1, 20, 20], 1.0);
    let mut g = Graph::new(&store, false);
    let x = g.input(t.clone());
    let y = g.dropout(x, 0.5, &mut rng).unwrap();
    assert_eq!(g.value(y), &t);
    let mut g = Graph::new(&store, true);
    let x = g.input(t);
    let y = g.dropout(x, 0.5, &mut rng).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((120..280).contains(&kept), "kept {kept}");
}
