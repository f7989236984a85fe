//! Finite-difference gradient checks for every differentiable op.
//!
//! Each case builds a scalar loss from parameters, compares analytic grads
//! against central differences (h = 1e-5) in f64, and requires relative error
//! below 1e-4 on every coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seas_tensor::{Graph, NodeId, ParamStore, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    // Box-Muller keeps this independient of rand_distr
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Weighted sum against a fixed pattern so every output coordinate matters.
fn spread_loss(g: &mut Graph, y: NodeId) -> NodeId {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 2654435761) % 97) as f64 / 97.0).collect();
    let shape = g.value(y).shape().to_vec();
    let wn = g.input(Tensor::new(shape, w));
    let p = g.mul(y, wn);
    g.sum_all(p)
}

fn check(store: &mut ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> NodeId) {
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    assert_eq!(g.value(loss).numel(), 1);
    g.backward(loss, store);
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, store);
        g.value(l).item()
    };

    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + H;
            let lp = eval(store);
            store.value_mut(id)[i] = orig - H;
            let lm = eval(store);
            store.value_mut(id)[i] = orig;
            let fd = (lp - lm) / (2.0 * H);
            let a = analytic[id.0][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "param '{}'[{}]: analytic {} vs fd {} (rel {})",
                store.name(id),
                i,
                a,
                fd,
                rel
            );
        }
    }
}

fn param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, scale: f64) -> seas_tensor::ParamId {
    let n: usize = shape.iter().product();
    let data = randn(rng, n, scale);
    store.add(name, shape, data, true)
}

#[test]
fn grad_add_scaled_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = param(&mut store, &mut rng, "a", vec![3, 4], 1.0);
    let b = param(&mut store, &mut rng, "b", vec![3, 4], 1.0);
    check(&mut store, &|g, s| {
        let an = g.param(s, a);
        let bn = g.param(s, b);
        let y = g.add_scaled(an, bn, -0.7);
        let y = g.affine(y, 1.3, 0.2);
        spread_loss(g, y)
    });
}

#[test]
fn grad_mul_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = param(&mut store, &mut rng, "a", vec![2, 5], 1.0);
    let b = param(&mut store, &mut rng, "b", vec![2, 5], 1.0);
    check(&mut store, &|g, s| {
        let an = g.param(s, a);
        let bn = g.param(s, b);
        let p = g.mul(an, bn);
        let q = g.square(p);
        spread_loss(g, q)
    });
}

#[test]
fn grad_channel_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 4, 3, 3], 1.0);
    let b = param(&mut store, &mut rng, "b", vec![4], 1.0);
    let sb = param(&mut store, &mut rng, "sb", vec![2, 4], 1.0);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let bn = g.param(s, b);
        let sn = g.param(s, sb);
        let y = g.add_chan_bias(xn, bn);
        let y = g.add_sample_chan(y, sn);
        let y = g.scale_per_sample(y, vec![0.5, -1.2]);
        spread_loss(g, y)
    });
}

#[test]
fn grad_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 3, 5], 1.0);
    let w = param(&mut store, &mut rng, "w", vec![4, 5], 0.5);
    let b = param(&mut store, &mut rng, "b", vec![4], 0.5);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let wn = g.param(s, w);
        let bn = g.param(s, b);
        let y = g.linear(xn, wn, Some(bn));
        spread_loss(g, y)
    });
}

#[test]
fn grad_bmm_both() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = param(&mut store, &mut rng, "a", vec![3, 2, 4], 0.7);
    let b = param(&mut store, &mut rng, "b", vec![3, 4, 5], 0.7);
    let c = param(&mut store, &mut rng, "c", vec![3, 5, 4], 0.7);
    check(&mut store, &|g, s| {
        let an = g.param(s, a);
        let bn = g.param(s, b);
        let y = g.bmm(an, bn);
        spread_loss(g, y)
    });
    check(&mut store, &|g, s| {
        let an = g.param(s, a);
        let cn = g.param(s, c);
        let y = g.bmm_trans_b(an, cn);
        spread_loss(g, y)
    });
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 3, 5, 5], 0.8);
    let w = param(&mut store, &mut rng, "w", vec![4, 3, 3, 3], 0.4);
    let b = param(&mut store, &mut rng, "b", vec![4], 0.4);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let wn = g.param(s, w);
        let bn = g.param(s, b);
        let y = g.conv2d(xn, wn, Some(bn), 1, 1);
        spread_loss(g, y)
    });
}

#[test]
fn grad_conv2d_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![1, 2, 6, 6], 0.8);
    let w = param(&mut store, &mut rng, "w", vec![3, 2, 3, 3], 0.4);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let wn = g.param(s, w);
        let y = g.conv2d(xn, wn, None, 2, 1);
        spread_loss(g, y)
    });
}

#[test]
fn grad_conv2d_1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 4, 3, 3], 0.8);
    let w = param(&mut store, &mut rng, "w", vec![2, 4, 1, 1], 0.5);
    let b = param(&mut store, &mut rng, "b", vec![2], 0.5);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let wn = g.param(s, w);
        let bn = g.param(s, b);
        let y = g.conv2d(xn, wn, Some(bn), 1, 0);
        spread_loss(g, y)
    });
}

#[test]
fn grad_group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 4, 3, 3], 1.0);
    let gm = param(&mut store, &mut rng, "gamma", vec![4], 0.5);
    let bt = param(&mut store, &mut rng, "beta", vec![4], 0.5);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let gn = g.param(s, gm);
        let bn = g.param(s, bt);
        let y = g.group_norm(xn, gn, bn, 2, 1e-5);
        spread_loss(g, y)
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![3, 6], 1.0);
    let gm = param(&mut store, &mut rng, "gamma", vec![6], 0.5);
    let bt = param(&mut store, &mut rng, "beta", vec![6], 0.5);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let gn = g.param(s, gm);
        let bn = g.param(s, bt);
        let y = g.layer_norm(xn, gn, bn, 1e-5);
        spread_loss(g, y)
    });
}

#[test]
fn grad_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    // keep relu inputs away from the kink
    let data: Vec<f64> = randn(&mut rng, 12, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
        .collect();
    let x = store.add("x", vec![3, 4], data, true);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.silu(xn);
        spread_loss(g, y)
    });
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.relu(xn);
        spread_loss(g, y)
    });
}

#[test]
fn grad_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 3, 5], 1.5);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.softmax_last(xn);
        spread_loss(g, y)
    });
}

#[test]
fn grad_log_pow() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let data: Vec<f64> = randn(&mut rng, 10, 0.3).into_iter().map(|v| 0.2 + v.abs()).collect();
    let x = store.add("x", vec![10], data, true);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.log_clamped(xn, 1e-12);
        spread_loss(g, y)
    });
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.pow_const(xn, 2.0);
        spread_loss(g, y)
    });
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.pow_const(xn, 3.0);
        spread_loss(g, y)
    });
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 3, 4], 1.0);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.permute(xn, vec![2, 0, 1]);
        let y = g.reshape(y, vec![4, 6]);
        spread_loss(g, y)
    });
}

#[test]
fn grad_concat_select() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let a = param(&mut store, &mut rng, "a", vec![2, 2, 3], 1.0);
    let b = param(&mut store, &mut rng, "b", vec![2, 3, 3], 1.0);
    check(&mut store, &|g, s| {
        let an = g.param(s, a);
        let bn = g.param(s, b);
        let y = g.concat(1, &[an, bn]);
        let y = g.select_last(y, vec![2, 0, 2]);
        spread_loss(g, y)
    });
}

#[test]
fn grad_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![1, 2, 4, 4], 1.0);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.upsample_nearest2x(xn);
        spread_loss(g, y)
    });
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.avg_pool2d(xn, 2);
        spread_loss(g, y)
    });
}

#[test]
fn grad_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", vec![2, 3, 4], 1.0);
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.square(xn);
        g.mean_all(y)
    });
    check(&mut store, &|g, s| {
        let xn = g.param(s, x);
        let y = g.mean_axis(xn, 1);
        spread_loss(g, y)
    });
}

#[test]
fn grad_gather_rows_with_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut store = ParamStore::new();
    let t = param(&mut store, &mut rng, "table", vec![5, 3], 1.0);
    check(&mut store, &|g, s| {
        let tn = g.param(s, t);
        let y = g.gather_rows(tn, vec![1, 3, 1, 0]);
        spread_loss(g, y)
    });
}

#[test]
fn frozen_params_get_no_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let a = param(&mut store, &mut rng, "a", vec![2, 2], 1.0);
    let b = param(&mut store, &mut rng, "b", vec![2, 2], 1.0);
    store.set_trainable(b, false);
    let mut g = Graph::new();
    let an = g.param(&store, a);
    let bn = g.param(&store, b);
    let y = g.mul(an, bn);
    let l = g.sum_all(y);
    g.backward(l, &mut store);
    assert!(store.grad(a).iter().any(|&v| v != 0.0));
    assert!(store.grad(b).iter().all(|&v| v == 0.0));
}

#[test]
fn forward_values_sane() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let up = g.upsample_nearest2x(x);
    assert_eq!(g.value(up).shape(), &[1, 1, 4, 4]);
    assert_eq!(g.value(up).data()[0], 1.0);
    assert_eq!(g.value(up).data()[3], 2.0);
    let down = g.avg_pool2d(up, 2);
    assert_eq!(g.value(down).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sm = g.input(Tensor::new(vec![1, 2], vec![2.0f64.ln(), 0.0]));
    let p = g.softmax_last(sm);
    let v = g.value(p).data().to_vec();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);

    let pm = g.input(Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    let pt = g.permute(pm, vec![1, 0]);
    assert_eq!(g.value(pt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}
