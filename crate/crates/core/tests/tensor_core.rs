mod common;

use aaw_core::graph::Graph;
use aaw_core::kernels::{conv2d_forward, ConvSpec};
use aaw_core::{Error, ParamStore, Shape4, Tensor4};
use common::cases::{block_cases, grad_check_layer, op_cases};
use common::{grad_check, naive_conv2d, rand_tensor, rng};
use proptest::prelude::*;

fn rel_close(a: &Tensor4, b: &Tensor4, tol: f64) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

#[test]
fn box_sum_counts() {
    let x = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
    let w = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
    let y = conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap();
    assert_eq!(y.at(0, 0, 1, 1), 9.0);
    assert_eq!(y.at(0, 0, 0, 0), 4.0);
    assert_eq!(y.at(0, 0, 2, 2), 4.0);
    assert_eq!(y.at(0, 0, 0, 1), 6.0);
}

#[test]
fn one_by_one_identity_kernel() {
    let x = rand_tensor(Shape4::new(2, 1, 4, 5), &mut rng(1));
    let w = Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0);
    let y = conv2d_forward(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng(2);
    let x = rand_tensor(Shape4::new(1, 2, 5, 5), &mut r);
    let w = rand_tensor(Shape4::new(3, 2, 3, 3), &mut r);
    let y = conv2d_forward(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
    assert!(rel_close(&y, &naive_conv2d(&x, &w, None, 1, 0, 1), 1e-6));
}

#[test]
fn depthwise_conv_matches_oracle() {
    let mut r = rng(3);
    let x = rand_tensor(Shape4::new(2, 3, 6, 6), &mut r);
    let w = rand_tensor(Shape4::new(3, 1, 3, 3), &mut r);
    let b = [0.1, -0.2, 0.3];
    let y = conv2d_forward(&x, &w, Some(&b), ConvSpec::new(2, 1, 3)).unwrap();
    assert!(rel_close(&y, &naive_conv2d(&x, &w, Some(&b), 2, 1, 3), 1e-6));
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let x = Tensor4::zeros(Shape4::new(1, 3, 5, 5));
    let even = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
    let msg = conv2d_forward(&x, &even, None, ConvSpec::new(1, 0, 1)).unwrap_err().to_string();
    assert!(msg.contains("odd"), "{msg}");
    let wrong_cin = Tensor4::zeros(Shape4::new(1, 2, 3, 3));
    let msg = conv2d_forward(&x, &wrong_cin, None, ConvSpec::new(1, 1, 1)).unwrap_err().to_string();
    assert!(msg.contains("input channels"), "{msg}");
    let w = Tensor4::zeros(Shape4::new(1, 3, 3, 3));
    let msg = conv2d_forward(&x, &w, None, ConvSpec::new(3, 1, 1)).unwrap_err().to_string();
    assert!(msg.contains("stride"), "{msg}");
    let msg = conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 2)).unwrap_err().to_string();
    assert!(msg.contains("groups"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_equals_naive_on_small_shapes(
        n in 1usize..=3, cin in 1usize..=5, cout in 1usize..=5,
        h in 1usize..=5, w in 1usize..=5, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = rand_tensor(Shape4::new(n, cin, h, w), &mut r);
        let wt = rand_tensor(Shape4::new(cout, cin, k, k), &mut r);
        let y = conv2d_forward(&x, &wt, None, ConvSpec::new(stride, pad, 1)).unwrap();
        prop_assert!(rel_close(&y, &naive_conv2d(&x, &wt, None, stride, pad, 1), 1e-6));
    }

    #[test]
    fn forward_ops_are_pure(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = rand_tensor(Shape4::new(1, 3, 5, 5), &mut r);
        let w = rand_tensor(Shape4::new(2, 3, 3, 3), &mut r);
        let a = conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap();
        let b = conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

#[test]
fn silu_values() {
    let mut g = Graph::new();
    let x = g.input(Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![0.0, 20.0, 1.0]).unwrap());
    let y = g.silu(x);
    let v = g.value(y).data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 20.0).abs() < 1e-6);
    assert!((v[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let one = g.input(Tensor4::full(Shape4::new(1, 1, 1, 1), 5.0));
    let u = g.upsample2x(one);
    assert_eq!(g.value(u), &Tensor4::full(Shape4::new(1, 1, 2, 2), 5.0));

    let x = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng(4));
    let xv = g.input(x.clone());
    let u = g.upsample2x(xv);
    let up = g.value(u);
    assert_eq!(up.shape(), Shape4::new(1, 3, 8, 8));
    let back = Tensor4::from_fn(x.shape(), |n, c, y, xx| up.at(n, c, 2 * y, 2 * xx));
    assert_eq!(back, x);
    for y in 0..8 {
        for xx in 0..8 {
            assert_eq!(up.at(0, 1, y, xx), x.at(0, 1, y / 2, xx / 2));
        }
    }
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut r = rng(5);
    let a = rand_tensor(Shape4::new(1, 2, 2, 2), &mut r);
    let b = rand_tensor(Shape4::new(1, 3, 2, 2), &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.concat_channels(&[av, bv]).unwrap();
    assert_eq!(g.shape(c), Shape4::new(1, 5, 2, 2));
    let sa = g.slice_channels(c, 0, 2).unwrap();
    let sb = g.slice_channels(c, 2, 5).unwrap();
    assert_eq!(g.value(sa), &a);
    assert_eq!(g.value(sb), &b);
    let single = g.concat_channels(&[av]).unwrap();
    assert_eq!(g.value(single), &a);
    let odd = g.input(Tensor4::zeros(Shape4::new(1, 1, 3, 2)));
    assert!(matches!(g.concat_channels(&[av, odd]), Err(Error::Shape { .. })));
}

#[test]
fn linear_loss_gradient_is_input() {
    let mut r = rng(6);
    let x = rand_tensor(Shape4::new(1, 2, 3, 3), &mut r);
    let mut g = Graph::new();
    let w = g.variable(rand_tensor(x.shape(), &mut r));
    let xv = g.input(x.clone());
    let m = g.mul(w, xv).unwrap();
    let loss = g.sum(m);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), x.data());
    assert!(grads.get(xv).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor4::zeros(Shape4::new(1, 2, 1, 1)));
    let y = g.silu(x);
    assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
}

#[test]
fn disjoint_graphs_keep_separate_gradients() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor4::full(Shape4::new(1, 1, 1, 2), 1.0), true).unwrap();
    let b = store.add("b", Tensor4::full(Shape4::new(1, 1, 1, 2), 1.0), true).unwrap();
    let frozen = store.add("c", Tensor4::full(Shape4::new(1, 1, 1, 2), 1.0), false).unwrap();

    let mut g1 = Graph::new();
    let av = g1.param(&store, a);
    let cv = g1.param(&store, frozen);
    let s = g1.mul(av, cv).unwrap();
    let l1 = g1.sum(s);
    let mut g2 = Graph::new();
    let bv = g2.param(&store, b);
    let t = g2.scale(bv, 3.0);
    let l2 = g2.sum(t);

    g1.backward_into(l1, &mut store).unwrap();
    assert_eq!(store.get(a).value.grad.as_deref(), Some(&[1.0, 1.0][..]));
    assert!(store.get(b).value.grad.is_none());
    assert!(store.get(frozen).value.grad.is_none());
    g2.backward_into(l2, &mut store).unwrap();
    assert_eq!(store.get(b).value.grad.as_deref(), Some(&[3.0, 3.0][..]));
    assert_eq!(store.get(a).value.grad.as_deref(), Some(&[1.0, 1.0][..]));
}

#[test]
fn every_op_passes_finite_differences() {
    for (i, c) in op_cases().iter().enumerate() {
        let r = grad_check(&c.inputs, &c.f, 10, 100 + i as u64);
        assert!(r.checked > 0, "{}: nothing checked", c.name);
        assert!(r.worst < 1e-3, "{}: worst relative error {}", c.name, r.worst);
    }
}

#[test]
fn every_block_passes_finite_differences() {
    for (i, c) in block_cases().iter().enumerate() {
        let r = grad_check_layer(c, 10, 200 + i as u64);
        assert!(r.checked > 0, "{}: nothing checked", c.name);
        assert!(r.worst < 1e-3, "{}: worst relative error {}", c.name, r.worst);
    }
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(7);
    store.add("x.weight", rand_tensor(Shape4::new(2, 3, 3, 3), &mut r), true).unwrap();
    store.add("x.frozen", rand_tensor(Shape4::new(1, 4, 1, 1), &mut r), false).unwrap();
    let path = dir.path().join("m.ckpt");
    store.save(&path, &[("variant", "aaw")]).unwrap();
    let (back, meta) = ParamStore::load(&path).unwrap();
    assert_eq!(meta, vec![("variant".to_string(), "aaw".to_string())]);
    for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.trainable, b.trainable);
        // storage is 32-bit
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let msg = ParamStore::load(&path).unwrap_err().to_string();
    assert!(msg.contains("m.ckpt"), "{msg}");
}

#[test]
fn duplicate_param_ids_rejected() {
    let mut store = ParamStore::new();
    store.add("w", Tensor4::scalar(1.0), true).unwrap();
    assert!(store.add("w", Tensor4::scalar(2.0), true).is_err());
}
