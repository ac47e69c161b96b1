use cascadeseg::geometry::SegMask;
use cascadeseg::tensor::{bilinear_filter, Graph, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn pad_edge_repeats_borders() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = g.pad_edge(x, 1).unwrap();
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).shape(), &[1, 4, 4]);
    assert_eq!(g.value(y).data(), &expected);
    // each source pixel is copied to four outputs
    let loss = g.dot(y, &Tensor::filled(&[1, 4, 4], 1.0)).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn padded_bilinear_upsampling_keeps_constants() {
    for (k, stride) in [(4, 2), (8, 4), (16, 8)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 5, 5], 0.7));
        let w = g.constant(bilinear_filter::<f64>(k, 2));
        let p = g.pad_edge(x, 1).unwrap();
        let y = g.conv_transpose2d(p, w, stride, k / 4 + stride).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5 * stride, 5 * stride]);
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12), "k={k}");
    }
}

#[test]
fn shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
    let b = g.constant(Tensor::zeros(&[5]));
    let w3 = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(g.conv2d(x, w3, Some(b), 1, 1).is_err());
    let small = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(g.crop_add(x, small).is_err());
    assert!(g.sigmoid_ce_loss(x, &Tensor::filled(&[3, 4, 4], 1.5), 1.0).is_err());
    assert!(g.sigmoid_ce_loss(x, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    let labels = SegMask::new(4, 4, vec![3; 16]).unwrap();
    assert!(g.softmax_ce_loss(x, &labels).is_err());
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 1, 2], &[1.0, -1.0]));
    let b = g.leaf(t(&[1, 1, 2], &[0.5, 0.5]), true);
    let s = g.crop_add(a, b).unwrap();
    let loss = g.dot(s, &t(&[1, 1, 2], &[2.0, 3.0])).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_none());
    assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn softmax_loss_of_uniform_scores_is_log_classes() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::zeros(&[8, 3, 3]), true);
    let labels = SegMask::new(3, 3, (0..9).map(|i| (i % 8) as u8).collect()).unwrap();
    let loss = g.softmax_ce_loss(z, &labels).unwrap();
    assert!((g.scalar(loss) - 8f64.ln()).abs() < 1e-12);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ for the same kernel, stride and padding
    #[test]
    fn transposed_conv_is_the_adjoint(
        cin in 1usize..3, cout in 1usize..3, k in 1usize..4, stride in 1usize..3, oh in 1usize..5,
        seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let h = stride * (oh - 1) + k - 2 * pad;
        prop_assume!(h > 0);
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Tensor::from_fn(&[cin, h, h], |_| next());
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| next());
        let y = Tensor::from_fn(&[cout, oh, oh], |_| next());
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let ty = g.conv_transpose2d(yv, wv, stride, pad).unwrap();
        prop_assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(ty).data());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn relu_gradient_is_a_mask(values in proptest::collection::vec(-3.0f64..3.0, 1..30)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, n], values.clone()).unwrap(), true);
        let y = g.relu(x);
        let loss = g.dot(y, &Tensor::filled(&[1, 1, n], 1.0)).unwrap();
        g.backward(loss).unwrap();
        for (v, d) in values.iter().zip(g.grad(x).unwrap().data()) {
            prop_assert_eq!(*d, if *v > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn sigmoid_is_bounded(values in proptest::collection::vec(-800.0f64..800.0, 1..30)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, n], values).unwrap());
        let y = g.sigmoid(x);
        prop_assert!(g.value(y).data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}
