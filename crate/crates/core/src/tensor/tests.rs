use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::verify::{op_gradchecks, GRADCHECK_TOL};

use crate::verify::{random, weighted_sum};

#[test]
fn matmul_identity() {
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut t = Tape::new();
    let i = t.constant(Tensor::eye(2)).unwrap();
    let xv = t.constant(x.clone()).unwrap();
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn softmax_of_zero_and_ln2() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap()).unwrap();
    let y = t.softmax(x, 0).unwrap();
    let y = t.value(y).data();
    assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn conv_of_constant_with_averaging_kernel() {
    let c = 0.37;
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], c)).unwrap();
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert!((t.value(y).item() - c).abs() < 1e-15);
}

#[test]
fn conv_output_extents() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3, 32, 32])).unwrap();
    let w = t.constant(Tensor::zeros(&[5, 3, 3, 3])).unwrap();
    let y = t.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[2, 5, 16, 16]);
    let w1 = t.constant(Tensor::zeros(&[4, 3, 1, 1])).unwrap();
    let y1 = t.conv2d(x, w1, None, 1, 0).unwrap();
    assert_eq!(t.shape(y1), &[2, 4, 32, 32]);
    let bad = t.constant(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
    let err = t.conv2d(x, bad, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d") && err.contains("channels"), "{err}");
}

#[test]
fn batch_norm_of_constant_channels_is_beta() {
    let mut t = Tape::new();
    let mut x = Tensor::zeros(&[3, 2, 2, 2]);
    for n in 0..3 {
        for i in 0..2 {
            for j in 0..2 {
                x.set(&[n, 0, i, j], 4.0);
                x.set(&[n, 1, i, j], -1.5);
            }
        }
    }
    let x = t.constant(x).unwrap();
    let g = t.constant(Tensor::new(&[2], vec![2.0, 3.0]).unwrap()).unwrap();
    let b = t.constant(Tensor::new(&[2], vec![0.25, -0.75]).unwrap()).unwrap();
    let (y, stats) = t.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.0, -1.5]);
    assert_eq!(stats.var, vec![0.0, 0.0]);
    let y = t.value(y);
    for n in 0..3 {
        assert_eq!(y.at(&[n, 0, 1, 1]), 0.25);
        assert_eq!(y.at(&[n, 1, 0, 1]), -0.75);
    }
}

#[test]
fn batch_norm_single_sample_batch_is_permitted() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[1, 2], vec![3.0, -2.0]).unwrap()).unwrap();
    let g = t.constant(Tensor::ones(&[2])).unwrap();
    let b = t.constant(Tensor::zeros(&[2])).unwrap();
    let (y, _) = t.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = t.constant(Tensor::zeros(&[3, 2])).unwrap();
    let err = t.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    let err = t.narrow(a, 1, 2, 2).unwrap_err().to_string();
    assert!(err.contains("narrow"), "{err}");
}

#[test]
fn nan_fails_fast() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[2], 1e308)).unwrap();
    let err = t.mul(a, a).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { op: "mul" }));
    assert!(t.leaf(Tensor::full(&[1], f64::NAN)).is_err());
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn relu_gate_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).unwrap();
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn uniform_cross_entropy_gradient_is_softmax_minus_onehot() {
    let v = 5;
    for target in 0..v {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, v], 0.3)).unwrap();
        let l = t.cross_entropy(x, &[target], &[true]).unwrap();
        assert!((t.value(l).item() - (v as f64).ln()).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        for (j, &gj) in g.get(x).unwrap().data().iter().enumerate() {
            let expected = 0.2 - if j == target { 1.0 } else { 0.0 };
            assert!((gj - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn masked_cross_entropy_rows_contribute_nothing() {
    let mut t = Tape::new();
    let x = t
        .leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 9.0, -4.0, 0.5]).unwrap())
        .unwrap();
    let l = t.cross_entropy(x, &[2, 99], &[true, false]).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(&g.get(x).unwrap().data()[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::ones(&[3])).unwrap();
    let y = t.scale(x, 2.0).unwrap();
    assert!(t.backward(y).is_err(), "non-scalar loss");
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let err = t.backward(s).unwrap_err().to_string();
    assert!(err.contains("twice"), "{err}");

    let mut t = Tape::new();
    let c = t.constant(Tensor::ones(&[3])).unwrap();
    let s = t.sum(c).unwrap();
    assert!(t.backward(s).is_err(), "untracked loss");
}

#[test]
fn untouched_leaves_get_zero_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::ones(&[2])).unwrap();
    let b = t.leaf(Tensor::ones(&[3])).unwrap();
    let s = t.sum(a).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(b).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn parameters_accumulate_across_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let mut t = Tape::new();
    let w1 = t.param(&store, id).unwrap();
    let w2 = t.param(&store, id).unwrap();
    assert_eq!(w1, w2);
    let p = t.mul(w1, w2).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(id).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn clip_scales_to_max_norm() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let mut t = Tape::new();
    let w = t.param(&store, id).unwrap();
    let p = t.mul(w, w).unwrap();
    let s = t.sum(p).unwrap();
    let l = t.scale(s, 0.5).unwrap();
    let mut g = t.backward(l).unwrap();
    let before = g.clip_param_norm(1.0);
    assert!((before - 5.0).abs() < 1e-12);
    assert!((g.param_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x).unwrap();
        let wv = t.leaf(w).unwrap();
        let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = t.tanh(y).unwrap();
        let s = weighted_sum(&mut t, y, 3).unwrap();
        let loss = t.value(s).item();
        let g = t.backward(s).unwrap();
        (loss.to_bits(), g.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga), bits(&gb));
}

#[test]
fn every_op_passes_gradient_check() {
    let rows = op_gradchecks(2024, 5).unwrap();
    assert!(rows.len() >= 30);
    for row in rows {
        assert!(row.max_rel_error < GRADCHECK_TOL, "{row:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        axis in 0usize..3,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 3, 2], data).unwrap()).unwrap();
        let y = t.softmax(x, axis).unwrap();
        let y = t.value(y).clone();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let mut tt = Tape::new();
        let yv = tt.constant(y).unwrap();
        let m = tt.mean_axis(yv, axis).unwrap();
        let len = [2, 3, 2][axis] as f64;
        for &s in tt.value(m).data() {
            prop_assert!((s * len - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trips(
        shape in proptest::collection::vec(1usize..4, 0..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&shape, &mut rng);
        let back = Tensor::read_from(&t.to_bytes()[..]).unwrap();
        prop_assert_eq!(back, t);
    }
}
