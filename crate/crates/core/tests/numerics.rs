mod common;

use daefusion_core::numerics::gradcheck::relative_error;
use daefusion_core::numerics::rng::{normal, rng};
use daefusion_core::numerics::{grad_check, GradCheckOptions, Tape, Tensor};
use daefusion_core::Error;
use proptest::prelude::*;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

#[test]
fn matmul_fixtures() {
    let tape = Tape::new();
    let m = tape.constant(t(&[&[1.5, -2.0], &[0.25, 4.0]]));
    let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    assert_eq!(eye.matmul(m).unwrap().value(), m.value());

    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = tape.constant(t(&[&[1.0], &[1.0]]));
    assert_eq!(a.matmul(ones).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a: Tensor<f64> = normal(&mut r, &[5, 3], 1.0);
    let b: Tensor<f64> = normal(&mut r, &[3, 4], 1.0);
    let tape = Tape::new();
    let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
    let want = common::matmul(&common::to_mat(&a), &common::to_mat(&b));
    assert!(common::max_abs_diff(&common::to_mat(&got), &want) <= 1e-12);
}

#[test]
fn matmul_inner_mismatch_is_a_dimension_error() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_fixtures() {
    let tape = Tape::new();
    let uniform = tape.constant(vec_t(&[0.0, 0.0, 0.0])).softmax(0).unwrap().value();
    for &v in uniform.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = tape.constant(vec_t(&[1.0, 2.0, 3.0])).softmax(0).unwrap().value();
    let want = common::softmax(&[1.0, 2.0, 3.0]);
    for ((&g, w), printed) in y.data().iter().zip(&want).zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((g - w).abs() < 1e-15);
        assert!((g - printed).abs() < 5e-9);
    }
}

#[test]
fn softmax_axis_out_of_range_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(x.softmax(2), Err(Error::Axis { .. })));
}

#[test]
fn l2_normalize_fixtures() {
    let tape = Tape::new();
    let y = tape.constant(vec_t(&[3.0, 4.0])).l2_normalize(0, 1e-12).unwrap().value();
    assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    let z = tape.constant(vec_t(&[0.0, 0.0, 0.0])).l2_normalize(0, 1e-12).unwrap().value();
    assert!(z.data().iter().all(|&v| v == 0.0));

    let x: Tensor<f64> = normal(&mut rng(4), &[4, 6], 1.0);
    let y = tape.constant(x).l2_normalize(0, 1e-12).unwrap().value();
    for c in 0..6 {
        let norm: f64 = (0..4).map(|r| y.at(&[r, c]).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_fixtures() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(vec![2]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let constant = tape.constant(t(&[&[5.0, 5.0]])).layer_norm(g, b, 1e-6).unwrap().value();
    assert!(constant.data().iter().all(|&v| v == 0.0));
    let two = tape.constant(t(&[&[1.0, 3.0]])).layer_norm(g, b, 0.0).unwrap().value();
    assert_eq!(two.data(), &[-1.0, 1.0]);

    let x: Tensor<f64> = normal(&mut rng(5), &[3, 8], 2.0);
    let g8 = tape.constant(Tensor::ones(vec![8]));
    let b8 = tape.constant(Tensor::zeros(vec![8]));
    let y = tape.constant(x.clone()).layer_norm(g8, b8, 1e-6).unwrap().value();
    for r in 0..3 {
        let row = &y.data()[r * 8..(r + 1) * 8];
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-7);
        assert!((var - 1.0).abs() <= 1e-5);
        let want = common::layer_norm_row(&x.data()[r * 8..(r + 1) * 8], 1e-6);
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_fixtures() {
    let tape = Tape::new();
    let y = tape.constant(vec_t(&[0.0, 1.0, 30.0, -30.0])).gelu().unwrap().value();
    assert_eq!(y.data()[0], 0.0);
    // Phi(1) = (1 + erf(1 / sqrt 2)) / 2
    assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    assert!((y.data()[1] - 0.8413447).abs() < 1e-7);
    assert!((y.data()[2] - 30.0).abs() < 1e-12);
    assert!(y.data()[3].abs() < 1e-12);
}

#[test]
fn grad_check_quadratic() {
    let x: Tensor<f64> = normal(&mut rng(1), &[3, 4], 1.0);
    let r = grad_check(|_, v| v[0].mul(v[0])?.sum(), &[x], &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error <= 1e-8, "{r:?}");
}

#[test]
fn grad_check_softmax_then_dot() {
    let mut r = rng(2);
    let x: Tensor<f64> = normal(&mut r, &[2, 5], 1.0);
    let w: Tensor<f64> = normal(&mut r, &[2, 5], 1.0);
    let report = grad_check(
        move |tape, v| v[0].softmax(1)?.mul(tape.constant(w.clone()))?.sum(),
        &[x],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn grad_check_reports_non_finite_evaluation() {
    let x = vec_t(&[1.0, 2.0]);
    // 0 * ln(0) style blow-up: log of a negative shift
    let err = grad_check(|_, v| v[0].add_scalar(-10.0)?.log()?.sum(), &[x], &GradCheckOptions::default());
    assert!(matches!(err, Err(Error::NonFinite { .. })));
}

#[test]
fn relative_error_clamps_denominator() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
}

#[test]
fn reusing_a_leaf_doubles_its_gradient() {
    let x: Tensor<f64> = normal(&mut rng(3), &[2, 3], 1.0);
    let tape = Tape::new();
    let once = tape.param(x.clone());
    let g1 = tape.backward(once.gelu().unwrap().sum().unwrap()).unwrap();
    let tape2 = Tape::new();
    let twice = tape2.param(x);
    let y = twice.gelu().unwrap().sum().unwrap().add(twice.gelu().unwrap().sum().unwrap()).unwrap();
    let g2 = tape2.backward(y).unwrap();
    for (a, b) in g1.get(once).unwrap().data().iter().zip(g2.get(twice).unwrap().data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    let tape = Tape::new();
    let x = tape.constant(vec_t(&[0.0]));
    assert!(matches!(x.log(), Err(Error::NonFinite { .. })));
}

#[test]
fn fixture_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.txt");
    let x: Tensor<f64> = normal(&mut rng(8), &[2, 3, 2], 1.0);
    x.write_fixture(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "2 3 2");
    assert_eq!(Tensor::<f64>::read_fixture(&path).unwrap(), x);
}

#[test]
fn f32_and_f64_agree_on_a_small_product() {
    let a64: Tensor<f64> = normal(&mut rng(9), &[3, 4], 1.0);
    let a32 = Tensor::<f32>::new(vec![3, 4], a64.data().iter().map(|&v| v as f32).collect()).unwrap();
    let t64 = Tape::new();
    let t32 = Tape::new();
    let y64 = t64.constant(a64.clone()).matmul_t(t64.constant(a64), false, true).unwrap().softmax(1).unwrap().value();
    let y32 = t32.constant(a32.clone()).matmul_t(t32.constant(a32), false, true).unwrap().softmax(1).unwrap().value();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0f64..5.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_slices_are_distributions((r, c, data) in matrix(8), axis in 0usize..2) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(vec![r, c], data).unwrap()).softmax(axis).unwrap().value();
        let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
        for o in 0..outer {
            let s: f64 = (0..inner).map(|i| if axis == 1 { y.at(&[o, i]) } else { y.at(&[i, o]) }).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant((r, c, data) in matrix(6), shift in -50.0f64..50.0) {
        let tape = Tape::new();
        let x = Tensor::new(vec![r, c], data).unwrap();
        let y = tape.constant(x.clone()).softmax(1).unwrap().value();
        let z = tape.constant(x).add_scalar(shift).unwrap().softmax(1).unwrap().value();
        prop_assert!(y.max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn matmul_bitwise_equals_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a: Tensor<f64> = normal(&mut r, &[m, k], 1.0);
        let b: Tensor<f64> = normal(&mut r, &[k, n], 1.0);
        let tape = Tape::new();
        let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        let want = common::matmul(&common::to_mat(&a), &common::to_mat(&b));
        prop_assert_eq!(common::to_mat(&got), want);
    }

    #[test]
    fn transposed_products_match_the_oracle(m in 1usize..=12, k in 1usize..=12, n in 1usize..=12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let at: Tensor<f64> = normal(&mut r, &[k, m], 1.0);
        let bt: Tensor<f64> = normal(&mut r, &[n, k], 1.0);
        let tape = Tape::new();
        let got = tape.constant(at.clone()).matmul_t(tape.constant(bt.clone()), true, true).unwrap().value();
        let want = common::matmul(&common::transpose(&common::to_mat(&at)), &common::transpose(&common::to_mat(&bt)));
        prop_assert_eq!(common::to_mat(&got), want);
    }
}

#[test]
fn op_gradients_hold_for_twenty_seeds() {
    for seed in 0..20 {
        let results = daefusion_core::verify::gradient_suite(
            daefusion_core::verify::Scope::Op,
            &daefusion_core::verify::SuiteOptions { seed, corrupt: false },
        )
        .unwrap();
        for r in results {
            assert!(r.passed(), "seed {seed}: {} failed: {:?}", r.name, r.report);
        }
    }
}
