mod common;

use common::{end_to_end_gradcheck, op_suite};

const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in op_suite(seed) {
            assert!(err < OP_TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn generator_loss_gradient_over_continual_params() {
    for seed in 0..3 {
        let err = end_to_end_gradcheck(seed);
        assert!(err < E2E_TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut t = csg0_core::Tape::new();
    let x = t.leaf(
        csg0_core::Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_requires_grad(true),
    );
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut t = csg0_core::Tape::new();
    let x = t.leaf(
        csg0_core::Tensor::new(&[2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn composed_conv_relu_sum() {
    use common::{gradcheck, randn};
    for seed in 0..3 {
        let err = gradcheck(
            &[randn(&[1, 2, 5, 5], seed), randn(&[2, 2, 3, 3], seed + 10)],
            seed,
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 1)?;
                let r = t.relu(c)?;
                t.sum(r)
            },
        );
        assert!(err < OP_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = csg0_core::Tape::new();
    let x = t.leaf(csg0_core::Tensor::full(&[3], 2.0).with_requires_grad(true));
    let c = t.constant(csg0_core::Tensor::full(&[3], 5.0));
    let p = t.mul(x, c).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[5.0; 3]);
    assert!(t.grad(c).is_none());
}
