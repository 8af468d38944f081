mod support;

use mxlb_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{gradient_error, op_cases, FD_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for (name, build) in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let case = build(&mut rng);
            worst = worst.max(gradient_error(&*case.objective, &case.inputs));
        }
        assert!(worst < FD_TOLERANCE, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn plain_sum_of_softmax_has_vanishing_gradient() {
    // rows of a softmax sum to one, so d/dx sum(softmax(Wx)) is identically zero
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::from_vec(&[3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9]).unwrap());
    let x = tape.param(Tensor::from_vec(&[2, 1], vec![1.5, -0.5]).unwrap());
    let z = tape.matmul(w, x).unwrap();
    let z = tape.reshape(z, &[1, 3]).unwrap();
    let s = tape.softmax_rows(z, None).unwrap();
    let total = tape.sum(s).unwrap();
    tape.backward(total).unwrap();
    for g in tape.grad(w).unwrap().iter().chain(tape.grad(x).unwrap()) {
        assert!(g.abs() < 1e-12);
    }
}
