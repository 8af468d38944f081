//! Central finite-difference oracle shared by the gradient and acceptance suites.
#![allow(dead_code)]

pub mod checks;

use mxlb_core::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Builds a scalar from leaves recorded on a fresh tape. Must be a pure
/// function of the leaf values.
pub type Objective<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (ReLU) are never straddled.
pub fn random_tensor_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn evaluate(f: &Objective, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
pub fn gradient_error(f: &Objective, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + FD_STEP;
            let up = evaluate(f, &probe);
            probe[t].data_mut()[i] = orig - FD_STEP;
            let down = evaluate(f, &probe);
            probe[t].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

pub struct Case {
    pub objective: Box<Objective<'static>>,
    pub inputs: Vec<Tensor<f64>>,
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape)
}

/// Reduces `x` to a scalar with fixed random weights so no gradient is trivially zero.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

pub type CaseBuilder = fn(&mut ChaCha8Rng) -> Case;

pub fn op_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
            let w = weights(rng, &[m, n]);
            Case {
                objective: Box::new(move |t, v| {
                    let c = t.matmul(v[0], v[1]).unwrap();
                    weighted_sum(t, c, &w)
                }),
                inputs: vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])],
            }
        }),
        ("batch_matmul", |rng| {
            let (g, m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let w = weights(rng, &[g, m, n]);
            Case {
                objective: Box::new(move |t, v| {
                    let c = t.batch_matmul(v[0], v[1], false).unwrap();
                    weighted_sum(t, c, &w)
                }),
                inputs: vec![random_tensor(rng, &[g, m, k]), random_tensor(rng, &[g, k, n])],
            }
        }),
        ("batch_matmul_transposed", |rng| {
            let (g, m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let w = weights(rng, &[g, m, n]);
            Case {
                objective: Box::new(move |t, v| {
                    let c = t.batch_matmul(v[0], v[1], true).unwrap();
                    weighted_sum(t, c, &w)
                }),
                inputs: vec![random_tensor(rng, &[g, m, k]), random_tensor(rng, &[g, n, k])],
            }
        }),
        ("add_broadcast", |rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let w = weights(rng, &[r, c]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.add(v[0], v[1]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[c])],
            }
        }),
        ("add_bias", |rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let w = weights(rng, &[r, c]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.add_bias(v[0], v[1]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[c])],
            }
        }),
        ("mul_broadcast", |rng| {
            let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let w = weights(rng, &[a, b, c]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.mul(v[0], v[1]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[a, b, c]), random_tensor(rng, &[b, 1])],
            }
        }),
        ("scale", |rng| {
            let n = rng.gen_range(1..8);
            let factor = rng.gen_range(-2.0..2.0);
            let w = weights(rng, &[n]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.scale(v[0], factor).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[n])],
            }
        }),
        ("relu", |rng| {
            let n = rng.gen_range(1..10);
            let w = weights(rng, &[n]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.relu(v[0]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor_away_from_zero(rng, &[n])],
            }
        }),
        ("reshape_swap_axes", |rng| {
            let d: Vec<usize> = (0..4).map(|_| rng.gen_range(1..4)).collect();
            let w = weights(rng, &[d[0], d[2], d[1], d[3]]);
            let dims = d.clone();
            Case {
                objective: Box::new(move |t, v| {
                    let r = t.reshape(v[0], &dims).unwrap();
                    let s = t.swap_axes12(r).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[d.iter().product()])],
            }
        }),
        ("softmax_rows", |rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let w = weights(rng, &[r, c]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.softmax_rows(v[0], None).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[r, c])],
            }
        }),
        ("softmax_rows_causal", |rng| {
            let (g, l) = (rng.gen_range(1..4), rng.gen_range(1..6));
            let w = weights(rng, &[g, l, l]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.softmax_rows(v[0], Some(&mxlb_core::Mask::causal(l))).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[g, l, l])],
            }
        }),
        ("layer_norm", |rng| {
            let (r, d) = (rng.gen_range(1..4), rng.gen_range(2..7));
            let w = weights(rng, &[r, d]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.layer_norm(v[0], v[1], v[2]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![
                    random_tensor(rng, &[r, d]),
                    random_tensor(rng, &[d]),
                    random_tensor(rng, &[d]),
                ],
            }
        }),
        ("embedding_gather", |rng| {
            let (vocab, d, l) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(2..7));
            // repeated ids are likely with small vocabularies
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..vocab)).collect();
            let w = weights(rng, &[l, d]);
            Case {
                objective: Box::new(move |t, v| {
                    let s = t.embedding_gather(v[0], &ids).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[vocab, d])],
            }
        }),
        ("cross_entropy_masked", |rng| {
            let (l, vocab) = (rng.gen_range(1..6), rng.gen_range(2..13));
            let targets: Vec<usize> = (0..l).map(|_| rng.gen_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.6)).collect();
            mask[0] = true;
            Case {
                objective: Box::new(move |t, v| t.cross_entropy_masked(v[0], &targets, &mask).unwrap().0),
                inputs: vec![random_tensor(rng, &[l, vocab])],
            }
        }),
        ("composite_softmax_of_product", |rng| {
            let (m, k) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let w = weights(rng, &[m, 1]);
            Case {
                objective: Box::new(move |t, v| {
                    let z = t.matmul(v[0], v[1]).unwrap();
                    let z = t.reshape(z, &[1, m]).unwrap();
                    let s = t.softmax_rows(z, None).unwrap();
                    let s = t.reshape(s, &[m, 1]).unwrap();
                    weighted_sum(t, s, &w)
                }),
                inputs: vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, 1])],
            }
        }),
    ]
}

/// Random 64-bit transformer with every tensor (norm gains included) drawn from U(-1, 1).
pub fn random_model(
    rng: &mut ChaCha8Rng,
    config: &mxlb_core::model::ModelConfig,
) -> mxlb_core::model::TransformerParams<f64> {
    let tensors = config
        .layout()
        .iter()
        .map(|(_, shape)| random_tensor(rng, shape))
        .collect();
    mxlb_core::model::TransformerParams::from_tensors(config.clone(), tensors).unwrap()
}

/// Finite-difference check of the full model loss; perturbs parameters and
/// re-runs the forward-only loss.
pub fn model_gradient_error(
    params: &mxlb_core::model::TransformerParams<f64>,
    batch: &[mxlb_core::taskgen::EncodedExample],
) -> f64 {
    use mxlb_core::model::{loss, loss_and_grad};
    let (_, grads) = loss_and_grad(params, batch).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for t in 0..params.tensors.len() {
        for i in 0..params.tensors[t].len() {
            let orig = params.tensors[t].data()[i];
            probe.tensors[t].data_mut()[i] = orig + FD_STEP;
            let up = loss(&probe, batch, None).unwrap().loss;
            probe.tensors[t].data_mut()[i] = orig - FD_STEP;
            let down = loss(&probe, batch, None).unwrap().loss;
            probe.tensors[t].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// One small random case for the model gradient check.
pub fn model_case(rng: &mut ChaCha8Rng) -> (
    mxlb_core::model::TransformerParams<f64>,
    Vec<mxlb_core::taskgen::EncodedExample>,
) {
    use mxlb_core::model::ModelConfig;
    use mxlb_core::taskgen::{sample_example, TaskSpec};
    let spec = TaskSpec::mxu(2, rng.gen_bool(0.5));
    let config = ModelConfig {
        d_ff: 8,
        ..ModelConfig::new(1, 3, 6, spec.seq_len())
    };
    loop {
        let params = random_model(rng, &config);
        let batch: Vec<_> = (0..2).map(|_| sample_example(&spec, rng)).collect();
        if min_relu_margin(&params, &batch) > 1e-3 {
            return (params, batch);
        }
    }
}

/// Smallest |ReLU input| over the batch; finite differences are only valid away from the kink.
pub fn min_relu_margin(
    params: &mxlb_core::model::TransformerParams<f64>,
    batch: &[mxlb_core::taskgen::EncodedExample],
) -> f64 {
    use mxlb_core::model::{forward_on_tape, ForwardOptions};
    let mut tape = Tape::new();
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let fwd = forward_on_tape(params, &mut tape, &seqs, false, ForwardOptions::default()).unwrap();
    fwd.ff_preactivations
        .iter()
        .flat_map(|&v| tape.value(v).data().iter().map(|x| x.abs()))
        .fold(f64::INFINITY, f64::min)
}
