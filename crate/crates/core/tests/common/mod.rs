#![allow(dead_code)]

use dyncap::gate::{gate_ordered_on_tape, gate_per_unit_on_tape, lambda_penalty_on_tape, GateState, LAMBDA_MAX};
use dyncap::gradcheck::finite_difference_check;
use dyncap::layers::{Activation, Layer, LayerSpec, Mode, ModelGraph};
use dyncap::trainer::{bce_loss_on_tape, l1_loss_on_tape};
use dyncap::{Result, RngStream, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const INSTANCES: u64 = 10;

/// Random dimension in `1..=max`.
pub fn dim(rng: &RngStream, index: u64, max: usize) -> usize {
    1 + (rng.uniform_at(index) * max as f64) as usize % max
}

pub fn uniform(rng: &RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.uniforms(n, lo, hi)).unwrap()
}

pub fn normal(rng: &RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).unwrap()
}

/// Values with magnitude in `[0.2, 2]` and random sign, away from kinks at 0.
pub fn off_zero(rng: &RngStream, shape: &[usize]) -> Tensor {
    let mag = uniform(&rng.derive(0), shape, 0.2, 2.0);
    let sign = uniform(&rng.derive(1), shape, -1.0, 1.0);
    Tensor::new(
        shape,
        mag.data().iter().zip(sign.data()).map(|(m, s)| if *s < 0.0 { -m } else { *m }).collect(),
    )
    .unwrap()
}

/// `Σ out ⊙ weights` with fixed random weights, so every output element
/// contributes a distinct sensitivity.
pub fn project(tape: &mut Tape, out: Var, rng: &RngStream) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(normal(rng, &shape));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type Case = Box<dyn Fn(&RngStream) -> Result<f64>>;

fn unary(op: fn(&mut Tape, Var) -> Result<Var>, input: fn(&RngStream, &[usize]) -> Tensor) -> Case {
    Box::new(move |rng| {
        let shape = [dim(rng, 0, 8), dim(rng, 1, 8)];
        let x = input(&rng.derive(10), &shape);
        let proj = rng.derive(11);
        finite_difference_check(|t, v| { let o = op(t, v)?; project(t, o, &proj) }, &x, FD_STEP)
    })
}

/// Checks both operands of a binary op; `other_shape` gives the second
/// operand's shape from the first's.
fn binary(
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
    other_shape: fn(&[usize]) -> Vec<usize>,
) -> Case {
    Box::new(move |rng| {
        let shape = [dim(rng, 0, 8), dim(rng, 1, 8)];
        let a = normal(&rng.derive(10), &shape);
        let b = normal(&rng.derive(12), &other_shape(&shape));
        let proj = rng.derive(11);
        let left = finite_difference_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let o = op(t, v, bv)?;
                project(t, o, &proj)
            },
            &a,
            FD_STEP,
        )?;
        let right = finite_difference_check(
            |t, v| {
                let av = t.constant(a.clone());
                let o = op(t, av, v)?;
                project(t, o, &proj)
            },
            &b,
            FD_STEP,
        )?;
        Ok(left.max(right))
    })
}

fn same(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

fn scalar_shape(_: &[usize]) -> Vec<usize> {
    vec![]
}

fn row(s: &[usize]) -> Vec<usize> {
    vec![s[1]]
}

fn positive(rng: &RngStream, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.2, 3.0)
}

fn normal_input(rng: &RngStream, shape: &[usize]) -> Tensor {
    normal(rng, shape)
}

fn matmul_case() -> Case {
    Box::new(|rng| {
        let (m, k, n) = (dim(rng, 0, 8), dim(rng, 1, 8), dim(rng, 2, 8));
        let a = normal(&rng.derive(10), &[m, k]);
        let b = normal(&rng.derive(12), &[k, n]);
        let proj = rng.derive(11);
        let left = finite_difference_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let o = t.matmul(v, bv)?;
                project(t, o, &proj)
            },
            &a,
            FD_STEP,
        )?;
        let right = finite_difference_check(
            |t, v| {
                let av = t.constant(a.clone());
                let o = t.matmul(av, v)?;
                project(t, o, &proj)
            },
            &b,
            FD_STEP,
        )?;
        Ok(left.max(right))
    })
}

fn reduction_case(op: fn(&mut Tape, Var) -> Var) -> Case {
    Box::new(move |rng| {
        let x = normal(&rng.derive(10), &[dim(rng, 0, 8), dim(rng, 1, 8)]);
        // square the reduction so the gradient depends on x
        finite_difference_check(|t, v| { let r = op(t, v); Ok(t.square(r)) }, &x, FD_STEP)
    })
}

fn clamp_case() -> Case {
    Box::new(|rng| {
        let shape = [dim(rng, 0, 8), dim(rng, 1, 8)];
        // keep every value at least 0.1 away from the band edges
        let raw = uniform(&rng.derive(10), &shape, -2.0, 2.0);
        let x = raw.map(|v| if (v.abs() - 1.0).abs() < 0.1 { v * 0.8 } else { v });
        let proj = rng.derive(11);
        finite_difference_check(|t, v| { let o = t.clamp(v, -1.0, 1.0)?; project(t, o, &proj) }, &x, FD_STEP)
    })
}

/// Gate in training mode with the noise draw frozen across perturbations,
/// differentiated with respect to both the features and the fractions.
fn gate_train_case() -> Case {
    Box::new(|rng| {
        let (batch, width) = (dim(rng, 0, 8), dim(rng, 1, 8));
        let lambda_min = 0.0625;
        let lambdas = uniform(&rng.derive(10), &[width], lambda_min + 0.01, LAMBDA_MAX - 0.01);
        let mut state = GateState::with_lambdas(lambdas.data().to_vec(), lambda_min)?;
        state.set_sigma_ema(uniform(&rng.derive(13), &[width], 0.5, 2.0).into_data())?;
        let x = normal(&rng.derive(12), &[batch, width]);
        let noise = state.scaled_noise(&rng.derive(14), &[batch, width])?;
        let proj = rng.derive(11);
        let wrt_lambda = finite_difference_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let o = gate_per_unit_on_tape(t, xv, v, &state, Some(&noise))?;
                project(t, o, &proj)
            },
            &lambdas,
            FD_STEP,
        )?;
        let wrt_x = finite_difference_check(
            |t, v| {
                let lv = t.constant(lambdas.clone());
                let o = gate_per_unit_on_tape(t, v, lv, &state, Some(&noise))?;
                project(t, o, &proj)
            },
            &x,
            FD_STEP,
        )?;
        Ok(wrt_lambda.max(wrt_x))
    })
}

fn gate_eval_case() -> Case {
    Box::new(|rng| {
        let (batch, width) = (dim(rng, 0, 8), dim(rng, 1, 8));
        let lambdas = uniform(&rng.derive(10), &[width], 0.05, LAMBDA_MAX);
        let state = GateState::with_lambdas(lambdas.data().to_vec(), 0.01)?;
        let x = normal(&rng.derive(12), &[batch, width]);
        let proj = rng.derive(11);
        finite_difference_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let o = gate_per_unit_on_tape(t, xv, v, &state, None)?;
                project(t, o, &proj)
            },
            &lambdas,
            FD_STEP,
        )
    })
}

fn ordered_gate_case() -> Case {
    Box::new(|rng| {
        let n = 2 + dim(rng, 0, 7);
        // K strictly inside a cell, away from the integer kinks
        let cell = 1 + (rng.uniform_at(1) * (n - 1) as f64) as usize;
        let k = cell as f64 + 0.1 + 0.8 * rng.uniform_at(2);
        let x = normal(&rng.derive(10), &[n]);
        let sigma = uniform(&rng.derive(13), &[n], 0.5, 2.0).into_data();
        let nu = rng.normal_at(3);
        let proj = rng.derive(11);
        let wrt_k = finite_difference_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let o = gate_ordered_on_tape(t, xv, v, (1, n), &sigma, nu)?;
                project(t, o, &proj)
            },
            &Tensor::scalar(k),
            FD_STEP,
        )?;
        let wrt_x = finite_difference_check(
            |t, v| {
                let kv = t.constant(Tensor::scalar(k));
                let o = gate_ordered_on_tape(t, v, kv, (1, n), &sigma, nu)?;
                project(t, o, &proj)
            },
            &x,
            FD_STEP,
        )?;
        Ok(wrt_k.max(wrt_x))
    })
}

fn penalty_case() -> Case {
    Box::new(|rng| {
        let lambdas = uniform(&rng.derive(10), &[dim(rng, 0, 8)], 0.0, 1.0);
        let beta = 0.1 + 2.0 * rng.uniform_at(5);
        finite_difference_check(|t, v| Ok(lambda_penalty_on_tape(t, v, beta)), &lambdas, FD_STEP)
    })
}

fn l1_case() -> Case {
    Box::new(|rng| {
        let shape = [dim(rng, 0, 8), dim(rng, 1, 8)];
        let target = normal(&rng.derive(12), &shape);
        let gap = off_zero(&rng.derive(10), &shape);
        let pred = target.add(&gap)?;
        finite_difference_check(
            |t, v| {
                let tv = t.constant(target.clone());
                l1_loss_on_tape(t, tv, v)
            },
            &pred,
            FD_STEP,
        )
    })
}

fn bce_case() -> Case {
    Box::new(|rng| {
        let n = dim(rng, 0, 8);
        let probs = uniform(&rng.derive(10), &[n], 0.05, 0.95);
        let labels: Vec<f64> = (0..n).map(|i| (rng.uniform_at(20 + i as u64) < 0.5) as u8 as f64).collect();
        let pos_weight = 0.5 + rng.uniform_at(6);
        finite_difference_check(|t, v| bce_loss_on_tape(t, &labels, v, pos_weight), &probs, FD_STEP)
    })
}

/// Whole-model forward through a gated layer and its adaptive successor in
/// training mode with frozen noise, checked against central differences for
/// every weight, bias and gate fraction.
fn model_case() -> Case {
    Box::new(|rng| {
        let (input, hidden, out, batch) = (dim(rng, 0, 6), dim(rng, 1, 8), dim(rng, 2, 4), dim(rng, 3, 5));
        let mut model = ModelGraph::build(
            input,
            &[LayerSpec::dynamic(hidden, true, Activation::Tanh), LayerSpec::adaptive(out, true, Activation::Sigmoid)],
            0.05,
            &rng.derive(30),
        )?;
        let lambdas = uniform(&rng.derive(31), &[hidden], 0.1, 0.9);
        *model.dynamic_layer_mut(0).unwrap().gate_mut() = GateState::with_lambdas(lambdas.into_data(), 0.05)?;
        let x = normal(&rng.derive(32), &[batch, input]);
        let mode = Mode::Train { noise: Some(rng.derive(33)) };
        let proj = rng.derive(11);

        let loss = |m: &ModelGraph, tape: &mut Tape| -> Result<(Var, dyncap::layers::Bindings)> {
            let bindings = m.bind(tape, true);
            let xv = tape.constant(x.clone());
            let pass = m.forward(tape, &bindings, xv, mode)?;
            Ok((project(tape, pass.output, &proj)?, bindings))
        };
        let mut tape = Tape::new();
        let (out_var, bindings) = loss(&model, &mut tape)?;
        let grads = tape.backward(out_var)?;

        let mut worst = 0.0_f64;
        for (id, var) in bindings.iter() {
            let analytic = grads.get(*var);
            for k in 0..analytic.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    m.param_mut(*id).unwrap().data_mut()[k] += delta;
                    let mut t = Tape::new();
                    let (v, _) = loss(&m, &mut t)?;
                    t.value(v).item()
                };
                let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max((analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0));
            }
        }
        Ok(worst)
    })
}

/// Every differentiable operation with the worst relative error over
/// `INSTANCES` random instances.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Case)> = vec![
        ("matmul", matmul_case()),
        ("add", binary(|t, a, b| t.add(a, b), same)),
        ("sub", binary(|t, a, b| t.sub(a, b), same)),
        ("mul", binary(|t, a, b| t.mul(a, b), same)),
        ("add_scalar_broadcast", binary(|t, a, b| t.add(a, b), scalar_shape)),
        ("mul_scalar_broadcast", binary(|t, a, b| t.mul(a, b), scalar_shape)),
        ("mul_row", binary(|t, a, b| t.mul_row(a, b), row)),
        ("add_row", binary(|t, a, b| t.add_row(a, b), row)),
        ("scale", unary(|t, v| Ok(t.scale(v, -1.7)), normal_input)),
        ("add_scalar", unary(|t, v| Ok(t.add_scalar(v, 0.3)), normal_input)),
        ("rsub_scalar", unary(|t, v| Ok(t.rsub_scalar(2.0, v)), normal_input)),
        ("sqrt", unary(|t, v| t.sqrt(v), positive)),
        ("square", unary(|t, v| Ok(t.square(v)), normal_input)),
        ("abs", unary(|t, v| Ok(t.abs(v)), off_zero)),
        ("sigmoid", unary(|t, v| Ok(t.sigmoid(v)), normal_input)),
        ("tanh", unary(|t, v| Ok(t.tanh(v)), normal_input)),
        ("log", unary(|t, v| t.log(v), positive)),
        ("clamp", clamp_case()),
        ("mean", reduction_case(|t, v| t.mean(v))),
        ("sum", reduction_case(|t, v| t.sum(v))),
        ("gate_train_frozen_noise", gate_train_case()),
        ("gate_eval", gate_eval_case()),
        ("gate_ordered", ordered_gate_case()),
        ("lambda_penalty", penalty_case()),
        ("l1_loss", l1_case()),
        ("bce_loss", bce_case()),
        ("gated_chain", model_case()),
    ];
    let root = RngStream::new(0x6AD);
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let worst = (0..INSTANCES)
                .map(|k| case(&root.derive(i as u64).derive(k)).unwrap_or_else(|e| panic!("{name}: {e}")))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// A random stack with gates set so every fraction is either exactly 0 or
/// above `threshold`.
pub fn random_gated_model(rng: &RngStream, threshold: f64) -> ModelGraph {
    let acts = [Activation::Identity, Activation::Tanh, Activation::Sigmoid];
    let act = |i: u64| acts[(rng.uniform_at(i) * 3.0) as usize % 3];
    let input = dim(rng, 0, 8);
    let mut specs = Vec::new();
    if rng.uniform_at(1) < 0.3 {
        specs.push(LayerSpec::fixed(dim(rng, 2, 8), rng.uniform_at(3) < 0.5, act(4)));
    }
    let pairs = 1 + (rng.uniform_at(5) < 0.4) as u64;
    for p in 0..pairs {
        let base = 10 + 10 * p;
        specs.push(LayerSpec::dynamic(dim(rng, base, 8), rng.uniform_at(base + 1) < 0.6, act(base + 2)));
        specs.push(LayerSpec::adaptive(dim(rng, base + 3, 8), rng.uniform_at(base + 4) < 0.6, act(base + 5)));
    }
    let mut model = ModelGraph::build(input, &specs, 0.01, &rng.derive(99)).unwrap();
    let mut g = 0;
    for gate in model.gates_mut() {
        let stream = rng.derive(200 + g);
        g += 1;
        let width = gate.width();
        let mut lambdas: Vec<f64> = (0..width as u64)
            .map(|n| {
                if stream.uniform_at(2 * n) < 0.4 {
                    0.0
                } else {
                    threshold + 1e-6 + (LAMBDA_MAX - threshold - 1e-6) * stream.uniform_at(2 * n + 1)
                }
            })
            .collect();
        // at least one survivor per layer
        lambdas[(stream.uniform_at(u64::MAX) * width as f64) as usize % width] = LAMBDA_MAX;
        *gate = GateState::with_lambdas(lambdas, 0.01).unwrap();
    }
    model
}

/// Largest elementwise gap between the gated model in evaluation mode and
/// its consolidation on a random batch.
pub fn consolidation_gap(model: &ModelGraph, threshold: f64, rng: &RngStream) -> f64 {
    let input = model.input_dim().unwrap();
    let x = normal(rng, &[dim(rng, 0, 16), input]);
    let fixed = model.consolidate(threshold).unwrap();
    assert!(fixed.layers().iter().all(|r| matches!(r.layer, Layer::Fixed(_))));
    model.predict(&x).unwrap().max_abs_diff(&fixed.predict(&x).unwrap()).unwrap()
}
