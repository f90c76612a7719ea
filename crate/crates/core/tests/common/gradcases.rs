//! Random gradient-check instances reused by the gradient suite and the
//! acceptance gate. Each case returns its max relative error.

use basisnet::backbone::{Activation, BackboneSpec};
use basisnet::pipeline::{BasisNet, BasisNetVars, CoeffOptions, InputTransform, LightweightSpec};
use basisnet::synthesis::{self, BasisBank, CoefficientActivation, CoefficientMode, SynthesisConfig};
use basisnet::{Tape, Target, Tensor, Var};
use rand::Rng;

use super::*;

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn conv_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, o) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let k = [1, 3][r.random_range(0..2)];
    let stride = dims(&mut r, 1, 2);
    let pad = r.random_range(0..=k / 2);
    let hw = dims(&mut r, k.max(2), 5);
    let x = rand_tensor(&mut r, &[n, c, hw, hw], 1.0);
    let w = rand_tensor(&mut r, &[o, c, k, k], 1.0);
    grad_check(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad)?;
        project(t, y, seed)
    })
}

pub fn softmax_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dims(&mut r, 1, 4), dims(&mut r, 2, 6)];
    let x = rand_tensor(&mut r, &shape, 3.0);
    let axis = r.random_range(0..2);
    grad_check(&[x], |t, v| {
        let y = t.softmax(v[0], axis)?;
        project(t, y, seed)
    })
}

pub fn cross_entropy_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (dims(&mut r, 1, 4), dims(&mut r, 2, 6));
    let x = rand_tensor(&mut r, &[b, c], 3.0);
    if r.random_bool(0.5) {
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        grad_check(&[x], |t, v| t.cross_entropy(v[0], &Target::Hard(labels.clone())))
    } else {
        let raw = Tensor::from_fn(&[b, c], |_| r.random_range(-2.0..2.0));
        let soft = basisnet::tensor::softmax_along(&raw, 1);
        grad_check(&[x], |t, v| t.cross_entropy(v[0], &Target::Soft(soft.clone())))
    }
}

pub fn smooth_stack(width: usize, layers: usize, size: usize, classes: usize) -> BackboneSpec {
    let mut ls = vec![layer(1, width, 3, 1, Activation::None)];
    ls.extend((1..layers).map(|_| layer(width, width, 3, 1, Activation::None)));
    BackboneSpec {
        input: [1, size, size],
        layers: ls,
        num_classes: classes,
    }
}

/// Random small BasisNet with linear conv blocks (no relu kinks for the
/// finite differences to straddle).
pub fn random_model(seed: u64) -> (BasisNet, Tensor, usize, f64, Option<Vec<bool>>) {
    let mut r = rng(seed);
    let classes = dims(&mut r, 2, 3);
    let n = dims(&mut r, 1, 3);
    let spec = smooth_stack(2, 3, 4, classes);
    let mask: Vec<bool> = loop {
        let m: Vec<bool> = (0..3).map(|_| r.random_bool(0.4)).collect();
        if m.iter().any(|s| !s) {
            break m;
        }
    };
    let bank = BasisBank::new(&spec, n, &mask, seed).unwrap();
    let lm = LightweightSpec {
        trunk: smooth_stack(2, 2, 2, classes),
        input_transform: InputTransform::Downsample { factor: 2 },
    };
    let synthesis = SynthesisConfig {
        activation: if r.random_bool(0.7) {
            CoefficientActivation::Softmax
        } else {
            CoefficientActivation::Sigmoid
        },
        mode: if r.random_bool(0.7) {
            CoefficientMode::PerLayer
        } else {
            CoefficientMode::PerModel
        },
        ..SynthesisConfig::default()
    };
    let mut model = BasisNet::new(&lm, bank, synthesis, seed + 7).unwrap();
    // nonzero biases so their gradients are generic
    for t in model.tensors_mut() {
        if t.shape().len() == 1 {
            *t = rand_tensor(&mut r, t.shape(), 0.3);
        }
    }
    let x = Tensor::from_fn(&[1, 1, 4, 4], |_| r.random_range(0.0..1.0));
    let label = r.random_range(0..classes);
    let eps = if r.random_bool(0.5) { r.random_range(0.0..1.0) } else { 0.0 };
    let drop = (n > 1 && r.random_bool(0.5)).then(|| {
        let mut m = vec![false; n];
        m[r.random_range(0..n)] = true;
        m
    });
    (model, x, label, eps, drop)
}

#[derive(Clone, Copy, PartialEq)]
pub enum Part {
    Lm,
    Bank,
}

/// Gradient of `loss` w.r.t. every tensor of one part of the model.
pub fn model_check(model: &BasisNet, part: Part, loss: impl Fn(&mut Tape, &BasisNet, &BasisNetVars) -> Var) -> f64 {
    let lm_count = model.lm.named_tensors().len();
    let range = match part {
        Part::Lm => 0..lm_count,
        Part::Bank => lm_count..model.named_tensors().len(),
    };
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, part == Part::Lm, part == Part::Bank);
    let l = loss(&mut tape, model, &vars);
    let grads = tape.backward(l).unwrap();
    let mut all = vars.lm.all();
    all.extend(vars.bank.all());
    let mut work = model.clone();
    let inputs: Vec<Tensor> = work.tensors_mut()[range.clone()].iter().map(|t| (**t).clone()).collect();
    let analytic: Vec<Tensor> = all[range.clone()]
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let numeric = numeric_grad(&inputs, FD_STEP, |ts| {
        for (dst, src) in work.tensors_mut()[range.clone()].iter_mut().zip(ts) {
            **dst = src.clone();
        }
        let mut tape = Tape::new();
        let vars = work.register(&mut tape, false, false);
        let l = loss(&mut tape, &work, &vars);
        tape.value(l).item()
    });
    max_rel_err(&analytic, &numeric, REL_FLOOR)
}


pub fn synthesis_kernel_case(seed: u64) -> f64 {
    let (model, x, label, _, _) = random_model(seed);
    model_check(&model, Part::Bank, |tape, m, vars| {
        let rows = m.bank.num_dynamic();
        let n = m.bank.num_bases();
        let mut r = rng(seed ^ 1);
        let raw = tape.constant(rand_tensor(&mut r, &[rows, n], 2.0));
        let alpha = tape.softmax(raw, 1).unwrap();
        let logits = m.stage2_var(tape, vars, alpha, &x).unwrap();
        tape.cross_entropy(logits, &Target::Hard(vec![label])).unwrap()
    })
}

pub fn synthesis_alpha_case(seed: u64) -> f64 {
    let (model, x, label, _, _) = random_model(seed);
    let rows = model.bank.num_dynamic();
    let n = model.bank.num_bases();
    let mut r = rng(seed ^ 2);
    let raw = rand_tensor(&mut r, &[rows, n], 2.0);
    grad_check(&[raw], |tape, v| {
        let vars = model.bank.register(tape, false);
        let alpha = tape.softmax(v[0], 1)?;
        let kernels = synthesis::synthesize_vars(tape, &model.bank, &vars, alpha)?;
        let xin = tape.constant(x.clone());
        let (_, logits) = synthesis::forward_with_kernels(tape, &model.bank, &vars, &kernels, xin)?;
        tape.cross_entropy(logits, &Target::Hard(vec![label]))
    })
}

/// Synthesized-model loss only, differentiated w.r.t. every LM tensor: the
/// LM learns through the coefficients alone.
pub fn lm_path_case(seed: u64) -> f64 {
    let (model, x, label, eps, drop) = random_model(seed);
    model_check(&model, Part::Lm, |tape, m, vars| {
        let opts = CoeffOptions {
            epsilon: eps,
            drop_mask: drop.as_deref(),
            harden: false,
        };
        let s = m.forward_sample(tape, vars, &x, opts).unwrap();
        tape.cross_entropy(s.final_logits, &Target::Hard(vec![label])).unwrap()
    })
}

pub fn total_loss_case(seed: u64) -> f64 {
    let (model, x, label, eps, drop) = random_model(seed);
    let run = |tape: &mut Tape, m: &BasisNet, vars: &BasisNetVars| {
        let opts = CoeffOptions {
            epsilon: eps,
            drop_mask: drop.as_deref(),
            harden: false,
        };
        let s = m.forward_sample(tape, vars, &x, opts).unwrap();
        let t = Target::Hard(vec![label]);
        let a = tape.cross_entropy(s.final_logits, &t).unwrap();
        let b = tape.cross_entropy(s.initial_logits, &t).unwrap();
        tape.add(a, b).unwrap()
    };
    model_check(&model, Part::Lm, run).max(model_check(&model, Part::Bank, run))
}
