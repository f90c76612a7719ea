//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod gradcases;

use basisnet::backbone::{Activation, BackboneSpec, LayerSpec};
use basisnet::harness::config::{BankConfig, DatasetConfig, EvalConfig, ExperimentConfig, LayerRange};
use basisnet::harness::data::SyntheticSpec;
use basisnet::pipeline::{InputTransform, LightweightSpec};
use basisnet::synthesis::{BasisInit, SynthesisConfig};
use basisnet::training::{Augmentation, LearningRate, LossConfig, OptimizerKind, TrainSchedule};
use basisnet::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn layer(i: usize, o: usize, k: usize, stride: usize, act: Activation) -> LayerSpec {
    LayerSpec {
        in_channels: i,
        out_channels: o,
        kernel_size: k,
        stride,
        padding: k / 2,
        activation: act,
    }
}

/// Six-loop direct convolution; returns the output and the number of
/// multiplications actually performed (padding taps included, as in the
/// nominal count).
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Tensor, u64) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    let mut mults = 0u64;
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                mults += 1;
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (Tensor::new(vec![n, o, oh, ow], out).unwrap(), mults)
}

/// Plain-loop forward of a conv stack (relu/none), global average pool and
/// linear head, counting multiplications. Shares no code with the library.
pub fn naive_network(
    spec: &BackboneSpec,
    kernels: &[Tensor],
    biases: &[Tensor],
    head_w: &Tensor,
    head_b: &Tensor,
    x: &Tensor,
) -> (Vec<f64>, u64) {
    let mut h = x.clone();
    let mut mults = 0;
    for (k, l) in spec.layers.iter().enumerate() {
        let (mut y, m) = naive_conv(&h, &kernels[k], l.stride, l.padding);
        mults += m;
        let (o, hw) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += biases[k].data()[(i / hw) % o];
            if l.activation == Activation::Relu && *v < 0.0 {
                *v = 0.0;
            }
        }
        h = y;
    }
    let (c, hw) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
    let pooled: Vec<f64> = (0..c).map(|ch| h.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let classes = head_b.numel();
    let logits = (0..classes)
        .map(|j| {
            head_b.data()[j]
                + (0..c)
                    .map(|i| {
                        mults += 1;
                        pooled[i] * head_w.data()[i * classes + j]
                    })
                    .sum::<f64>()
        })
        .collect();
    (logits, mults)
}

/// Central finite differences of `f` with respect to every element of every input.
pub fn numeric_grad(inputs: &[Tensor], h: f64, mut f: impl FnMut(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut g = Tensor::zeros(t.shape());
            for j in 0..t.numel() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + h;
                let up = f(&work);
                work[i].data_mut()[j] = orig - h;
                let down = f(&work);
                work[i].data_mut()[j] = orig;
                g.data_mut()[j] = (up - down) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is ~0 from dividing round-off by round-off.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

/// Gradient check of a scalar function built on a tape from `inputs`
/// (all registered as trainable leaves). Returns the max relative error.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> basisnet::Result<Var>) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let numeric = numeric_grad(inputs, FD_STEP, eval);
    max_rel_err(&analytic, &numeric, REL_FLOOR)
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any op output into a scalar
/// with a generic upstream gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> basisnet::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(rand_tensor(&mut r, &shape, 1.0));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub fn toy_backbone(width: usize, classes: usize, size: usize) -> BackboneSpec {
    let r = Activation::Relu;
    BackboneSpec {
        input: [1, size, size],
        layers: vec![
            layer(1, width, 3, 1, r),
            layer(width, width, 3, 2, r),
            layer(width, width, 3, 1, r),
            layer(width, width, 3, 2, r),
        ],
        num_classes: classes,
    }
}

pub fn toy_lm(classes: usize, size: usize) -> LightweightSpec {
    let r = Activation::Relu;
    LightweightSpec {
        trunk: BackboneSpec {
            input: [1, size / 2, size / 2],
            layers: vec![layer(1, 4, 3, 1, r), layer(4, 8, 3, 1, r)],
            num_classes: classes,
        },
        input_transform: InputTransform::Downsample { factor: 2 },
    }
}

/// The calibrated toy experiment on the synthetic coarse/fine dataset.
pub fn toy_config(num_bases: usize, seed: u64, steps: u64, bmd_rate: f64) -> ExperimentConfig {
    let classes = 6;
    ExperimentConfig {
        schema_version: 1,
        dataset: DatasetConfig::Synthetic {
            spec: SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
        },
        lm: toy_lm(classes, 12),
        bank: BankConfig {
            backbone: toy_backbone(2, classes, 12),
            num_bases,
            shared: vec![],
            basis_init: BasisInit::default(),
        },
        synthesis: SynthesisConfig {
            bmd_rate,
            ..SynthesisConfig::default()
        },
        schedule: TrainSchedule {
            total_steps: steps,
            epsilon_hold_steps: steps / 10,
            epsilon_decay_steps: steps * 4 / 10,
            learning_rate: LearningRate {
                base: 0.005,
                decay_factor: 1.0,
                decay_every: 1000,
            },
            batch_size: 16,
            seed,
            optimizer: OptimizerKind::Rmsprop,
            clip_norm: None,
            per_sample_bmd: false,
            augment: Augmentation::default(),
            eval_every: (steps / 4).max(1),
        },
        loss: LossConfig::default(),
        eval: EvalConfig::default(),
        output_dir: "unused".into(),
        seed,
    }
}

/// Same shapes as [`toy_config`] but small enough for quick plumbing tests.
pub fn tiny_config(num_bases: usize, steps: u64) -> ExperimentConfig {
    let mut cfg = toy_config(num_bases, 0, steps, 0.25);
    if let DatasetConfig::Synthetic { spec } = &mut cfg.dataset {
        spec.train_size = 48;
        spec.eval_size = 24;
    }
    cfg.bank.shared = vec![LayerRange { start: 0, end: 1 }];
    cfg.schedule.batch_size = 4;
    cfg.schedule.eval_every = 5;
    cfg
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
