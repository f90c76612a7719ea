mod common;

use basisnet::backbone::Activation;
use basisnet::pipeline::{condconv_run, CondConvRouters, ExecEvent};
use basisnet::synthesis::{BasisBank, CoefficientActivation, LayerKernels};
use basisnet::Tensor;
use common::*;
use rand::Rng;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Layer-by-layer CondConv with plain loops: GAP of the layer input, router
/// logits, softmax, blended kernel, direct convolution.
fn condconv_oracle(bank: &BasisBank, routers: &CondConvRouters, x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let spec = bank.spec();
    let n = bank.num_bases();
    let mut h = x.clone();
    let mut row = 0;
    let mut coeffs = Vec::new();
    for (k, l) in spec.layers.iter().enumerate() {
        let kernel = match &bank.layers[k] {
            LayerKernels::Shared(t) => t.clone(),
            LayerKernels::Bases(b) => {
                let (c, hw) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
                let pooled: Vec<f64> =
                    (0..c).map(|ch| h.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
                let r = &routers.routers[row];
                let z: Vec<f64> = (0..n)
                    .map(|j| r.bias.data()[j] + (0..c).map(|i| pooled[i] * r.weight.data()[i * n + j]).sum::<f64>())
                    .collect();
                let a = softmax(&z);
                let mut w = Tensor::zeros(b[0].shape());
                for (t, &ai) in b.iter().zip(&a) {
                    for (o, v) in w.data_mut().iter_mut().zip(t.data()) {
                        *o += ai * v;
                    }
                }
                coeffs.push(a);
                row += 1;
                w
            }
        };
        let (mut y, _) = naive_conv(&h, &kernel, l.stride, l.padding);
        let (o, hw) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bank.biases[k].data()[(i / hw) % o];
            if l.activation == Activation::Relu && *v < 0.0 {
                *v = 0.0;
            }
        }
        h = y;
    }
    let (c, hw) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
    let pooled: Vec<f64> = (0..c).map(|ch| h.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let classes = bank.head_bias.numel();
    let logits = (0..classes)
        .map(|j| bank.head_bias.data()[j] + (0..c).map(|i| pooled[i] * bank.head_weight.data()[i * classes + j]).sum::<f64>())
        .collect();
    (logits, coeffs)
}

#[test]
fn condconv_matches_loop_oracle() {
    for seed in 0..30u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..=4);
        let spec = toy_backbone(r.random_range(1..=3), 3, 8);
        let mask: Vec<bool> = (0..4).map(|k| k == 0 && r.random_bool(0.5)).collect();
        let mut bank = BasisBank::new(&spec, n, &mask, seed).unwrap();
        for t in bank.tensors_mut() {
            if t.shape().len() == 1 {
                *t = rand_tensor(&mut r, t.shape(), 0.3);
            }
        }
        let mut routers = CondConvRouters::new(&bank, CoefficientActivation::Softmax, seed);
        for rt in &mut routers.routers {
            rt.bias = rand_tensor(&mut r, rt.bias.shape(), 0.5);
        }
        let x = rand_tensor(&mut r, &[1, 1, 8, 8], 1.0);
        let mut trace = Vec::new();
        let (logits, coeffs) = condconv_run(&bank, &routers, &x, &mut trace).unwrap();
        let (want_logits, want_coeffs) = condconv_oracle(&bank, &routers, &x);
        for (a, b) in logits.data().iter().zip(&want_logits) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
        for (a, b) in coeffs.iter().flatten().zip(want_coeffs.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // each layer's coefficients appear only after the previous layer ran
        for (i, e) in trace.iter().enumerate() {
            if let ExecEvent::Synthesized { layer } = e {
                assert_eq!(trace[i - 1], ExecEvent::Coefficients { row: bank.coefficient_row(*layer).unwrap() });
                if *layer > 0 {
                    assert!(trace[..i].contains(&ExecEvent::Layer { layer: layer - 1 }));
                    assert!(!trace[..i].contains(&ExecEvent::Layer { layer: *layer }));
                }
            }
        }
    }
}

#[test]
fn basisnet_trace_has_all_coefficients_before_stage_two() {
    let cfg = tiny_config(3, 1);
    let net = cfg.build_model().unwrap();
    let data = cfg.dataset.load().unwrap();
    let mut trace = Vec::new();
    let res = net.infer_traced(&data.eval.image(0), 1.01, &mut trace).unwrap();
    assert!(!res.terminated);
    assert_eq!(trace[0], ExecEvent::Stage1);
    let first_layer = trace.iter().position(|e| matches!(e, ExecEvent::Layer { .. })).unwrap();
    let rows = trace[..first_layer].iter().filter(|e| matches!(e, ExecEvent::Coefficients { .. })).count();
    assert_eq!(rows, net.bank.num_dynamic());
    let layers: Vec<_> = trace[first_layer..].to_vec();
    assert_eq!(layers, (0..4).map(|layer| ExecEvent::Layer { layer }).collect::<Vec<_>>());

    let mut trace = Vec::new();
    let res = net.infer_traced(&data.eval.image(0), 0.0, &mut trace).unwrap();
    assert!(res.terminated && res.final_logits.is_none());
    assert_eq!(trace, vec![ExecEvent::Stage1]);
}
