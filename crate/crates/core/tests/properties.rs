mod common;

use basisnet::backbone::Activation;
use basisnet::cost::expected_cost;
use basisnet::disturbance::{disturb, DisturbContext, Disturbance, DisturbanceKind};
use basisnet::synthesis::{
    activate, apply_bmd, argmax, blend_epsilon, synthesize, to_one_hot, BasisBank, CoefficientActivation,
    CoefficientMatrix, CoefficientMode, LayerKernels,
};
use basisnet::training::{epsilon_at, Augmentation, LearningRate, OptimizerKind, TrainSchedule};
use basisnet::Tensor;
use common::*;
use proptest::prelude::*;

fn simplex_rows(rows: usize, n: usize) -> impl Strategy<Value = CoefficientMatrix> {
    prop::collection::vec(-4.0f64..4.0, rows * n).prop_map(move |raw| {
        activate(&Tensor::new(vec![rows, n], raw).unwrap(), CoefficientActivation::Softmax).unwrap()
    })
}

fn shape_and_rows() -> impl Strategy<Value = (usize, usize)> {
    (1usize..4, 2usize..6)
}

fn rows_sum_to_one(a: &CoefficientMatrix) -> bool {
    (0..a.rows()).all(|k| (a.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12 && a.row(k).iter().all(|&v| v >= 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn blend_and_dropout_stay_on_simplex(
        (alpha, eps, drop) in shape_and_rows().prop_flat_map(|(r, n)| {
            (simplex_rows(r, n), 0.0f64..=1.0, prop::collection::vec(any::<bool>(), n))
        })
    ) {
        let blended = blend_epsilon(&alpha, eps).unwrap();
        prop_assert!(rows_sum_to_one(&blended));
        if drop.iter().any(|d| !d) {
            let dropped = apply_bmd(&blended, &drop, true).unwrap();
            prop_assert!(rows_sum_to_one(&dropped));
            for k in 0..dropped.rows() {
                for (n, &d) in drop.iter().enumerate() {
                    if d {
                        prop_assert_eq!(dropped.get(k, n), 0.0);
                    }
                }
            }
        } else {
            prop_assert!(apply_bmd(&blended, &drop, true).is_err());
        }
    }

    #[test]
    fn one_hot_of_softmax_matches_raw_argmax(raw in prop::collection::vec(-5.0f64..5.0, 6)) {
        let t = Tensor::new(vec![2, 3], raw.clone()).unwrap();
        let hard = to_one_hot(&activate(&t, CoefficientActivation::Softmax).unwrap());
        for k in 0..2 {
            let best = argmax(&raw[k * 3..k * 3 + 3]);
            for n in 0..3 {
                prop_assert_eq!(hard.get(k, n), if n == best { 1.0 } else { 0.0 });
            }
        }
        prop_assert_eq!(to_one_hot(&hard), hard);
    }

    #[test]
    fn disturbances_preserve_structure(
        (alpha, seed, sample) in shape_and_rows().prop_flat_map(|(r, n)| (simplex_rows(r, n), any::<u64>(), any::<u64>()))
    ) {
        let ctx = DisturbContext { sample, ..Default::default() };
        let shuffled = disturb(&alpha, Disturbance::all(DisturbanceKind::Shuffled { seed }), ctx).unwrap();
        for k in 0..alpha.rows() {
            let mut a = alpha.row(k).to_vec();
            let mut b = shuffled.row(k).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(
            &shuffled,
            &disturb(&alpha, Disturbance::all(DisturbanceKind::Shuffled { seed }), ctx).unwrap()
        );
        for kind in [DisturbanceKind::Top1, DisturbanceKind::Uniform] {
            let once = disturb(&alpha, Disturbance::all(kind), ctx).unwrap();
            prop_assert_eq!(&disturb(&once, Disturbance::all(kind), ctx).unwrap(), &once);
        }
    }

    #[test]
    fn expected_cost_is_bounded_and_monotone(
        c_lm in 0.0f64..100.0, extra in 0.0f64..500.0, p in 0.0f64..=1.0, q in 0.0f64..=1.0
    ) {
        let total = c_lm + extra;
        let a = expected_cost(p, c_lm, total).unwrap();
        prop_assert!(a >= c_lm - 1e-9 && a <= total + 1e-9);
        let b = expected_cost(q, c_lm, total).unwrap();
        if p <= q {
            prop_assert!(a >= b - 1e-9);
        }
    }

    #[test]
    fn epsilon_schedule_is_monotone_in_unit_interval(hold in 0u64..50, decay in 0u64..50, step in 0u64..200) {
        let s = TrainSchedule {
            total_steps: 200,
            epsilon_hold_steps: hold,
            epsilon_decay_steps: decay,
            learning_rate: LearningRate { base: 0.1, decay_factor: 1.0, decay_every: 1 },
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            per_sample_bmd: false,
            augment: Augmentation::default(),
            eval_every: 10,
        };
        let (e0, e1) = (epsilon_at(step, &s), epsilon_at(step + 1, &s));
        prop_assert!((0.0..=1.0).contains(&e0));
        prop_assert!(e1 <= e0);
        prop_assert_eq!(epsilon_at(0, &s), if hold == 0 && decay == 0 { 0.0 } else { 1.0 });
        prop_assert_eq!(epsilon_at(hold + decay, &s), 0.0);
    }

    #[test]
    fn convex_blend_stays_within_basis_range(seed in any::<u64>(), n in 1usize..5) {
        let spec = toy_backbone(2, 3, 8);
        let bank = BasisBank::new(&spec, n, &[false, true, false, false], seed).unwrap();
        let mut r = rng(seed);
        let alpha = activate(&rand_tensor(&mut r, &[3, n], 3.0), CoefficientActivation::Softmax).unwrap();
        let kernels = synthesize(&bank, &alpha).unwrap();
        let mut row = 0;
        for (k, layer) in bank.layers.iter().enumerate() {
            match layer {
                LayerKernels::Shared(t) => prop_assert_eq!(&kernels[k], t),
                LayerKernels::Bases(b) => {
                    for i in 0..kernels[k].numel() {
                        let lo = b.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
                        let hi = b.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                        let v = kernels[k].data()[i];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                    row += 1;
                }
            }
        }
        prop_assert_eq!(row, alpha.rows());
    }

    #[test]
    fn one_hot_selection_picks_basis_kernels_bitwise(seed in any::<u64>(), picks in prop::collection::vec(0usize..4, 3)) {
        let spec = toy_backbone(2, 3, 8);
        let bank = BasisBank::new(&spec, 4, &[true, false, false, false], seed).unwrap();
        let mut values = vec![0.0; 12];
        for (k, &p) in picks.iter().enumerate() {
            values[k * 4 + p] = 1.0;
        }
        let alpha = CoefficientMatrix::new(3, 4, values, CoefficientMode::OneHot).unwrap();
        let kernels = synthesize(&bank, &alpha).unwrap();
        for (k, &p) in picks.iter().enumerate() {
            match &bank.layers[k + 1] {
                LayerKernels::Bases(b) => prop_assert_eq!(&kernels[k + 1], &b[p]),
                LayerKernels::Shared(_) => prop_assert!(false, "layer should be dynamic"),
            }
        }
    }

    #[test]
    fn tensor_constructor_checks_length(shape in prop::collection::vec(1usize..4, 1..4), delta in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n + delta]).is_err());
    }
}

#[test]
fn naive_network_oracle_agrees_with_library_forward() {
    let spec = toy_backbone(3, 4, 8);
    let params = basisnet::backbone::build(&spec, 9).unwrap();
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[1, 1, 8, 8], 1.0);
    let lib = basisnet::backbone::forward(&params, &spec, &x).unwrap();
    let (oracle, mults) = naive_network(&spec, &params.kernels, &params.biases, &params.head_weight, &params.head_bias, &x);
    for (a, b) in lib.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(mults, basisnet::backbone::count_madds(&spec).unwrap());
    assert_eq!(spec.layers[0].activation, Activation::Relu);
}
