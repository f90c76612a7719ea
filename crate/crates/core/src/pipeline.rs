//! Two-stage inference: a lightweight model predicts classes and combination
//! coefficients, the basis bank is synthesized into a specialist, and easy
//! inputs can stop after the first stage. Also hosts the CondConv-style
//! per-layer routing baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, conv_block, fan_in_uniform, pooled_head, BackboneParams, BackboneSpec, BackboneVars};
use crate::error::{Error, Result};
use crate::synthesis::{
    self, activate_var, apply_bmd_var, blend_epsilon_var, BankVars, BasisBank, BmdOrder, CoefficientActivation,
    CoefficientMatrix, CoefficientMode, LayerKernels, SynthesisConfig,
};
use crate::tensor::{downsample, softmax_along, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputTransform {
    Identity,
    Downsample { factor: usize },
}

impl InputTransform {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            InputTransform::Identity => Ok(x.clone()),
            InputTransform::Downsample { factor } => downsample(x, factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightweightSpec {
    /// Trunk and class head; `trunk.input` is the shape after `input_transform`.
    pub trunk: BackboneSpec,
    pub input_transform: InputTransform,
}

/// First-stage network: one trunk feeding a class head and a coefficient head.
#[derive(Clone, Debug, PartialEq)]
pub struct LightweightModel {
    pub spec: LightweightSpec,
    /// Trunk kernels plus the class head (`head_weight`, `head_bias`).
    pub trunk: BackboneParams,
    /// `features × (coeff_rows · num_bases)`.
    pub coeff_weight: Tensor,
    pub coeff_bias: Tensor,
    coeff_rows: usize,
    num_bases: usize,
}

/// Lightweight model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct LightweightVars {
    pub trunk: BackboneVars,
    pub coeff_weight: Var,
    pub coeff_bias: Var,
}

impl LightweightVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.trunk.all();
        v.push(self.coeff_weight);
        v.push(self.coeff_bias);
        v
    }
}

impl LightweightModel {
    /// `coeff_rows` is the number of non-shared layers (or 1 for per-model synthesis).
    pub fn new(spec: &LightweightSpec, coeff_rows: usize, num_bases: usize, seed: u64) -> Result<Self> {
        let trunk = backbone::build(&spec.trunk, seed)?;
        if coeff_rows == 0 || num_bases == 0 {
            return Err(Error::Spec("coefficient head needs at least one row and one basis".into()));
        }
        let f = spec.trunk.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ef_f1c1);
        let coeff_weight = fan_in_uniform(&mut rng, &[f, coeff_rows * num_bases], f, 1.0);
        Ok(LightweightModel {
            spec: spec.clone(),
            trunk,
            coeff_weight,
            coeff_bias: Tensor::zeros(&[coeff_rows * num_bases]),
            coeff_rows,
            num_bases,
        })
    }

    pub fn coeff_rows(&self) -> usize {
        self.coeff_rows
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LightweightVars {
        LightweightVars {
            trunk: self.trunk.register(tape, trainable),
            coeff_weight: tape.leaf(self.coeff_weight.clone(), trainable),
            coeff_bias: tape.leaf(self.coeff_bias.clone(), trainable),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.trunk.tensors_mut().collect();
        v.push(&mut self.coeff_weight);
        v.push(&mut self.coeff_bias);
        v
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, t) in self.trunk.kernels.iter().enumerate() {
            out.push((format!("lm.L{k}.kernel"), t));
        }
        for (k, t) in self.trunk.biases.iter().enumerate() {
            out.push((format!("lm.L{k}.bias"), t));
        }
        out.push(("lm.class_head.weight".into(), &self.trunk.head_weight));
        out.push(("lm.class_head.bias".into(), &self.trunk.head_bias));
        out.push(("lm.coeff_head.weight".into(), &self.coeff_weight));
        out.push(("lm.coeff_head.bias".into(), &self.coeff_bias));
        out
    }

    /// Applies the input transform; the result is what the trunk consumes.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.spec.input_transform.apply(x)?;
        backbone::check_input(&self.spec.trunk, t.shape())?;
        Ok(t)
    }
}

/// One trunk pass feeding both heads. Returns `(initial logits, raw coefficients B×(rows·N))`.
pub fn lm_forward_vars(tape: &mut Tape, lm: &LightweightModel, vars: &LightweightVars, x: Var) -> Result<(Var, Var)> {
    let (feats, logits) = backbone::forward_vars(tape, &lm.spec.trunk, &vars.trunk, x)?;
    let raw = tape.matmul(feats, vars.coeff_weight)?;
    let raw = tape.add_row_bias(raw, vars.coeff_bias)?;
    Ok((logits, raw))
}

/// Initial logits `B×C` and raw (not yet activated) coefficients `B×(rows·N)`.
pub fn lm_forward(lm: &LightweightModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = lm.register(&mut tape, false);
    let input = tape.constant(lm.prepare_input(x)?);
    let (logits, raw) = lm_forward_vars(&mut tape, lm, &vars, input)?;
    Ok((tape.value(logits).clone(), tape.value(raw).clone()))
}

/// Maximum softmax probability of a logit vector.
pub fn confidence(logits: &[f64]) -> f64 {
    let t = Tensor::new(vec![logits.len()], logits.to_vec()).expect("non-empty logits");
    softmax_along(&t, 0).data().iter().cloned().fold(0.0, f64::max)
}

/// BasisNet: lightweight model, basis bank, and how coefficients are formed.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisNet {
    pub lm: LightweightModel,
    pub bank: BasisBank,
    pub synthesis: SynthesisConfig,
}

/// Options for building coefficients on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CoeffOptions<'a> {
    pub epsilon: f64,
    pub drop_mask: Option<&'a [bool]>,
    /// Replace the activated coefficients by their row-wise argmax one-hot.
    pub harden: bool,
}

impl Default for CoeffOptions<'_> {
    fn default() -> Self {
        CoeffOptions {
            epsilon: 0.0,
            drop_mask: None,
            harden: false,
        }
    }
}

/// Per-sample values recorded on a training or evaluation tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub initial_logits: Var,
    pub alpha: Var,
    pub final_logits: Var,
}

/// Registered parameters of a whole BasisNet.
#[derive(Clone, Debug)]
pub struct BasisNetVars {
    pub lm: LightweightVars,
    pub bank: BankVars,
}

impl BasisNet {
    pub fn new(lm_spec: &LightweightSpec, bank: BasisBank, synthesis: SynthesisConfig, seed: u64) -> Result<Self> {
        synthesis.validate()?;
        let rows = match synthesis.mode {
            CoefficientMode::PerModel => 1,
            _ => bank.num_dynamic().max(1),
        };
        if bank.num_dynamic() == 0 {
            return Err(Error::Spec("bank needs at least one non-shared layer".into()));
        }
        if lm_spec.trunk.num_classes != bank.spec().num_classes {
            return Err(Error::Spec("lightweight and main model class counts differ".into()));
        }
        let lm = LightweightModel::new(lm_spec, rows, bank.num_bases(), seed)?;
        Ok(BasisNet { lm, bank, synthesis })
    }

    pub fn num_classes(&self) -> usize {
        self.bank.spec().num_classes
    }

    pub fn register(&self, tape: &mut Tape, train_lm: bool, train_bank: bool) -> BasisNetVars {
        BasisNetVars {
            lm: self.lm.register(tape, train_lm),
            bank: self.bank.register(tape, train_bank),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.lm.named_tensors();
        v.extend(self.bank.named_tensors());
        v
    }

    /// All parameter tensors in [`BasisNetVars`] order: LM first, then bank.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.lm.tensors_mut();
        v.extend(self.bank.tensors_mut());
        v
    }

    /// Raw `1×(rows·N)` coefficients → activated `K'×N` coefficients.
    pub fn coefficients_var(&self, tape: &mut Tape, raw: Var, opts: CoeffOptions<'_>) -> Result<Var> {
        let n = self.bank.num_bases();
        let dyn_rows = self.bank.num_dynamic();
        let rows = self.lm.coeff_rows();
        let raw = tape.reshape(raw, &[rows, n])?;
        let mut alpha = activate_var(tape, raw, self.synthesis.activation)?;
        if rows != dyn_rows {
            alpha = tape.repeat_rows(alpha, dyn_rows)?;
        }
        if opts.harden {
            let hard = synthesis::to_one_hot(&CoefficientMatrix::from_tensor(tape.value(alpha), CoefficientMode::PerLayer)?);
            return Ok(tape.constant(hard.to_tensor()));
        }
        let renorm = self.synthesis.renormalizes();
        match (opts.drop_mask, self.synthesis.bmd_order) {
            (Some(mask), BmdOrder::BeforeBlend) => {
                alpha = apply_bmd_var(tape, alpha, mask, renorm)?;
                alpha = blend_epsilon_var(tape, alpha, opts.epsilon)?;
            }
            (Some(mask), BmdOrder::AfterBlend) => {
                alpha = blend_epsilon_var(tape, alpha, opts.epsilon)?;
                alpha = apply_bmd_var(tape, alpha, mask, renorm)?;
            }
            (None, _) => alpha = blend_epsilon_var(tape, alpha, opts.epsilon)?,
        }
        Ok(alpha)
    }

    /// Full two-stage forward of one `1×C×H×W` sample on `tape`.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        vars: &BasisNetVars,
        x: &Tensor,
        opts: CoeffOptions<'_>,
    ) -> Result<SampleVars> {
        let lm_in = tape.constant(self.lm.prepare_input(x)?);
        let (initial_logits, raw) = lm_forward_vars(tape, &self.lm, &vars.lm, lm_in)?;
        let alpha = self.coefficients_var(tape, raw, opts)?;
        let final_logits = self.stage2_var(tape, vars, alpha, x)?;
        Ok(SampleVars {
            initial_logits,
            alpha,
            final_logits,
        })
    }

    /// Stage 2 with the given coefficients.
    pub fn stage2_var(&self, tape: &mut Tape, vars: &BasisNetVars, alpha: Var, x: &Tensor) -> Result<Var> {
        let kernels = synthesis::synthesize_vars(tape, &self.bank, &vars.bank, alpha)?;
        let xin = tape.constant(x.clone());
        let (_, logits) = synthesis::forward_with_kernels(tape, &self.bank, &vars.bank, &kernels, xin)?;
        Ok(logits)
    }

    /// Activated coefficients for one sample at inference (ε = 0, no dropout).
    pub fn coefficients(&self, x: &Tensor) -> Result<CoefficientMatrix> {
        let mut tape = Tape::new();
        let vars = self.lm.register(&mut tape, false);
        let lm_in = tape.constant(self.lm.prepare_input(x)?);
        let (_, raw) = lm_forward_vars(&mut tape, &self.lm, &vars, lm_in)?;
        let harden = self.synthesis.mode == CoefficientMode::OneHot;
        let alpha = self.coefficients_var(
            &mut tape,
            raw,
            CoeffOptions {
                harden,
                ..Default::default()
            },
        )?;
        CoefficientMatrix::from_tensor(tape.value(alpha), self.synthesis.mode)
    }

    /// Stage-2 logits for one sample and explicit coefficients.
    /// Returns `(logits, synthesis madds, conv/linear madds)`.
    pub fn stage2(&self, alpha: &CoefficientMatrix, x: &Tensor) -> Result<(Vec<f64>, u64, u64)> {
        let mut trace = Vec::new();
        self.stage2_traced(alpha, x, &mut trace)
    }

    fn stage2_traced(&self, alpha: &CoefficientMatrix, x: &Tensor, trace: &mut Vec<ExecEvent>) -> Result<(Vec<f64>, u64, u64)> {
        let mut tape = Tape::new();
        let vars = self.bank.register(&mut tape, false);
        let a = tape.constant(alpha.to_tensor());
        let kernels = synthesis::synthesize_vars(&mut tape, &self.bank, &vars, a)?;
        trace.extend(self.bank.dynamic_layers().into_iter().map(|layer| ExecEvent::Synthesized { layer }));
        let synth = tape.madds();
        let spec = self.bank.spec();
        backbone::check_input(spec, x.shape())?;
        let mut h = tape.constant(x.clone());
        for (k, layer) in spec.layers.iter().enumerate() {
            h = conv_block(&mut tape, layer, h, kernels[k], vars.biases[k])?;
            trace.push(ExecEvent::Layer { layer: k });
        }
        let (_, logits) = pooled_head(&mut tape, h, vars.head_weight, vars.head_bias)?;
        Ok((tape.value(logits).data().to_vec(), synth, tape.madds() - synth))
    }

    /// Early-terminating two-stage inference of one `1×C×H×W` sample.
    pub fn infer(&self, x: &Tensor, threshold: f64) -> Result<PipelineResult> {
        self.infer_traced(x, threshold, &mut Vec::new())
    }

    /// As [`BasisNet::infer`], appending execution events to `trace`.
    pub fn infer_traced(&self, x: &Tensor, threshold: f64, trace: &mut Vec<ExecEvent>) -> Result<PipelineResult> {
        check_threshold(threshold)?;
        if self.synthesis.epsilon != 0.0 {
            return Err(Error::invalid("epsilon must be 0 at inference"));
        }
        if x.shape().first() != Some(&1) {
            return Err(Error::shape("infer", &self.bank.spec().input_shape(1), x.shape()));
        }
        let mut tape = Tape::new();
        let vars = self.lm.register(&mut tape, false);
        let lm_in = tape.constant(self.lm.prepare_input(x)?);
        let (logits, raw) = lm_forward_vars(&mut tape, &self.lm, &vars, lm_in)?;
        trace.push(ExecEvent::Stage1);
        let lm_madds = tape.madds();
        let initial_logits = tape.value(logits).data().to_vec();
        let conf = confidence(&initial_logits);
        if conf >= threshold {
            return Ok(PipelineResult {
                initial_logits,
                confidence: conf,
                terminated: true,
                coefficients: None,
                final_logits: None,
                lm_madds,
                synthesis_madds: 0,
                stage2_madds: 0,
                madds_spent: lm_madds,
            });
        }
        let harden = self.synthesis.mode == CoefficientMode::OneHot;
        let alpha = self.coefficients_var(
            &mut tape,
            raw,
            CoeffOptions {
                harden,
                ..Default::default()
            },
        )?;
        let alpha = CoefficientMatrix::from_tensor(tape.value(alpha), self.synthesis.mode)?;
        trace.extend((0..alpha.rows()).map(|row| ExecEvent::Coefficients { row }));
        let (final_logits, synthesis_madds, stage2_madds) = self.stage2_traced(&alpha, x, trace)?;
        Ok(PipelineResult {
            initial_logits,
            confidence: conf,
            terminated: false,
            coefficients: Some(alpha),
            final_logits: Some(final_logits),
            lm_madds,
            synthesis_madds,
            stage2_madds,
            madds_spent: lm_madds + synthesis_madds + stage2_madds,
        })
    }

    /// Batch inference over samples, in input order.
    pub fn infer_all(&self, xs: &[Tensor], threshold: f64) -> Result<Vec<PipelineResult>> {
        xs.par_iter().map(|x| self.infer(x, threshold)).collect()
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    // values above 1 are accepted and mean "never terminate"
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid(format!("threshold {threshold} must be >= 0")));
    }
    Ok(())
}

/// Execution-order event emitted by traced forwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecEvent {
    Stage1,
    /// Coefficient row became available.
    Coefficients { row: usize },
    Synthesized { layer: usize },
    Layer { layer: usize },
}

/// Outcome of two-stage inference on one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub initial_logits: Vec<f64>,
    pub confidence: f64,
    pub terminated: bool,
    pub coefficients: Option<CoefficientMatrix>,
    pub final_logits: Option<Vec<f64>>,
    pub lm_madds: u64,
    pub synthesis_madds: u64,
    pub stage2_madds: u64,
    pub madds_spent: u64,
}

impl PipelineResult {
    /// Final prediction when stage 2 ran, initial prediction otherwise.
    pub fn prediction(&self) -> usize {
        let logits = self.final_logits.as_ref().unwrap_or(&self.initial_logits);
        synthesis::argmax(logits)
    }

    pub fn initial_prediction(&self) -> usize {
        synthesis::argmax(&self.initial_logits)
    }
}

/// Per-layer router `GAP(O_{k-1}) → linear → activation` for one non-shared layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `in_channels × N`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondConvRouters {
    pub routers: Vec<Router>,
    pub activation: CoefficientActivation,
}

impl CondConvRouters {
    /// One randomly initialized router per non-shared layer of `bank`.
    pub fn new(bank: &BasisBank, activation: CoefficientActivation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = bank.num_bases();
        let routers = bank
            .dynamic_layers()
            .into_iter()
            .map(|k| {
                let c = bank.spec().layers[k].in_channels;
                Router {
                    weight: fan_in_uniform(&mut rng, &[c, n], c, 1.0),
                    bias: Tensor::zeros(&[n]),
                }
            })
            .collect();
        CondConvRouters { routers, activation }
    }
}

/// Layer-by-layer dynamic forward of one `1×C×H×W` sample: each non-shared
/// layer's coefficients are computed from the previous layer's output.
pub fn condconv_forward(bank: &BasisBank, routers: &CondConvRouters, x: &Tensor) -> Result<Tensor> {
    condconv_forward_traced(bank, routers, x, &mut Vec::new())
}

pub fn condconv_forward_traced(
    bank: &BasisBank,
    routers: &CondConvRouters,
    x: &Tensor,
    trace: &mut Vec<ExecEvent>,
) -> Result<Tensor> {
    condconv_run(bank, routers, x, trace).map(|(logits, _)| logits)
}

/// Logits plus the coefficient row computed for every non-shared layer.
pub fn condconv_run(
    bank: &BasisBank,
    routers: &CondConvRouters,
    x: &Tensor,
    trace: &mut Vec<ExecEvent>,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    if routers.routers.len() != bank.num_dynamic() {
        return Err(Error::invalid(format!(
            "{} routers for {} non-shared layers",
            routers.routers.len(),
            bank.num_dynamic()
        )));
    }
    if x.shape().first() != Some(&1) {
        return Err(Error::shape("condconv_forward", &bank.spec().input_shape(1), x.shape()));
    }
    let spec = bank.spec();
    backbone::check_input(spec, x.shape())?;
    let mut tape = Tape::new();
    let vars = bank.register(&mut tape, false);
    let mut h = tape.constant(x.clone());
    let mut row = 0;
    let mut coeffs = Vec::new();
    for (k, layer) in spec.layers.iter().enumerate() {
        let kernel = match (&bank.layers[k], &vars.layers[k]) {
            (LayerKernels::Shared(_), synthesis::LayerVars::Shared(v)) => *v,
            (_, synthesis::LayerVars::Bases(b)) => {
                let r = &routers.routers[row];
                if r.weight.shape() != [layer.in_channels, bank.num_bases()] {
                    return Err(Error::shape(
                        "condconv router",
                        &[layer.in_channels, bank.num_bases()],
                        r.weight.shape(),
                    ));
                }
                let pooled = tape.global_avg_pool(h)?;
                let w = tape.constant(r.weight.clone());
                let bias = tape.constant(r.bias.clone());
                let z = tape.matmul(pooled, w)?;
                let z = tape.add_row_bias(z, bias)?;
                let alpha = activate_var(&mut tape, z, routers.activation)?;
                trace.push(ExecEvent::Coefficients { row });
                coeffs.push(tape.value(alpha).data().to_vec());
                let kernel = tape.combine(alpha, 0, b)?;
                trace.push(ExecEvent::Synthesized { layer: k });
                row += 1;
                kernel
            }
            _ => unreachable!("bank vars mirror bank layout"),
        };
        h = conv_block(&mut tape, layer, h, kernel, vars.biases[k])?;
        trace.push(ExecEvent::Layer { layer: k });
    }
    let (_, logits) = pooled_head(&mut tape, h, vars.head_weight, vars.head_bias)?;
    Ok((tape.value(logits).clone(), coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, LayerSpec};

    fn layer(i: usize, o: usize, s: usize) -> LayerSpec {
        LayerSpec {
            in_channels: i,
            out_channels: o,
            kernel_size: 3,
            stride: s,
            padding: 1,
            activation: Activation::Relu,
        }
    }

    fn model(num_bases: usize) -> BasisNet {
        let main = BackboneSpec {
            input: [1, 8, 8],
            layers: vec![layer(1, 4, 1), layer(4, 4, 2), layer(4, 6, 1)],
            num_classes: 3,
        };
        let lm = LightweightSpec {
            trunk: BackboneSpec {
                input: [1, 4, 4],
                layers: vec![layer(1, 3, 1), layer(3, 4, 2)],
                num_classes: 3,
            },
            input_transform: InputTransform::Downsample { factor: 2 },
        };
        let bank = BasisBank::new(&main, num_bases, &[true, false, false], 3).unwrap();
        BasisNet::new(&lm, bank, SynthesisConfig::default(), 4).unwrap()
    }

    fn input(seed: f64) -> Tensor {
        Tensor::from_fn(&[1, 1, 8, 8], |i| ((i as f64 + seed) * 0.61).sin())
    }

    #[test]
    fn downsample_shape_contract() {
        let m = model(2);
        assert_eq!(m.lm.prepare_input(&input(0.0)).unwrap().shape(), &[1, 1, 4, 4]);
        let wrong = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(lm_forward(&m.lm, &wrong).is_err());
    }

    #[test]
    fn lm_heads_are_deterministic() {
        let m = model(2);
        let a = lm_forward(&m.lm, &input(1.0)).unwrap();
        let b = lm_forward(&m.lm, &input(1.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), &[1, 3]);
        assert_eq!(a.1.shape(), &[1, 4]);
    }

    #[test]
    fn confidence_values() {
        assert!((confidence(&[0.0; 10]) - 0.1).abs() < 1e-15);
        assert!((confidence(&[100.0, 0.0, 0.0]) - 1.0).abs() < 1e-40);
        let a = confidence(&[0.3, -1.2, 2.0]);
        let b = confidence(&[5.3, 3.8, 7.0]);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn thresholds_control_termination() {
        let m = model(2);
        let r0 = m.infer(&input(2.0), 0.0).unwrap();
        assert!(r0.terminated && r0.final_logits.is_none() && r0.coefficients.is_none());
        let r1 = m.infer(&input(2.0), 1.01).unwrap();
        assert!(!r1.terminated && r1.final_logits.is_some());
        assert!(r0.madds_spent < r1.madds_spent);
        assert_eq!(r1.madds_spent, r1.lm_madds + r1.synthesis_madds + r1.stage2_madds);
        assert!(m.infer(&input(2.0), -0.1).is_err());
        assert!(m.infer(&input(2.0), f64::NAN).is_err());
    }

    #[test]
    fn nonzero_epsilon_rejected_at_inference() {
        let mut m = model(2);
        m.synthesis.epsilon = 0.5;
        assert!(m.infer(&input(0.0), 1.5).is_err());
    }

    #[test]
    fn coefficients_ready_before_stage2_layers() {
        let m = model(3);
        let mut trace = Vec::new();
        m.infer_traced(&input(0.5), 2.0, &mut trace).unwrap();
        let first_layer = trace.iter().position(|e| matches!(e, ExecEvent::Layer { .. })).unwrap();
        let last_coeff = trace.iter().rposition(|e| matches!(e, ExecEvent::Coefficients { .. })).unwrap();
        let last_synth = trace.iter().rposition(|e| matches!(e, ExecEvent::Synthesized { .. })).unwrap();
        assert!(last_coeff < first_layer && last_synth < first_layer);

        let routers = CondConvRouters::new(&m.bank, CoefficientActivation::Softmax, 0);
        let mut trace = Vec::new();
        condconv_forward_traced(&m.bank, &routers, &input(0.5), &mut trace).unwrap();
        let pos = |e: ExecEvent| trace.iter().position(|&t| t == e).unwrap();
        assert!(pos(ExecEvent::Layer { layer: 0 }) < pos(ExecEvent::Coefficients { row: 0 }));
        assert!(pos(ExecEvent::Layer { layer: 1 }) < pos(ExecEvent::Coefficients { row: 1 }));
    }

    #[test]
    fn condconv_router_count_checked() {
        let m = model(2);
        let mut routers = CondConvRouters::new(&m.bank, CoefficientActivation::Softmax, 0);
        routers.routers.pop();
        assert!(condconv_forward(&m.bank, &routers, &input(0.0)).is_err());
    }

    #[test]
    fn condconv_one_hot_routers_select_basis() {
        let m = model(3);
        let mut routers = CondConvRouters::new(&m.bank, CoefficientActivation::Softmax, 0);
        for r in &mut routers.routers {
            r.weight = Tensor::zeros(r.weight.shape());
            r.bias = Tensor::new(vec![3], vec![-1e3, 0.0, -1e3]).unwrap();
        }
        let x = input(0.9);
        let got = condconv_forward(&m.bank, &routers, &x).unwrap();
        let want = backbone::forward(&m.bank.basis_params(1), m.bank.spec(), &x).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn condconv_single_basis_is_plain_backbone() {
        let m = model(1);
        let routers = CondConvRouters::new(&m.bank, CoefficientActivation::Softmax, 0);
        let x = input(0.2);
        let got = condconv_forward(&m.bank, &routers, &x).unwrap();
        let want = backbone::forward(&m.bank.basis_params(0), m.bank.spec(), &x).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn condconv_coefficients_depend_on_earlier_layers() {
        let m = model(3);
        let routers = CondConvRouters::new(&m.bank, CoefficientActivation::Softmax, 1);
        let x = input(0.3);
        let (_, before) = condconv_run(&m.bank, &routers, &x, &mut Vec::new()).unwrap();
        let mut perturbed = m.bank.clone();
        let LayerKernels::Bases(b) = &mut perturbed.layers[1] else { panic!() };
        b[0].data_mut()[0] += 0.5;
        let (_, after) = condconv_run(&perturbed, &routers, &x, &mut Vec::new()).unwrap();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
    }
}
