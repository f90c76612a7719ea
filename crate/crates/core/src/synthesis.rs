//! Basis kernel banks and input-specific kernel synthesis.
//!
//! A [`BasisBank`] holds, for every conv layer of a backbone, either one
//! shared kernel or `N` basis kernels. Combination coefficients (one row per
//! non-shared layer, one column per basis) blend the basis kernels into a
//! single specialist: `W̃_k = Σ_n α[k][n] · W_k^n`. Biases and the classifier
//! head are shared by all bases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, conv_block, pooled_head, BackboneParams, BackboneSpec};
use crate::error::{Error, Result};
use crate::tensor::{softmax_along, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientActivation {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// Independent row per non-shared layer.
    PerLayer,
    /// One row repeated for every layer.
    PerModel,
    /// Rows hardened to argmax selections.
    OneHot,
}

/// Where basis dropout sits relative to the ε-blend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmdOrder {
    AfterBlend,
    BeforeBlend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub activation: CoefficientActivation,
    pub mode: CoefficientMode,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub bmd_rate: f64,
    #[serde(default = "default_true")]
    pub bmd_renormalize: bool,
    #[serde(default = "default_order")]
    pub bmd_order: BmdOrder,
}

fn default_true() -> bool {
    true
}

fn default_order() -> BmdOrder {
    BmdOrder::AfterBlend
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            activation: CoefficientActivation::Softmax,
            mode: CoefficientMode::PerLayer,
            epsilon: 0.0,
            bmd_rate: 0.0,
            bmd_renormalize: true,
            bmd_order: BmdOrder::AfterBlend,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.bmd_rate) {
            return Err(Error::invalid(format!("bmd_rate {} outside [0, 1)", self.bmd_rate)));
        }
        Ok(())
    }

    /// Renormalization only applies to convex (softmax) rows; sigmoid
    /// coefficients stay unnormalized.
    pub fn renormalizes(&self) -> bool {
        self.bmd_renormalize && self.activation == CoefficientActivation::Softmax
    }
}

/// `rows × N` combination weights, one row per non-shared layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    mode: CoefficientMode,
}

impl CoefficientMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, mode: CoefficientMode) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::shape("coefficients", &[rows, cols], &[values.len()]));
        }
        let m = CoefficientMatrix {
            rows,
            cols,
            values,
            mode,
        };
        match mode {
            CoefficientMode::PerModel if (1..rows).any(|k| m.row(k) != m.row(0)) => {
                Err(Error::invalid("per-model coefficients must have identical rows"))
            }
            CoefficientMode::OneHot if !(0..rows).all(|k| is_one_hot(m.row(k))) => {
                Err(Error::invalid("one-hot coefficients must select exactly one basis per row"))
            }
            _ => Ok(m),
        }
    }

    pub fn from_tensor(t: &Tensor, mode: CoefficientMode) -> Result<Self> {
        match t.shape() {
            [r, c] => Self::new(*r, *c, t.data().to_vec(), mode),
            s => Err(Error::shape("coefficients", &[0, 0], s)),
        }
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        CoefficientMatrix {
            rows,
            cols,
            values: vec![1.0 / cols as f64; rows * cols],
            mode: CoefficientMode::PerLayer,
        }
    }

    /// Repeats a single row for `rows` layers.
    pub fn per_model(row: &[f64], rows: usize) -> Result<Self> {
        Self::new(rows, row.len(), row.repeat(rows), CoefficientMode::PerModel)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> CoefficientMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }

    pub fn get(&self, k: usize, n: usize) -> f64 {
        self.values[k * self.cols + n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.values.clone()).expect("validated shape")
    }

    pub(crate) fn with_values(&self, values: Vec<f64>, mode: CoefficientMode) -> Self {
        CoefficientMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
            mode,
        }
    }
}

fn is_one_hot(row: &[f64]) -> bool {
    row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax over the basis axis, or elementwise sigmoid.
pub fn activate(raw: &Tensor, activation: CoefficientActivation) -> Result<CoefficientMatrix> {
    let [rows, cols] = match raw.shape() {
        [r, c] => [*r, *c],
        s => return Err(Error::shape("activate", &[0, 0], s)),
    };
    let values = match activation {
        CoefficientActivation::Softmax => softmax_along(raw, 1).into_data(),
        CoefficientActivation::Sigmoid => raw.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
    };
    CoefficientMatrix::new(rows, cols, values, CoefficientMode::PerLayer)
}

/// `ε · (1/N) + (1 − ε) · α`.
pub fn blend_epsilon(alpha: &CoefficientMatrix, epsilon: f64) -> Result<CoefficientMatrix> {
    if alpha.mode == CoefficientMode::OneHot {
        return Err(Error::invalid("epsilon blend is undefined for one-hot coefficients"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let uniform = epsilon / alpha.cols as f64;
    let values = alpha.values.iter().map(|&a| (1.0 - epsilon) * a + uniform).collect();
    Ok(alpha.with_values(values, alpha.mode))
}

/// Zeroes dropped bases in every row; optionally rescales survivors to sum to 1.
pub fn apply_bmd(alpha: &CoefficientMatrix, drop_mask: &[bool], renormalize: bool) -> Result<CoefficientMatrix> {
    if drop_mask.len() != alpha.cols {
        return Err(Error::shape("apply_bmd", &[alpha.cols], &[drop_mask.len()]));
    }
    if drop_mask.iter().all(|&d| d) {
        return Err(Error::invalid("basis dropout must leave at least one basis"));
    }
    let mut values = alpha.values.clone();
    for row in values.chunks_mut(alpha.cols) {
        for (v, &dropped) in row.iter_mut().zip(drop_mask) {
            if dropped {
                *v = 0.0;
            }
        }
        if renormalize {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(alpha.with_values(values, alpha.mode))
}

/// Replaces every row by the one-hot of its argmax.
pub fn to_one_hot(alpha: &CoefficientMatrix) -> CoefficientMatrix {
    let mut values = vec![0.0; alpha.values.len()];
    for k in 0..alpha.rows {
        values[k * alpha.cols + argmax(alpha.row(k))] = 1.0;
    }
    alpha.with_values(values, CoefficientMode::OneHot)
}

/// How the bases of a non-shared layer are initialized.
///
/// Independently drawn bases average to a kernel whose scale shrinks like
/// `1/sqrt(N)`, which starves a deep stack without normalization while the
/// coefficients are still near uniform. `Perturbed` draws one fan-in-scaled
/// kernel per layer and gives every basis its own fan-in-scaled offset times
/// `spread`, so any convex blend starts near the fan-in scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisInit {
    Independent,
    Perturbed { spread: f64 },
}

impl Default for BasisInit {
    fn default() -> Self {
        BasisInit::Perturbed { spread: 0.5 }
    }
}

impl BasisInit {
    pub fn validate(&self) -> Result<()> {
        match self {
            BasisInit::Perturbed { spread } if !(*spread > 0.0 && spread.is_finite()) => {
                Err(Error::Config(format!("basis spread must be positive, got {spread}")))
            }
            _ => Ok(()),
        }
    }
}

/// Kernel storage for one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKernels {
    Shared(Tensor),
    Bases(Vec<Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisBank {
    spec: BackboneSpec,
    num_bases: usize,
    pub layers: Vec<LayerKernels>,
    pub biases: Vec<Tensor>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl BasisBank {
    /// Fresh bank with the default [`BasisInit`].
    pub fn new(spec: &BackboneSpec, num_bases: usize, share_mask: &[bool], seed: u64) -> Result<Self> {
        Self::with_init(spec, num_bases, share_mask, seed, BasisInit::default())
    }

    pub fn with_init(
        spec: &BackboneSpec,
        num_bases: usize,
        share_mask: &[bool],
        seed: u64,
        init: BasisInit,
    ) -> Result<Self> {
        spec.validate()?;
        init.validate()?;
        if num_bases == 0 {
            return Err(Error::Spec("number of bases must be >= 1".into()));
        }
        if share_mask.len() != spec.num_layers() {
            return Err(Error::Spec(format!(
                "share mask has {} entries for {} layers",
                share_mask.len(),
                spec.num_layers()
            )));
        }
        let base = backbone::build(spec, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
        let layers = spec
            .layers
            .iter()
            .zip(share_mask)
            .zip(base.kernels)
            .map(|((l, &shared), first)| {
                if shared || num_bases == 1 {
                    return if shared {
                        LayerKernels::Shared(first)
                    } else {
                        LayerKernels::Bases(vec![first])
                    };
                }
                let bases = match init {
                    BasisInit::Independent => {
                        let mut b = vec![first];
                        b.extend((1..num_bases).map(|_| backbone::init_kernel(&mut rng, l)));
                        b
                    }
                    BasisInit::Perturbed { spread } => (0..num_bases)
                        .map(|_| {
                            let noise = backbone::init_kernel(&mut rng, l);
                            let data = first.data().iter().zip(noise.data()).map(|(c, e)| c + spread * e).collect();
                            Tensor::new(first.shape().to_vec(), data).expect("same shape")
                        })
                        .collect(),
                };
                LayerKernels::Bases(bases)
            })
            .collect();
        Ok(BasisBank {
            spec: spec.clone(),
            num_bases,
            layers,
            biases: base.biases,
            head_weight: base.head_weight,
            head_bias: base.head_bias,
        })
    }

    /// Single-basis bank wrapping plain backbone parameters.
    pub fn from_backbone(spec: &BackboneSpec, params: &BackboneParams, share_mask: &[bool]) -> Result<Self> {
        spec.validate()?;
        if share_mask.len() != spec.num_layers() {
            return Err(Error::Spec("share mask length mismatch".into()));
        }
        let layers = params
            .kernels
            .iter()
            .zip(share_mask)
            .map(|(k, &shared)| {
                if shared {
                    LayerKernels::Shared(k.clone())
                } else {
                    LayerKernels::Bases(vec![k.clone()])
                }
            })
            .collect();
        Ok(BasisBank {
            spec: spec.clone(),
            num_bases: 1,
            layers,
            biases: params.biases.clone(),
            head_weight: params.head_weight.clone(),
            head_bias: params.head_bias.clone(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn share_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| matches!(l, LayerKernels::Shared(_))).collect()
    }

    /// Backbone indices of non-shared layers, in coefficient-row order.
    pub fn dynamic_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerKernels::Bases(_)))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic_layers().len()
    }

    /// Coefficient row for backbone layer `k`, if it is non-shared.
    pub fn coefficient_row(&self, layer: usize) -> Option<usize> {
        self.dynamic_layers().iter().position(|&k| k == layer)
    }

    /// Plain backbone parameters of basis `n` (shared layers included).
    pub fn basis_params(&self, n: usize) -> BackboneParams {
        BackboneParams {
            kernels: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerKernels::Shared(t) => t.clone(),
                    LayerKernels::Bases(b) => b[n].clone(),
                })
                .collect(),
            biases: self.biases.clone(),
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
        }
    }

    /// Kernel parameters of one basis over non-shared layers.
    pub fn params_per_basis(&self) -> usize {
        self.dynamic_layers()
            .iter()
            .map(|&k| self.spec.layers[k].kernel_numel())
            .sum()
    }

    /// Parameters stored exactly once: shared kernels, biases, classifier.
    pub fn params_shared(&self) -> usize {
        backbone::count_params(&self.spec) - self.params_per_basis()
    }

    pub fn params_total(&self) -> usize {
        self.params_shared() + self.num_bases * self.params_per_basis()
    }

    /// Dense combination cost: one multiply per basis parameter.
    pub fn synthesis_madds(&self) -> u64 {
        (self.num_bases * self.params_per_basis()) as u64
    }

    /// Combination cost given actual coefficients: a pure one-hot row is a
    /// selection (free); other rows cost one multiply per nonzero basis entry.
    pub fn synthesis_madds_effective(&self, alpha: &CoefficientMatrix) -> u64 {
        self.dynamic_layers()
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                let row = alpha.row(r);
                if is_one_hot(row) {
                    0
                } else {
                    (row.iter().filter(|&&v| v != 0.0).count() * self.spec.layers[k].kernel_numel()) as u64
                }
            })
            .sum()
    }

    fn check_alpha(&self, rows: usize, cols: usize) -> Result<()> {
        if cols != self.num_bases || rows != self.num_dynamic() {
            return Err(Error::shape(
                "synthesize",
                &[self.num_dynamic(), self.num_bases],
                &[rows, cols],
            ));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BankVars {
        BankVars {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerKernels::Shared(t) => LayerVars::Shared(tape.leaf(t.clone(), trainable)),
                    LayerKernels::Bases(b) => {
                        LayerVars::Bases(b.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
                    }
                })
                .collect(),
            biases: self.biases.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            head_weight: tape.leaf(self.head_weight.clone(), trainable),
            head_bias: tape.leaf(self.head_bias.clone(), trainable),
        }
    }

    /// Every stored tensor in a fixed order (matches [`BankVars::all`]).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerKernels::Shared(t) => out.push(t),
                LayerKernels::Bases(b) => out.extend(b.iter_mut()),
            }
        }
        out.extend(self.biases.iter_mut());
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            match l {
                LayerKernels::Shared(t) => out.push((format!("bank.L{k}.kernel"), t)),
                LayerKernels::Bases(b) => {
                    for (n, t) in b.iter().enumerate() {
                        out.push((format!("bank.L{k}.basis{n}"), t));
                    }
                }
            }
        }
        for (k, t) in self.biases.iter().enumerate() {
            out.push((format!("bank.L{k}.bias"), t));
        }
        out.push(("bank.head.weight".into(), &self.head_weight));
        out.push(("bank.head.bias".into(), &self.head_bias));
        out
    }
}

/// Synthesized kernel for every layer (shared kernels pass through).
pub fn synthesize(bank: &BasisBank, alpha: &CoefficientMatrix) -> Result<Vec<Tensor>> {
    bank.check_alpha(alpha.rows, alpha.cols)?;
    let mut row = 0;
    Ok(bank
        .layers
        .iter()
        .map(|l| match l {
            LayerKernels::Shared(t) => t.clone(),
            LayerKernels::Bases(b) => {
                let mut out = vec![0.0; b[0].numel()];
                for (n, t) in b.iter().enumerate() {
                    let a = alpha.get(row, n);
                    out.iter_mut().zip(t.data()).for_each(|(o, &w)| *o += a * w);
                }
                row += 1;
                Tensor::new(b[0].shape().to_vec(), out).expect("basis shape")
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub enum LayerVars {
    Shared(Var),
    Bases(Vec<Var>),
}

/// A bank registered on a tape.
#[derive(Clone, Debug)]
pub struct BankVars {
    pub layers: Vec<LayerVars>,
    pub biases: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BankVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerVars::Shared(v) => out.push(*v),
                LayerVars::Bases(b) => out.extend(b),
            }
        }
        out.extend(&self.biases);
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }

    /// Kernels of basis `n` for directly evaluating one basis model.
    pub fn basis_kernels(&self, n: usize) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerVars::Shared(v) => *v,
                LayerVars::Bases(b) => b[n],
            })
            .collect()
    }
}

/// Differentiable activation of raw `rows×N` coefficients.
pub fn activate_var(tape: &mut Tape, raw: Var, activation: CoefficientActivation) -> Result<Var> {
    match activation {
        CoefficientActivation::Softmax => tape.softmax(raw, 1),
        CoefficientActivation::Sigmoid => tape.sigmoid(raw),
    }
}

pub fn blend_epsilon_var(tape: &mut Tape, alpha: Var, epsilon: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon == 0.0 {
        return Ok(alpha);
    }
    let n = tape.shape(alpha)[1];
    let scaled = tape.scale(alpha, 1.0 - epsilon)?;
    tape.add_scalar(scaled, epsilon / n as f64)
}

pub fn apply_bmd_var(tape: &mut Tape, alpha: Var, drop_mask: &[bool], renormalize: bool) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    if drop_mask.len() != shape[1] {
        return Err(Error::shape("apply_bmd", &[shape[1]], &[drop_mask.len()]));
    }
    if drop_mask.iter().all(|&d| d) {
        return Err(Error::invalid("basis dropout must leave at least one basis"));
    }
    if !drop_mask.iter().any(|&d| d) {
        return Ok(alpha);
    }
    let keep: Vec<f64> = drop_mask.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let mask = tape.constant(Tensor::new(shape.clone(), keep.repeat(shape[0]))?);
    let masked = tape.mul(alpha, mask)?;
    if renormalize {
        tape.normalize_last_axis(masked)
    } else {
        Ok(masked)
    }
}

/// Differentiable synthesis: one kernel var per backbone layer.
pub fn synthesize_vars(tape: &mut Tape, bank: &BasisBank, vars: &BankVars, alpha: Var) -> Result<Vec<Var>> {
    let s = tape.shape(alpha).to_vec();
    bank.check_alpha(s[0], s[1])?;
    let mut row = 0;
    vars.layers
        .iter()
        .map(|l| match l {
            LayerVars::Shared(v) => Ok(*v),
            LayerVars::Bases(b) => {
                let out = tape.combine(alpha, row, b);
                row += 1;
                out
            }
        })
        .collect()
}

/// Backbone forward with explicit per-layer kernels. Returns `(features, logits)`.
pub fn forward_with_kernels(
    tape: &mut Tape,
    bank: &BasisBank,
    vars: &BankVars,
    kernels: &[Var],
    x: Var,
) -> Result<(Var, Var)> {
    let spec = bank.spec();
    backbone::check_input(spec, tape.shape(x))?;
    let mut h = x;
    for (k, layer) in spec.layers.iter().enumerate() {
        h = conv_block(tape, layer, h, kernels[k], vars.biases[k])?;
    }
    pooled_head(tape, h, vars.head_weight, vars.head_bias)
}

/// Logits for a batch that shares one coefficient matrix.
pub fn synthesized_forward(bank: &BasisBank, alpha: &CoefficientMatrix, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bank.register(&mut tape, false);
    let a = tape.constant(alpha.to_tensor());
    let kernels = synthesize_vars(&mut tape, bank, &vars, a)?;
    let x = tape.constant(input.clone());
    let (_, logits) = forward_with_kernels(&mut tape, bank, &vars, &kernels, x)?;
    Ok(tape.value(logits).clone())
}
