//! Joint end-to-end training of the lightweight model and the basis bank.
//!
//! Loss per sample is `CE(final, y) + λ·CE(initial, y)`, plus an L2 penalty
//! over every parameter applied once per step. Basis kernels only see the
//! first term (the lightweight model's own CE never reaches them); the
//! lightweight model receives both terms, the first through the coefficient
//! path.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneParams, BackboneSpec};
use crate::error::{Error, Result};
use crate::harness::data::{augment, Dataset};
use crate::pipeline::{BasisNet, CoeffOptions};
use crate::synthesis::CoefficientMode;
use crate::tensor::{softmax_along, Tape, Target, Tensor, Var};

/// Which heads learn from teacher soft targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillPolicy {
    BothHeads,
    /// Bases distilled, lightweight model on hard labels.
    BasesOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub backbone: BackboneSpec,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistillConfig {
    Off,
    On {
        teacher: TeacherConfig,
        /// Mixing weight of the soft target against the one-hot label.
        #[serde(default = "one")]
        soft_weight: f64,
        #[serde(default = "both_heads")]
        policy: DistillPolicy,
    },
}

fn one() -> f64 {
    1.0
}

fn both_heads() -> DistillPolicy {
    DistillPolicy::BothHeads
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub l2_weight: f64,
    #[serde(default = "distill_off")]
    pub distill: DistillConfig,
}

fn distill_off() -> DistillConfig {
    DistillConfig::Off
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            l2_weight: 0.0,
            distill: DistillConfig::Off,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.l2_weight >= 0.0) {
            return Err(Error::Config("lambda and l2_weight must be >= 0".into()));
        }
        if let DistillConfig::On { soft_weight, .. } = &self.distill {
            if !(0.0..=1.0).contains(soft_weight) {
                return Err(Error::Config("soft_weight must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
}

/// `base · decay_factor^floor(step / decay_every)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRate {
    pub base: f64,
    #[serde(default = "one")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
}

fn default_decay_every() -> u64 {
    1000
}

impl LearningRate {
    pub fn at(&self, step: u64) -> f64 {
        self.base * self.decay_factor.powi((step / self.decay_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub crop_pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub epsilon_hold_steps: u64,
    pub epsilon_decay_steps: u64,
    pub learning_rate: LearningRate,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "sgd")]
    pub optimizer: OptimizerKind,
    /// Global-norm gradient clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Draw a dropout mask per sample instead of per step.
    #[serde(default)]
    pub per_sample_bmd: bool,
    #[serde(default)]
    pub augment: Augmentation,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

fn sgd() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_eval_every() -> u64 {
    100
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_hold_steps + self.epsilon_decay_steps > self.total_steps {
            return Err(Error::Config(
                "epsilon hold + decay steps exceed total_steps".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.base > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    /// RNG for everything random at `step` (batch indices, dropout, augmentation).
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }
}

/// 1 during the hold window, linear down to 0 over the decay window, then 0.
pub fn epsilon_at(step: u64, schedule: &TrainSchedule) -> f64 {
    let hold = schedule.epsilon_hold_steps;
    let decay = schedule.epsilon_decay_steps;
    if step < hold {
        1.0
    } else if step < hold + decay {
        1.0 - (step - hold) as f64 / decay as f64
    } else {
        0.0
    }
}

/// Each basis dropped independently with probability `rate`; redrawn until
/// at least one survives. `true` marks a dropped basis.
pub fn sample_bmd_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![false; n];
    }
    loop {
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
        if mask.iter().any(|&d| !d) {
            return mask;
        }
    }
}

/// `CE(final, y) + λ·CE(initial, y) + l2·Σ‖p‖²` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    final_logits: Var,
    initial_logits: Var,
    target: &Target,
    params: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    let synth = tape.cross_entropy(final_logits, target)?;
    let lm = tape.cross_entropy(initial_logits, target)?;
    let lm = tape.scale(lm, cfg.lambda)?;
    let mut loss = tape.add(synth, lm)?;
    if cfg.l2_weight > 0.0 {
        for &p in params {
            let sq = tape.sum_squares(p)?;
            let sq = tape.scale(sq, cfg.l2_weight)?;
            loss = tape.add(loss, sq)?;
        }
    }
    Ok(loss)
}

/// Teacher softmax outputs (temperature 1) for every image.
pub fn distill_targets(
    teacher_spec: &BackboneSpec,
    teacher: &BackboneParams,
    images: &[Tensor],
    num_classes: usize,
) -> Result<Vec<Vec<f64>>> {
    if teacher_spec.num_classes != num_classes {
        return Err(Error::invalid(format!(
            "teacher predicts {} classes, student {num_classes}",
            teacher_spec.num_classes
        )));
    }
    images
        .par_iter()
        .map(|x| {
            let logits = backbone::forward(teacher, teacher_spec, x)?;
            Ok(softmax_along(&logits.reshape(&[num_classes])?, 0).into_data())
        })
        .collect()
}

/// Plain SGD cross-entropy training of a standalone backbone (the teacher).
pub fn train_backbone(spec: &BackboneSpec, data: &Dataset, cfg: &TeacherConfig, seed: u64) -> Result<BackboneParams> {
    let mut params = backbone::build(spec, seed)?;
    let schedule_seed = seed ^ 0x7eac_4e55;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule_seed);
        rng.set_stream(step);
        let idx = batch_indices(data.len(), cfg.batch_size, &mut rng);
        let per: Vec<Result<(f64, Vec<Tensor>)>> = idx
            .par_iter()
            .map(|&i| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape, true);
                let x = tape.constant(data.image(i));
                let (_, logits) = backbone::forward_vars(&mut tape, spec, &vars, x)?;
                let loss = tape.cross_entropy(logits, &Target::Hard(vec![data.label(i)]))?;
                let lv = tape.value(loss).item();
                let mut g = tape.backward(loss)?;
                Ok((lv, collect_grads(&mut g, &vars.all(), &tape)))
            })
            .collect();
        let (_, grads) = reduce(per, idx.len())?;
        for (p, g) in params.tensors_mut().zip(&grads) {
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= cfg.learning_rate * d);
        }
    }
    Ok(params)
}

fn batch_indices(len: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch >= len {
        let mut v: Vec<usize> = (0..len).collect();
        v.sort_unstable();
        return v;
    }
    index::sample(rng, len, batch).into_vec()
}

fn collect_grads(g: &mut crate::tensor::Gradients, vars: &[Var], tape: &Tape) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect()
}

/// Sums per-sample losses and gradients in sample order and divides by `n`.
fn reduce(per: Vec<Result<(f64, Vec<Tensor>)>>, n: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::invalid("empty batch"))??;
    for item in iter {
        let (l, g) = item?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / n as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grads))
}

/// Mutable training state: model, step counter and optimizer accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: BasisNet,
    pub step: u64,
    /// RMSProp squared-gradient averages, one per parameter tensor (empty for SGD).
    pub rms: Vec<Tensor>,
    /// LM weights receive no updates and coefficients are hardened to one-hot.
    pub one_hot_finetune: bool,
}

impl TrainState {
    pub fn new(model: BasisNet) -> Self {
        TrainState {
            model,
            step: 0,
            rms: Vec::new(),
            one_hot_finetune: false,
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lm_loss: f64,
    pub synth_loss: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

/// One labeled mini-batch, optionally with teacher distributions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub soft: Option<Vec<Vec<f64>>>,
}

impl Batch {
    /// Draws the batch for `step` from `data` using the schedule's step RNG.
    pub fn draw(data: &Dataset, soft: Option<&[Vec<f64>]>, schedule: &TrainSchedule, step: u64) -> Batch {
        let mut rng = schedule.step_rng(step);
        let idx = batch_indices(data.len(), schedule.batch_size, &mut rng);
        let aug = &schedule.augment;
        let images = idx
            .iter()
            .map(|&i| {
                let img = data.image(i);
                if aug.flip || aug.crop_pad > 0 {
                    augment(&img, aug.flip, aug.crop_pad, &mut rng)
                } else {
                    img
                }
            })
            .collect();
        Batch {
            images,
            labels: idx.iter().map(|&i| data.label(i)).collect(),
            soft: soft.map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
        }
    }
}

fn mixed_target(label: usize, soft: Option<&Vec<f64>>, weight: f64, classes: usize) -> Result<Target> {
    match soft {
        None => Ok(Target::Hard(vec![label])),
        Some(s) => {
            let mut t: Vec<f64> = s.iter().map(|p| p * weight).collect();
            t[label] += 1.0 - weight;
            Ok(Target::Soft(Tensor::new(vec![1, classes], t)?))
        }
    }
}

/// Forward, loss, backward and parameter update for one batch.
pub fn train_step(state: &mut TrainState, batch: &Batch, schedule: &TrainSchedule, cfg: &LossConfig) -> Result<StepMetrics> {
    let step = state.step;
    let harden = state.one_hot_finetune;
    let epsilon = if harden { 0.0 } else { epsilon_at(step, schedule) };
    let model = &state.model;
    let n = model.bank.num_bases();
    let classes = model.num_classes();

    // stream offset keeps dropout draws independent of batch sampling
    let mut rng = schedule.step_rng(step);
    rng.set_word_pos(1 << 40);
    let rate = model.synthesis.bmd_rate;
    let masks: Vec<Option<Vec<bool>>> = if harden || rate <= 0.0 {
        vec![None; batch.images.len()]
    } else if schedule.per_sample_bmd {
        (0..batch.images.len()).map(|_| Some(sample_bmd_mask(n, rate, &mut rng))).collect()
    } else {
        vec![Some(sample_bmd_mask(n, rate, &mut rng)); batch.images.len()]
    };
    let (soft_weight, policy) = match &cfg.distill {
        DistillConfig::On { soft_weight, policy, .. } => (*soft_weight, Some(*policy)),
        DistillConfig::Off => (0.0, None),
    };
    let soft_for = |i: usize| batch.soft.as_ref().filter(|_| policy.is_some()).map(|s| &s[i]);

    let per: Vec<Result<(f64, f64, f64, Vec<Tensor>)>> = (0..batch.images.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, !harden, true);
            let sv = model.forward_sample(
                &mut tape,
                &vars,
                &batch.images[i],
                CoeffOptions {
                    epsilon,
                    drop_mask: masks[i].as_deref(),
                    harden,
                },
            )?;
            let final_t = mixed_target(batch.labels[i], soft_for(i), soft_weight, classes)?;
            let lm_soft = if policy == Some(DistillPolicy::BothHeads) { soft_for(i) } else { None };
            let lm_t = mixed_target(batch.labels[i], lm_soft, soft_weight, classes)?;
            let synth = tape.cross_entropy(sv.final_logits, &final_t)?;
            let lm = tape.cross_entropy(sv.initial_logits, &lm_t)?;
            let lm_scaled = tape.scale(lm, cfg.lambda)?;
            let loss = tape.add(synth, lm_scaled)?;
            let (sv_, lv_, tv_) = (tape.value(synth).item(), tape.value(lm).item(), tape.value(loss).item());
            let mut g = tape.backward(loss)?;
            let mut all = vars.lm.all();
            all.extend(vars.bank.all());
            Ok((tv_, lv_, sv_, collect_grads(&mut g, &all, &tape)))
        })
        .collect();

    let bsz = batch.images.len() as f64;
    let mut lm_sum = 0.0;
    let mut synth_sum = 0.0;
    let per: Vec<Result<(f64, Vec<Tensor>)>> = per
        .into_iter()
        .map(|r| {
            r.map(|(t, l, s, g)| {
                lm_sum += l;
                synth_sum += s;
                (t, g)
            })
        })
        .collect();
    let (mut loss, mut grads) = reduce(per, batch.images.len())?;

    let lm_count = state.model.lm.tensors_mut().len();
    let mut params = state.model.tensors_mut();
    if cfg.l2_weight > 0.0 {
        for (i, (p, g)) in params.iter().zip(grads.iter_mut()).enumerate() {
            if harden && i < lm_count {
                continue;
            }
            loss += cfg.l2_weight * p.sum_squares();
            g.data_mut().iter_mut().zip(p.data()).for_each(|(d, w)| *d += 2.0 * cfg.l2_weight * w);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("loss is {loss}"),
        });
    }
    if harden {
        for g in grads.iter_mut().take(lm_count) {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let grad_norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: "non-finite gradient".into(),
        });
    }
    if let Some(clip) = schedule.clip_norm {
        if grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    let lr = schedule.learning_rate.at(step);
    match schedule.optimizer {
        OptimizerKind::Sgd => {
            for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
                if harden && i < lm_count {
                    continue;
                }
                p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
            }
        }
        OptimizerKind::Rmsprop => {
            const DECAY: f64 = 0.9;
            const EPS: f64 = 1e-8;
            if state.rms.is_empty() {
                state.rms = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            }
            for (i, ((p, g), ms)) in params.iter_mut().zip(&grads).zip(state.rms.iter_mut()).enumerate() {
                if harden && i < lm_count {
                    continue;
                }
                for ((w, &d), m) in p.data_mut().iter_mut().zip(g.data()).zip(ms.data_mut()) {
                    *m = DECAY * *m + (1.0 - DECAY) * d * d;
                    *w -= lr * d / (m.sqrt() + EPS);
                }
            }
        }
    }
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss,
        lm_loss: lm_sum / bsz,
        synth_loss: synth_sum / bsz,
        epsilon,
        learning_rate: lr,
        grad_norm,
    })
}

/// Freezes the lightweight model and continues training the bank with
/// hardened one-hot coefficients for `schedule.total_steps` steps.
pub fn finetune_one_hot(
    state: TrainState,
    data: &Dataset,
    schedule: &TrainSchedule,
    cfg: &LossConfig,
) -> Result<TrainState> {
    if state.step == 0 {
        return Err(Error::invalid("one-hot fine-tuning needs a trained model"));
    }
    let mut state = state;
    state.one_hot_finetune = true;
    state.model.synthesis.mode = CoefficientMode::OneHot;
    let start = state.step;
    for s in 0..schedule.total_steps {
        let batch = Batch::draw(data, None, schedule, start + s);
        train_step(&mut state, &batch, schedule, cfg)?;
    }
    Ok(state)
}

/// Accuracy of the lightweight model alone and of the full two-stage model
/// (no early termination), plus the skip rate at `threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub acc_lm: f64,
    pub acc_full: f64,
    pub skip_rate: f64,
}

pub fn evaluate(model: &BasisNet, data: &Dataset, threshold: f64) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let results = model.infer_all(&data.images(), f64::INFINITY)?;
    let n = data.len() as f64;
    let mut lm = 0usize;
    let mut full = 0usize;
    let mut skip = 0usize;
    for (r, &y) in results.iter().zip(data.labels()) {
        lm += (r.initial_prediction() == y) as usize;
        full += (r.prediction() == y) as usize;
        skip += (r.confidence >= threshold) as usize;
    }
    Ok(EvalSummary {
        acc_lm: lm as f64 / n,
        acc_full: full as f64 / n,
        skip_rate: skip as f64 / n,
    })
}

/// One row of the training metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub lm_loss: f64,
    pub synth_loss: f64,
    pub eval_acc_lm: f64,
    pub eval_acc_full: f64,
    pub epsilon: f64,
    pub skip_rate_at_default_threshold: f64,
}

/// Runs `state` forward until `schedule.total_steps`, evaluating every
/// `eval_every` steps and at the end.
pub fn train(
    state: &mut TrainState,
    train_data: &Dataset,
    eval_data: &Dataset,
    soft: Option<&[Vec<f64>]>,
    schedule: &TrainSchedule,
    cfg: &LossConfig,
    default_threshold: f64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    schedule.validate()?;
    cfg.validate()?;
    let mut rows = Vec::new();
    let every = schedule.eval_every.max(1);
    while state.step < schedule.total_steps {
        let batch = Batch::draw(train_data, soft, schedule, state.step);
        let m = train_step(state, &batch, schedule, cfg)?;
        if state.step.is_multiple_of(every) || state.step == schedule.total_steps {
            let e = evaluate(&state.model, eval_data, default_threshold)?;
            let row = MetricsRow {
                step: state.step,
                train_loss: m.loss,
                lm_loss: m.lm_loss,
                synth_loss: m.synth_loss,
                eval_acc_lm: e.acc_lm,
                eval_acc_full: e.acc_full,
                epsilon: m.epsilon,
                skip_rate_at_default_threshold: e.skip_rate,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
