//! Controlled corruption of predicted coefficients and the resulting
//! accuracy of the synthesized model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::pipeline::BasisNet;
use crate::synthesis::{argmax, CoefficientMatrix, CoefficientMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    Correct,
    Top1,
    /// Replace by the dataset-mean coefficient rows.
    Mean,
    Uniform,
    Shuffled { seed: u64 },
}

impl DisturbanceKind {
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "correct" => Ok(Self::Correct),
            "top1" => Ok(Self::Top1),
            "mean" => Ok(Self::Mean),
            "uniform" => Ok(Self::Uniform),
            "shuffled" => Ok(Self::Shuffled { seed }),
            other => Err(Error::invalid(format!(
                "unknown disturbance '{other}' (expected correct, top1, mean, uniform, shuffled)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Correct => "correct",
            Self::Top1 => "top1",
            Self::Mean => "mean",
            Self::Uniform => "uniform",
            Self::Shuffled { .. } => "shuffled",
        }
    }
}

/// Which coefficient rows are disturbed. Layers are backbone indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbTarget {
    AllLayers,
    SingleLayer { layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    pub target: DisturbTarget,
}

impl Disturbance {
    pub fn all(kind: DisturbanceKind) -> Self {
        Disturbance {
            kind,
            target: DisturbTarget::AllLayers,
        }
    }
}

/// Everything [`disturb`] may need besides the coefficients themselves.
#[derive(Clone, Copy, Debug, Default)]
pub struct DisturbContext<'a> {
    pub mean: Option<&'a CoefficientMatrix>,
    /// Coefficient row of the targeted layer, `None` when that layer is shared.
    /// Ignored for [`DisturbTarget::AllLayers`].
    pub single_row: Option<usize>,
    /// Sample index; decorrelates shuffles across samples.
    pub sample: u64,
}

pub fn disturb(alpha: &CoefficientMatrix, d: Disturbance, ctx: DisturbContext<'_>) -> Result<CoefficientMatrix> {
    let (rows, n) = (alpha.rows(), alpha.cols());
    if let Some(m) = ctx.mean {
        if (m.rows(), m.cols()) != (rows, n) {
            return Err(Error::shape("disturb mean table", &[rows, n], &[m.rows(), m.cols()]));
        }
    }
    let targeted: Vec<usize> = match d.target {
        DisturbTarget::AllLayers => (0..rows).collect(),
        DisturbTarget::SingleLayer { .. } => ctx.single_row.into_iter().collect(),
    };
    if targeted.is_empty() || d.kind == DisturbanceKind::Correct {
        return Ok(alpha.clone());
    }
    let mut values = alpha.values().to_vec();
    let mut rng = match d.kind {
        DisturbanceKind::Shuffled { seed } => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(ctx.sample);
            Some(r)
        }
        _ => None,
    };
    for &k in &targeted {
        if k >= rows {
            return Err(Error::invalid(format!("coefficient row {k} out of range")));
        }
        let row = &mut values[k * n..(k + 1) * n];
        match d.kind {
            DisturbanceKind::Correct => {}
            DisturbanceKind::Top1 => {
                let best = argmax(row);
                row.iter_mut().enumerate().for_each(|(i, v)| *v = if i == best { 1.0 } else { 0.0 });
            }
            DisturbanceKind::Uniform => row.iter_mut().for_each(|v| *v = 1.0 / n as f64),
            DisturbanceKind::Mean => {
                let m = ctx.mean.ok_or_else(|| Error::invalid("mean disturbance needs a mean table"))?;
                row.copy_from_slice(m.row(k));
            }
            DisturbanceKind::Shuffled { .. } => row.shuffle(rng.as_mut().unwrap()),
        }
    }
    let mode = if d.kind == DisturbanceKind::Top1 && targeted.len() == rows {
        CoefficientMode::OneHot
    } else {
        CoefficientMode::PerLayer
    };
    CoefficientMatrix::new(rows, n, values, mode)
}

/// Element-wise mean of coefficient matrices.
pub fn mean_table(coeffs: &[CoefficientMatrix]) -> Result<CoefficientMatrix> {
    let first = coeffs.first().ok_or_else(|| Error::invalid("mean over no samples"))?;
    let mut sum = vec![0.0; first.values().len()];
    for c in coeffs {
        sum.iter_mut().zip(c.values()).for_each(|(s, v)| *s += v);
    }
    let inv = 1.0 / coeffs.len() as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    CoefficientMatrix::new(first.rows(), first.cols(), sum, CoefficientMode::PerLayer)
}

/// Undisturbed coefficients of every sample, computed once and reused.
pub struct CoefficientCache {
    pub coeffs: Vec<CoefficientMatrix>,
    pub mean: CoefficientMatrix,
}

impl CoefficientCache {
    pub fn build(model: &BasisNet, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let coeffs: Vec<CoefficientMatrix> = (0..data.len())
            .into_par_iter()
            .map(|i| model.coefficients(&data.image(i)))
            .collect::<Result<_>>()?;
        let mean = mean_table(&coeffs)?;
        Ok(CoefficientCache { coeffs, mean })
    }
}

/// Accuracy of the synthesized model (no early termination) with disturbed coefficients.
pub fn evaluate_disturbed(model: &BasisNet, data: &Dataset, d: Disturbance) -> Result<f64> {
    let cache = CoefficientCache::build(model, data)?;
    evaluate_cached(model, data, &cache, d)
}

pub fn evaluate_cached(model: &BasisNet, data: &Dataset, cache: &CoefficientCache, d: Disturbance) -> Result<f64> {
    let single_row = match d.target {
        DisturbTarget::SingleLayer { layer } => {
            if layer >= model.bank.spec().num_layers() {
                return Err(Error::invalid(format!("layer {layer} out of range")));
            }
            model.bank.coefficient_row(layer)
        }
        DisturbTarget::AllLayers => None,
    };
    let correct: usize = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let ctx = DisturbContext {
                mean: Some(&cache.mean),
                single_row,
                sample: i as u64,
            };
            let alpha = disturb(&cache.coeffs[i], d, ctx)?;
            let (logits, _, _) = model.stage2(&alpha, &data.image(i))?;
            Ok((argmax(&logits) == data.label(i)) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy with one layer's coefficients shuffled, over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDisturbance {
    pub layer: usize,
    pub shared: bool,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// Shuffled disturbance applied at each layer in turn. Returns the per-layer
/// table and the undisturbed reference accuracy.
pub fn layer_sweep(model: &BasisNet, data: &Dataset, seeds: usize) -> Result<(Vec<LayerDisturbance>, f64)> {
    if model.bank.num_dynamic() < 2 {
        return Err(Error::invalid("layer sweep needs at least two non-shared layers"));
    }
    let cache = CoefficientCache::build(model, data)?;
    let reference = evaluate_cached(model, data, &cache, Disturbance::all(DisturbanceKind::Correct))?;
    let mut rows = Vec::new();
    for layer in 0..model.bank.spec().num_layers() {
        let shared = model.bank.coefficient_row(layer).is_none();
        let accuracies: Vec<f64> = if shared {
            vec![reference; seeds.max(1)]
        } else {
            (0..seeds.max(1) as u64)
                .map(|seed| {
                    evaluate_cached(
                        model,
                        data,
                        &cache,
                        Disturbance {
                            kind: DisturbanceKind::Shuffled { seed },
                            target: DisturbTarget::SingleLayer { layer },
                        },
                    )
                })
                .collect::<Result<_>>()?
        };
        let (mean, std) = mean_std(&accuracies);
        rows.push(LayerDisturbance {
            layer,
            shared,
            mean_accuracy: mean,
            std_accuracy: std,
            accuracies,
        });
    }
    Ok((rows, reference))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
