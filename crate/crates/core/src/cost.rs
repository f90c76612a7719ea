//! Analytic MAdds and parameter accounting, expected cost under early
//! termination, and threshold sweeps.
//!
//! All costs are per single image. Synthesis counts one multiply per basis
//! parameter of every non-shared layer; the accompanying additions are not
//! counted.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneSpec};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::pipeline::{BasisNet, LightweightSpec};
use crate::synthesis::CoefficientMode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub lm_madds: u64,
    pub stage2_madds: u64,
    pub synthesis_madds: u64,
    pub total_madds: u64,
    /// Second-stage parameters: shared storage plus every basis.
    pub params_total: usize,
    pub params_shared: usize,
    pub params_per_basis: usize,
    /// Lightweight model (trunk, class head and coefficient head).
    pub params_lm: usize,
    pub num_bases: usize,
}

/// `p·c_lm + (1 − p)·c_total`.
pub fn expected_cost(p_skip: f64, c_lm: f64, c_total: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_skip) {
        return Err(Error::invalid(format!("skip probability {p_skip} outside [0, 1]")));
    }
    if !(c_lm >= 0.0 && c_lm <= c_total) {
        return Err(Error::invalid(format!(
            "need 0 <= lightweight cost ({c_lm}) <= total cost ({c_total})"
        )));
    }
    Ok(p_skip * c_lm + (1.0 - p_skip) * c_total)
}

/// Itemized cost of a configuration; `lm = None` costs stage 2 alone.
pub fn full_cost(
    lm: Option<&LightweightSpec>,
    bank_spec: &BackboneSpec,
    num_bases: usize,
    share_mask: &[bool],
    mode: CoefficientMode,
) -> Result<CostReport> {
    bank_spec.validate()?;
    if share_mask.len() != bank_spec.num_layers() || num_bases == 0 {
        return Err(Error::Spec("share mask / basis count invalid".into()));
    }
    let dynamic: Vec<usize> = (0..share_mask.len()).filter(|&k| !share_mask[k]).collect();
    let params_per_basis: usize = dynamic.iter().map(|&k| bank_spec.layers[k].kernel_numel()).sum();
    let params_shared = backbone::count_params(bank_spec) - params_per_basis;
    let stage2_madds = backbone::count_madds(bank_spec)?;
    let synthesis_madds = (num_bases * params_per_basis) as u64;
    let (lm_madds, params_lm) = match lm {
        None => (0, 0),
        Some(spec) => {
            let rows = match mode {
                CoefficientMode::PerModel => 1,
                _ => dynamic.len(),
            };
            let coeff_out = rows * num_bases;
            let f = spec.trunk.feature_dim();
            (
                backbone::count_madds(&spec.trunk)? + (f * coeff_out) as u64,
                backbone::count_params(&spec.trunk) + f * coeff_out + coeff_out,
            )
        }
    };
    Ok(CostReport {
        lm_madds,
        stage2_madds,
        synthesis_madds,
        total_madds: lm_madds + synthesis_madds + stage2_madds,
        params_total: params_shared + num_bases * params_per_basis,
        params_shared,
        params_per_basis,
        params_lm,
        num_bases,
    })
}

/// Cost report of a built model.
pub fn model_cost(model: &BasisNet) -> Result<CostReport> {
    full_cost(
        Some(&model.lm.spec),
        model.bank.spec(),
        model.bank.num_bases(),
        &model.bank.share_mask(),
        model.synthesis.mode,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub skip_rate: f64,
    pub avg_madds: f64,
    pub accuracy: f64,
}

/// Runs early-terminating inference over `data` at every threshold.
pub fn sweep(model: &BasisNet, data: &Dataset, thresholds: &[f64]) -> Result<Vec<SweepPoint>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot sweep an empty dataset"));
    }
    let images = data.images();
    let n = data.len();
    thresholds
        .iter()
        .map(|&t| {
            let results = model.infer_all(&images, t)?;
            let skipped = results.iter().filter(|r| r.terminated).count();
            let correct = results
                .iter()
                .zip(data.labels())
                .filter(|(r, &y)| r.prediction() == y)
                .count();
            let madds: u64 = results.iter().map(|r| r.madds_spent).sum();
            Ok(SweepPoint {
                threshold: t,
                skip_rate: skipped as f64 / n as f64,
                avg_madds: madds as f64 / n as f64,
                accuracy: correct as f64 / n as f64,
            })
        })
        .collect()
}
