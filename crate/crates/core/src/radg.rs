//! Label flipping of detected contaminants and influence-guided feature
//! perturbation, with the first-order risk deltas both are expected to buy.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{invalid, Result};
use crate::influence::{perturb_direction_with, InfluenceReport, Partition, PerturbDirection, STest};
use crate::objective::{FeatureLoss, LabeledFeature};

/// Relabel every contaminated sample as an anomaly. Inputs must all be
/// labeled normal, so nothing is flipped twice.
pub fn flip_labels(d_con: &[SeriesWindow]) -> Result<Vec<SeriesWindow>> {
    d_con
        .iter()
        .map(|z| {
            if z.label != 0 {
                Err(invalid(format!("sample {} is already labeled anomalous", z.id)))
            } else {
                Ok(z.with_label(1))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedFeature {
    pub source_id: u64,
    pub values: Vec<f64>,
    pub alpha: f64,
    pub direction_norm_sq: f64,
}

impl PerturbedFeature {
    pub fn label(&self) -> u8 {
        1
    }

    pub fn build(source: &LabeledFeature, dir: &PerturbDirection, alpha: f64) -> Self {
        Self {
            source_id: source.id,
            values: source.phi.iter().zip(&dir.direction).map(|(p, d)| p + alpha * d).collect(),
            alpha,
            direction_norm_sq: dir.norm_sq,
        }
    }

    pub fn as_labeled(&self) -> LabeledFeature {
        LabeledFeature {
            id: self.source_id,
            phi: self.values.clone(),
            label: 1,
        }
    }
}

/// Perturb each candidate's feature along its direction; candidates whose
/// direction is numerically zero are skipped.
pub fn perturb_features(
    obj: &FeatureLoss,
    head_params: &[f64],
    candidates: &[LabeledFeature],
    head_stest: &STest,
    alpha: f64,
) -> Result<(Vec<PerturbedFeature>, Vec<PerturbDirection>)> {
    if !(alpha >= 0.0) {
        return Err(invalid("perturbation strength must be non-negative"));
    }
    let mut out = Vec::new();
    let mut dirs = Vec::new();
    for w in candidates {
        let dir = perturb_direction_with(obj, head_params, w, head_stest)?;
        if dir.is_degenerate() {
            continue;
        }
        out.push(PerturbedFeature::build(w, &dir, alpha));
        dirs.push(dir);
    }
    if out.is_empty() && !candidates.is_empty() {
        warn!("every perturbation direction was zero; no pseudo anomalies generated");
    }
    Ok((out, dirs))
}

/// Predicted risk delta with a flag that is set when the input set was empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicted {
    pub delta: f64,
    pub empty: bool,
}

/// `−(2 / (N·|D_con|)) Σ_{D_con} I_L`.
pub fn predicted_risk_delta_flip(report: &InfluenceReport, n: usize) -> Predicted {
    let con = report.influences(Partition::Contaminated);
    predicted_flip_from(&con, n)
}

pub fn predicted_flip_from(influences: &[f64], n: usize) -> Predicted {
    if influences.is_empty() || n == 0 {
        return Predicted { delta: 0.0, empty: true };
    }
    let sum: f64 = influences.iter().sum();
    Predicted {
        delta: -2.0 / (n as f64 * influences.len() as f64) * sum,
        empty: false,
    }
}

/// `−(α / (N·|W_per|)) Σ ‖I_per‖²`.
pub fn predicted_risk_delta_perturb(norms_sq: &[f64], alpha: f64, n: usize) -> Predicted {
    if norms_sq.is_empty() || n == 0 {
        return Predicted { delta: 0.0, empty: true };
    }
    let sum: f64 = norms_sq.iter().sum();
    Predicted {
        delta: -alpha / (n as f64 * norms_sq.len() as f64) * sum,
        empty: false,
    }
}
