use serde::{Deserialize, Serialize};

use crate::cohort::Label;
use crate::error::{Error, Result};
use crate::neural_process::{PredictiveSummary, NOISE_VAR_FLOOR};
use crate::tensorcore::Tensor;

/// Normative probability maps: `(y - mean) / sqrt(total variance)` per
/// subject and voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Npm {
    pub values: Tensor,
}

impl Npm {
    pub fn n(&self) -> usize {
        self.values.dim(0)
    }

    pub fn subject(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// NPM from explicit moments; `var` must stay at or above the noise floor.
pub fn npm_from_moments(y: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Npm> {
    if y.shape() != mean.shape() || y.shape() != var.shape() {
        return Err(Error::shape(
            "compute_npm",
            format!("y {:?}, mean {:?}, variance {:?}", y.shape(), mean.shape(), var.shape()),
        ));
    }
    if let Some(v) = var.data().iter().find(|&&v| !(v >= NOISE_VAR_FLOOR)) {
        return Err(Error::Numeric(format!(
            "predictive variance {v} below the floor {NOISE_VAR_FLOOR}"
        )));
    }
    let data = y
        .data()
        .iter()
        .zip(mean.data())
        .zip(var.data())
        .map(|((a, m), v)| (a - m) / v.sqrt())
        .collect();
    Ok(Npm {
        values: Tensor::new(y.shape().to_vec(), data)?,
    })
}

pub fn compute_npm(y_test: &Tensor, summary: &PredictiveSummary) -> Result<Npm> {
    npm_from_moments(y_test, &summary.mean, &summary.total())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Absolute,
    Signed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// Mean of the top fraction.
    MeanOfTop,
    /// The single largest value.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    pub top_fraction: f64,
    pub sign: Sign,
    pub block: Block,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig {
            top_fraction: 0.01,
            sign: Sign::Absolute,
            block: Block::MeanOfTop,
        }
    }
}

/// `ceil(fraction * len)`, tolerant of the representation error in
/// products such as `0.01 * 200`.
pub fn top_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64 - 1e-9).ceil() as usize).clamp(1, len)
}

/// Mean of the `ceil(fraction * T)` largest absolute NPM values.
pub fn summary_statistic(volume: &[f64], fraction: f64) -> Result<f64> {
    summary_statistic_with(
        volume,
        &SummaryConfig {
            top_fraction: fraction,
            ..SummaryConfig::default()
        },
    )
}

/// Block summary of one subject's NPM. Equal values are ranked by voxel
/// index.
pub fn summary_statistic_with(volume: &[f64], cfg: &SummaryConfig) -> Result<f64> {
    if volume.is_empty() {
        return Err(Error::invalid("summary of an empty volume"));
    }
    if !(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0) {
        return Err(Error::invalid(format!("top fraction {} outside (0, 1]", cfg.top_fraction)));
    }
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NPM volume".into()));
    }
    let vals: Vec<f64> = match cfg.sign {
        Sign::Absolute => volume.iter().map(|v| v.abs()).collect(),
        Sign::Signed => volume.to_vec(),
    };
    let k = match cfg.block {
        Block::MeanOfTop => top_count(cfg.top_fraction, vals.len()),
        Block::Max => 1,
    };
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    Ok(idx[..k].iter().map(|&i| vals[i]).sum::<f64>() / k as f64)
}

pub fn summaries(npm: &Npm, cfg: &SummaryConfig) -> Result<Vec<f64>> {
    (0..npm.n()).map(|i| summary_statistic_with(npm.subject(i), cfg)).collect()
}

/// Mean NPM of each patient group minus the healthy mean, per voxel.
/// Groups without subjects are skipped.
pub fn group_difference_maps(npm: &Npm, labels: &[Label]) -> Result<Vec<(Label, Tensor)>> {
    if labels.len() != npm.n() {
        return Err(Error::shape(
            "group_difference_maps",
            format!("{} labels for {} subjects", labels.len(), npm.n()),
        ));
    }
    let mean_of = |group: Label| -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == group).collect();
        if rows.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; npm.values.row_len()];
        for &i in &rows {
            acc.iter_mut().zip(npm.subject(i)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
        Some(acc)
    };
    let healthy = mean_of(Label::Healthy).ok_or_else(|| Error::invalid("no healthy subjects"))?;
    let mut out = Vec::new();
    for group in Label::PATIENT_GROUPS {
        match mean_of(group) {
            Some(m) => {
                let diff = m.iter().zip(&healthy).map(|(a, b)| a - b).collect();
                out.push((group, Tensor::new(npm.values.shape()[1..].to_vec(), diff)?));
            }
            None => log::warn!("group {} has no subjects; difference map skipped", group.as_str()),
        }
    }
    Ok(out)
}
