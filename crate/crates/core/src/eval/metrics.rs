use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        ScoreSet { genuine, impostor }
    }

    pub fn from_labeled(items: impl IntoIterator<Item = (Label, f64)>) -> Self {
        let mut set = ScoreSet::default();
        for (label, s) in items {
            match label {
                Label::Genuine => set.genuine.push(s),
                Label::Impostor => set.impostor.push(s),
            }
        }
        set
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(CoreError::Evaluation(format!(
                "need genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(CoreError::Evaluation("non-finite score".into()));
        }
        Ok(())
    }

    /// Applies `f` to every score of both classes.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreSet {
        ScoreSet {
            genuine: self.genuine.iter().map(|&s| f(s)).collect(),
            impostor: self.impostor.iter().map(|&s| f(s)).collect(),
        }
    }
}

fn rates(sorted_genuine: &[f64], sorted_impostor: &[f64], threshold: f64) -> (f64, f64) {
    // Accept on score >= threshold.
    let impostor_rejected = sorted_impostor.partition_point(|&s| s < threshold);
    let genuine_rejected = sorted_genuine.partition_point(|&s| s < threshold);
    let far = (sorted_impostor.len() - impostor_rejected) as f64 / sorted_impostor.len() as f64;
    let frr = genuine_rejected as f64 / sorted_genuine.len() as f64;
    (far, frr)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// FAR = share of impostor scores `>= threshold`; FRR = share of genuine
/// scores below it.
pub fn compute_far_frr(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    scores.check()?;
    Ok(rates(&sorted(&scores.genuine), &sorted(&scores.impostor), threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate. Thresholds run over the sorted union of observed
/// scores plus one point above the maximum (FAR = 0, FRR = 1). If FAR and
/// FRR meet at an observed threshold that value is returned; otherwise both
/// curves are interpolated linearly between the bracketing thresholds.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerPoint> {
    scores.check()?;
    let g = sorted(&scores.genuine);
    let i = sorted(&scores.impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().expect("non-empty");
    thresholds.push(top + f64::EPSILON * top.abs().max(1.0));

    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        let (far, frr) = rates(&g, &i, t);
        if far <= frr {
            return Ok(match prev {
                Some((pt, pfar, pfrr)) if far < frr => {
                    let (d0, d1) = (pfar - pfrr, far - frr);
                    let w = d0 / (d0 - d1);
                    EerPoint { eer: pfar + w * (far - pfar), threshold: pt + w * (t - pt) }
                }
                _ => EerPoint { eer: far, threshold: t },
            });
        }
        prev = Some((t, far, frr));
    }
    unreachable!("the last threshold rejects everything")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EerSummary {
    pub per_subject: BTreeMap<String, f64>,
    pub mean_eer: f64,
}

impl EerSummary {
    /// Per-subject EERs first, then their arithmetic mean.
    pub fn from_subjects(per_subject: BTreeMap<String, f64>) -> Result<Self> {
        if per_subject.is_empty() {
            return Err(CoreError::Evaluation("no subjects to average".into()));
        }
        let mean_eer = per_subject.values().sum::<f64>() / per_subject.len() as f64;
        Ok(EerSummary { per_subject, mean_eer })
    }

    pub fn from_score_sets(sets: &BTreeMap<String, ScoreSet>) -> Result<Self> {
        let mut per = BTreeMap::new();
        for (u, s) in sets {
            per.insert(u.clone(), compute_eer(s)?.eer);
        }
        Self::from_subjects(per)
    }
}

/// `100 * (no_forecast - best) / no_forecast`.
pub fn reduction_percentage(no_forecast_eer: f64, best_forecast_eer: f64) -> Result<f64> {
    if no_forecast_eer.is_nan() || no_forecast_eer <= 0.0 {
        return Err(CoreError::Evaluation(format!("reduction needs a positive baseline EER, got {no_forecast_eer}")));
    }
    Ok(100.0 * (no_forecast_eer - best_forecast_eer) / no_forecast_eer)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
