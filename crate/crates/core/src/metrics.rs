//! Temporal IoU, recall at IoU thresholds and mean IoU.

use std::collections::BTreeMap;

use crate::contrastive::ActionLabel;
use crate::error::{Error, Result};
use crate::grounding::TimeInterval;

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two intervals on the real line.
///
/// Two zero-length intervals score 1 when equal and 0 otherwise.
pub fn tiou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Percentage of pairs whose tIoU is at least `threshold`.
pub fn recall_at(pairs: &[(TimeInterval, TimeInterval)], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("recall over zero predictions".into()));
    }
    let hits = pairs.iter().filter(|(p, g)| tiou(p, g) >= threshold).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// `100 ·` mean tIoU.
pub fn mean_tiou(pairs: &[(TimeInterval, TimeInterval)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("mean IoU over zero predictions".into()));
    }
    Ok(100.0 * pairs.iter().map(|(p, g)| tiou(p, g)).sum::<f64>() / pairs.len() as f64)
}

/// Recall at each of [`THRESHOLDS`] and mean IoU, all as percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub recall_at: [f64; 3],
    pub mean_tiou: f64,
    pub count: usize,
}

impl Scores {
    pub fn compute(pairs: &[(TimeInterval, TimeInterval)]) -> Result<Self> {
        Ok(Self {
            recall_at: [
                recall_at(pairs, THRESHOLDS[0])?,
                recall_at(pairs, THRESHOLDS[1])?,
                recall_at(pairs, THRESHOLDS[2])?,
            ],
            mean_tiou: mean_tiou(pairs)?,
            count: pairs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub overall: Scores,
    pub per_category: BTreeMap<ActionLabel, Scores>,
}

impl EvalResult {
    pub fn compute(items: &[(ActionLabel, TimeInterval, TimeInterval)]) -> Result<Self> {
        let all: Vec<_> = items.iter().map(|&(_, p, g)| (p, g)).collect();
        let mut groups: BTreeMap<ActionLabel, Vec<(TimeInterval, TimeInterval)>> = BTreeMap::new();
        for &(label, p, g) in items {
            groups.entry(label).or_default().push((p, g));
        }
        let per_category = groups
            .into_iter()
            .map(|(k, v)| Scores::compute(&v).map(|s| (k, s)))
            .collect::<Result<_>>()?;
        Ok(Self {
            overall: Scores::compute(&all)?,
            per_category,
        })
    }
}
