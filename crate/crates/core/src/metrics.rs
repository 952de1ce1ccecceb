//! Attention diagnostics: per-token intensity, spatial coefficient of
//! variation, omission detectability (ROC AUC) and head-averaged entropy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A labelled `(step, value)` series with strictly increasing steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub label: String,
    pub values: Vec<(usize, f64)>,
}

impl MetricSeries {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.values.last() {
            if step <= last {
                return Err(Error::Input(format!(
                    "series {:?}: step {step} after {last}",
                    self.label
                )));
            }
        }
        self.values.push((step, value));
        Ok(())
    }
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(column: &[f64]) -> Result<f64> {
    if column.is_empty() {
        return Err(Error::UndefinedMetric("CV of an empty column".into()));
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::UndefinedMetric(format!("CV with non-positive mean {mean}")));
    }
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

fn layer_set(trace: &AttentionTrace, layers: Option<&[usize]>) -> Vec<usize> {
    match layers {
        Some(ls) => ls.to_vec(),
        None => (0..trace.n_layers()).collect(),
    }
}

fn check_indices(trace: &AttentionTrace, tokens: &BTreeSet<usize>, layers: &[usize]) -> Result<()> {
    if let Some(&i) = tokens.iter().find(|&&i| i >= trace.n_keys()) {
        return Err(Error::Input(format!("token index {i} out of range")));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= trace.n_layers()) {
        return Err(Error::Input(format!("layer {l} out of range")));
    }
    Ok(())
}

/// Per-query attention received by `tokens` at `step`, averaged over the
/// chosen layers (all when `None`), heads and tokens.
pub fn token_column(
    trace: &AttentionTrace,
    tokens: &BTreeSet<usize>,
    step: usize,
    layers: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let record = trace
        .step(step)
        .ok_or_else(|| Error::Input(format!("step {step} not in trace")))?;
    let layers = layer_set(trace, layers);
    check_indices(trace, tokens, &layers)?;
    if tokens.is_empty() || layers.is_empty() {
        return Err(Error::Input("empty token or layer selection".into()));
    }
    let mut column = vec![0.0; trace.n_queries()];
    let mut count = 0usize;
    for &l in &layers {
        for map in &record.maps[l] {
            for &i in tokens {
                for (q, c) in column.iter_mut().enumerate() {
                    *c += map.get(q, i);
                }
                count += 1;
            }
        }
    }
    column.iter_mut().for_each(|c| *c /= count as f64);
    Ok(column)
}

/// Mean attention that `tokens` receive at `step` over all layers, heads and
/// queries.
pub fn token_intensity(trace: &AttentionTrace, tokens: &BTreeSet<usize>, step: usize) -> Result<f64> {
    token_intensity_in_layers(trace, tokens, step, None)
}

pub fn token_intensity_in_layers(
    trace: &AttentionTrace,
    tokens: &BTreeSet<usize>,
    step: usize,
    layers: Option<&[usize]>,
) -> Result<f64> {
    let column = token_column(trace, tokens, step, layers)?;
    Ok(column.iter().sum::<f64>() / column.len() as f64)
}

/// Ground truth for a concept in the detectability analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Present,
    Missing,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Present => Label::Missing,
            Label::Missing => Label::Present,
        }
    }
}

/// ROC AUC of the detector "lower score means missing".
///
/// Mann-Whitney formulation with midranks for ties: the probability that a
/// random missing item scores strictly lower than a random present one, plus
/// half the probability of a tie.
pub fn auc_roc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_missing = labels.iter().filter(|&&l| l == Label::Missing).count();
    let n_present = labels.len() - n_missing;
    if n_missing == 0 || n_present == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }

    // Rank the detector output (negated score) ascending.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| (-scores[a]).total_cmp(&-scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len())
        .filter(|&k| labels[k] == Label::Missing)
        .map(|k| ranks[k])
        .sum();
    let m = n_missing as f64;
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(u / (m * n_present as f64))
}

/// Head-averaged entropy (nats) of the key-wise attention mass.
///
/// For each head, the mass of key `k` is the column sum over queries; the
/// masses are normalised into a distribution and its Shannon entropy taken.
/// `0 ln 0` counts as zero.
pub fn stage_entropy(maps: &[Matrix]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Input("no attention maps".into()));
    }
    let mut total = 0.0;
    for map in maps {
        if map.is_empty() {
            return Err(Error::Input("empty attention map".into()));
        }
        let mut mass = vec![0.0; map.cols()];
        for row in map.rows_iter() {
            for (m, a) in mass.iter_mut().zip(row) {
                *m += a;
            }
        }
        let sum: f64 = mass.iter().sum();
        let h: f64 = mass
            .iter()
            .map(|&m| m / sum)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        total += h;
    }
    Ok(total / maps.len() as f64)
}

/// `H_s(t)` per step for a stage made of the given layers (all when `None`).
pub fn entropy_series(trace: &AttentionTrace, layers: Option<&[usize]>) -> Result<MetricSeries> {
    let layers = layer_set(trace, layers);
    check_indices(trace, &BTreeSet::new(), &layers)?;
    let mut series = MetricSeries::new("entropy");
    for rec in &trace.steps {
        let maps: Vec<Matrix> = layers.iter().flat_map(|&l| rec.maps[l].iter().cloned()).collect();
        series.push(rec.step, stage_entropy(&maps)?)?;
    }
    Ok(series)
}
