//! Differential-key intervention: extraction, objective, per-step strength
//! optimisation and the end-to-end pipeline.

mod objective;
mod pipeline;
mod schedule;

use std::collections::BTreeSet;

use crate::denoiser::AttentionTrace;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Matrix;
use crate::text::EmbeddingSeq;

pub use objective::{alignment_loss, loss_and_gradient, loss_gradient, HeadContext, LayerContext, StepContext};
pub use pipeline::{
    replay_schedule, run_delta_k, run_delta_k_with, run_with_partition, ConceptOracle, DeltaKRun, InjectionHook,
};
pub use schedule::{optimize_alpha, AlphaOutcome, ScalarAdam, ScheduleEntry, ScheduleRecord, SchedulerConfig};

/// Difference between the key inputs of the original and the masked prompt,
/// one matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaKey {
    pub per_layer: Vec<Matrix>,
}

impl DeltaKey {
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.per_layer[l]
    }

    pub fn is_zero(&self) -> bool {
        self.per_layer.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0))
    }
}

pub fn extract_delta_k(emb_prompt: &EmbeddingSeq, emb_masked: &EmbeddingSeq, layers: usize) -> Result<DeltaKey> {
    if emb_prompt.seed != emb_masked.seed {
        return Err(Error::Input("embeddings come from different seeds".into()));
    }
    let diff = emb_prompt.matrix.sub(&emb_masked.matrix)?;
    Ok(DeltaKey {
        per_layer: vec![diff; layers],
    })
}

fn mean_columns(maps: &[Matrix], columns: &BTreeSet<usize>) -> Result<Vec<f64>> {
    let first = maps.first().ok_or_else(|| Error::Input("no attention maps".into()))?;
    let (nq, nk) = first.shape();
    if maps.iter().any(|m| m.shape() != (nq, nk)) {
        return dim_err("attention maps differ in shape");
    }
    if let Some(&i) = columns.iter().find(|&&i| i >= nk) {
        return Err(Error::Input(format!("token index {i} out of range for {nk} keys")));
    }
    let norm = 1.0 / (maps.len() * columns.len()) as f64;
    let mut out = vec![0.0; nq];
    for map in maps {
        for &i in columns {
            for (q, o) in out.iter_mut().enumerate() {
                *o += map.get(q, i);
            }
        }
    }
    out.iter_mut().for_each(|o| *o *= norm);
    Ok(out)
}

/// Per-query attention the present tokens received in the baseline run at
/// `(step, layer)`, averaged over heads and tokens. With no present tokens
/// the target is the uniform share `1 / n_keys`.
pub fn target_attention(
    baseline: &AttentionTrace,
    present: &BTreeSet<usize>,
    step: usize,
    layer: usize,
) -> Result<Vec<f64>> {
    let rec = baseline
        .step(step)
        .ok_or_else(|| Error::Input(format!("baseline has no step {step}")))?;
    let maps = rec
        .maps
        .get(layer)
        .ok_or_else(|| Error::Input(format!("baseline has no layer {layer}")))?;
    if present.is_empty() {
        return Ok(vec![1.0 / baseline.n_keys() as f64; baseline.n_queries()]);
    }
    mean_columns(maps, present)
}

/// Per-query attention of the missing tokens, averaged over heads and
/// tokens.
pub fn aggregate_missing(maps: &[Matrix], missing: &BTreeSet<usize>) -> Result<Vec<f64>> {
    if missing.is_empty() {
        return Err(Error::Input("no missing tokens to aggregate".into()));
    }
    mean_columns(maps, missing)
}
