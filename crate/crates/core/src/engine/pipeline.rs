//! End-to-end run: baseline, concept partition, masked prompt, key
//! difference, then a second sampling pass that optimises and injects the
//! strength step by step.

use std::collections::BTreeSet;

use crate::denoiser::{run_sampler, AttentionTrace, IdentityHook, KeyHook, Sampler, ToyDenoiser};
use crate::error::{Error, Result};
use crate::oracle::{partition_fixed, partition_remote, partition_threshold, summarize_trace, OracleConfig, OracleMode, OracleVerdict};
use crate::tensor::{inject_delta, Matrix};
use crate::text::{embed, mask_prompt, tokenize, ConceptPartition, EmbeddingSeq, TokenSeq};

use super::objective::StepContext;
use super::schedule::{optimize_alpha, ScheduleEntry, ScheduleRecord, SchedulerConfig};
use super::{extract_delta_k, target_attention, DeltaKey};

/// Anything that can split a prompt's concepts after seeing the baseline.
pub trait ConceptOracle {
    fn partition(&self, prompt: &str, seq: &TokenSeq, baseline: &AttentionTrace) -> Result<OracleVerdict>;
}

impl ConceptOracle for OracleConfig {
    fn partition(&self, prompt: &str, seq: &TokenSeq, baseline: &AttentionTrace) -> Result<OracleVerdict> {
        match self.mode {
            OracleMode::Threshold => partition_threshold(baseline, seq, self),
            OracleMode::Fixed => partition_fixed(seq, self),
            OracleMode::Remote => {
                let digest = summarize_trace(baseline, seq, self.window.min(baseline.len()))?;
                partition_remote(prompt, &digest, self)
            }
        }
    }
}

/// Adds `alphas[step - 1] * delta` to the key input of the chosen layers.
pub struct InjectionHook<'a> {
    pub delta: &'a DeltaKey,
    pub layers: &'a BTreeSet<usize>,
    pub alphas: &'a [f64],
}

impl KeyHook for InjectionHook<'_> {
    fn alpha(&self, step: usize) -> f64 {
        self.alphas.get(step - 1).copied().unwrap_or(0.0)
    }

    fn apply(&self, step: usize, layer: usize, key_input: &Matrix) -> Result<Matrix> {
        if self.layers.contains(&layer) {
            inject_delta(key_input, self.delta.layer(layer), self.alpha(step))
        } else {
            Ok(key_input.clone())
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct DeltaKRun {
    pub tokens: TokenSeq,
    pub baseline_trace: AttentionTrace,
    pub baseline_latent: Matrix,
    pub trace: AttentionTrace,
    pub latent: Matrix,
    pub schedule: ScheduleRecord,
    pub partition: ConceptPartition,
    pub warnings: Vec<String>,
    /// `None` when nothing was missing.
    pub delta: Option<DeltaKey>,
}

pub fn run_delta_k(
    prompt: &str,
    model: &ToyDenoiser,
    oracle: &OracleConfig,
    sched: &SchedulerConfig,
    seed: u64,
) -> Result<DeltaKRun> {
    oracle.validate(model.config().steps)?;
    run_delta_k_with(prompt, model, oracle, sched, seed)
}

/// [`run_delta_k`] with any oracle implementation.
pub fn run_delta_k_with(
    prompt: &str,
    model: &ToyDenoiser,
    oracle: &dyn ConceptOracle,
    sched: &SchedulerConfig,
    seed: u64,
) -> Result<DeltaKRun> {
    let c = model.config();
    sched.validate(c.steps, c.layers)?;
    let tokens = tokenize(prompt)?;
    let text = embed(&tokens, c.seed, c.d_model)?;
    let (baseline_trace, baseline_latent) = run_sampler(model, &text, &IdentityHook, seed)?;
    let verdict = oracle.partition(prompt, &tokens, &baseline_trace)?;
    let mut run = run_with_partition(model, &tokens, &text, baseline_trace, baseline_latent, verdict.partition, sched, seed)?;
    run.warnings = verdict.warnings;
    Ok(run)
}

/// Augmented pass for a known partition, reusing an existing baseline.
#[allow(clippy::too_many_arguments)]
pub fn run_with_partition(
    model: &ToyDenoiser,
    tokens: &TokenSeq,
    text: &EmbeddingSeq,
    baseline_trace: AttentionTrace,
    baseline_latent: Matrix,
    partition: ConceptPartition,
    sched: &SchedulerConfig,
    seed: u64,
) -> Result<DeltaKRun> {
    let c = model.config();
    sched.validate(c.steps, c.layers)?;
    partition.validate(tokens.len())?;
    let missing = partition.missing_indices();
    let present = partition.present_indices();

    if missing.is_empty() {
        return Ok(DeltaKRun {
            tokens: tokens.clone(),
            trace: baseline_trace.clone(),
            latent: baseline_latent.clone(),
            baseline_trace,
            baseline_latent,
            schedule: ScheduleRecord::default(),
            partition,
            warnings: Vec::new(),
            delta: None,
        });
    }

    let masked = mask_prompt(tokens, &partition)?;
    let masked_text = embed(&masked, text.seed, c.d_model)?;
    let delta = extract_delta_k(text, &masked_text, c.layers)?;
    let layers = sched.layer_set(c.layers);
    let layer_list: Vec<usize> = layers.iter().copied().collect();

    let mut alphas = vec![0.0; c.steps];
    let mut schedule = ScheduleRecord::default();
    let mut sampler = Sampler::new(model, text, seed);
    let mut previous = 0.0;
    while let Some(step) = sampler.next_step() {
        if sched.window.contains(&step) && !layer_list.is_empty() {
            let targets = layer_list
                .iter()
                .map(|&l| target_attention(&baseline_trace, &present, step, l))
                .collect::<Result<Vec<_>>>()?;
            let ctx = StepContext::from_model(
                model,
                step,
                sampler.latent(),
                &text.matrix,
                &delta,
                &layer_list,
                targets,
                missing.clone(),
            )?;
            let start = if sched.warm_start { previous } else { 0.0 };
            let out = optimize_alpha(&ctx, sched, start);
            previous = out.best;
            alphas[step - 1] = out.alpha;
            schedule.entries.push(ScheduleEntry {
                step,
                alpha: out.alpha,
                loss_at_zero: out.loss_at_zero,
                loss_at_optimum: out.loss_at_optimum,
                iterations_run: out.iterations_run,
                final_gradient: out.final_gradient,
            });
        }
        let hook = InjectionHook {
            delta: &delta,
            layers: &layers,
            alphas: &alphas,
        };
        sampler.advance(&hook)?;
    }
    let (trace, latent) = sampler.finish();
    Ok(DeltaKRun {
        tokens: tokens.clone(),
        baseline_trace,
        baseline_latent,
        trace,
        latent,
        schedule,
        partition,
        warnings: Vec::new(),
        delta: Some(delta),
    })
}

/// Re-runs sampling with a fixed per-step strength list (`alphas[step - 1]`).
pub fn replay_schedule(
    model: &ToyDenoiser,
    text: &EmbeddingSeq,
    delta: &DeltaKey,
    layers: &BTreeSet<usize>,
    alphas: &[f64],
    seed: u64,
) -> Result<(AttentionTrace, Matrix)> {
    if alphas.len() != model.config().steps {
        return Err(Error::Input(format!(
            "{} strengths for {} steps",
            alphas.len(),
            model.config().steps
        )));
    }
    run_sampler(model, text, &InjectionHook { delta, layers, alphas }, seed)
}
