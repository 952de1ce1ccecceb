//! Shared inputs for the criterion benches.

use std::collections::BTreeSet;

use deltak_core::config::{RunConfig, DEMO_CONFIG};
use deltak_core::denoiser::IdentityHook;
use deltak_core::engine::{extract_delta_k, target_attention};
use deltak_core::text::{embed, mask_prompt, tokenize, Concept, ConceptPartition};
use deltak_core::{init_model, run_sampler, Matrix, StepContext};

/// Deterministic `rows x cols` matrix with entries in `[-1, 1]`.
pub fn wave(rows: usize, cols: usize, phase: f64) -> Matrix {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.618 + phase).sin()).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

/// Step-1 context of the demo run with "red" treated as missing.
pub fn demo_context() -> StepContext {
    let cfg = RunConfig::parse(DEMO_CONFIG).expect("packaged config parses");
    let model = init_model(&cfg.denoiser).expect("valid config");
    let tokens = tokenize(&cfg.prompt).expect("prompt tokenizes");
    let c = model.config();
    let text = embed(&tokens, c.seed, c.d_model).expect("embeds");
    let (trace, _) = run_sampler(&model, &text, &IdentityHook, cfg.seed).expect("samples");
    let missing: BTreeSet<usize> = [1].into();
    let present: BTreeSet<usize> = tokens.content_positions().into_iter().filter(|i| !missing.contains(i)).collect();
    let partition = ConceptPartition::new(
        vec![Concept::new("rest", present.iter().copied())],
        vec![Concept::new("red", missing.iter().copied())],
    );
    let masked = embed(&mask_prompt(&tokens, &partition).expect("valid"), c.seed, c.d_model).expect("embeds");
    let delta = extract_delta_k(&text, &masked, c.layers).expect("same shape");
    let layers: Vec<usize> = (0..c.layers).collect();
    let targets = layers
        .iter()
        .map(|&l| target_attention(&trace, &present, 1, l).expect("in range"))
        .collect();
    StepContext::from_model(&model, 1, &trace.steps[0].latent, &text.matrix, &delta, &layers, targets, missing)
        .expect("valid context")
}
