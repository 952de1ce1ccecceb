//! Seeded stack of cross-attention layers with a residual latent update.
//!
//! Each layer reads the same text embedding. Keys are projected from a
//! per-layer *key input* that a [`KeyHook`] may rewrite; values always come
//! from the unmodified text so an injection only touches the key stream.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::seed;
use crate::tensor::{scaled_dot_attention, Matrix};
use crate::text::EmbeddingSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Number of latent tokens, i.e. attention queries.
    pub n_queries: usize,
    pub steps: usize,
    /// η in `z <- (1 - η) z + η (z + h)`.
    pub update_rate: f64,
    /// Standard deviation of the initial latent.
    pub latent_scale: f64,
    /// Scale of a seeded direction shared by every initial latent row.
    pub latent_shift: f64,
    /// Seed for weights and the embedding table.
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 64,
            n_queries: 64,
            steps: 28,
            update_rate: 0.1,
            latent_scale: 8.0,
            latent_shift: 0.0,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("denoiser.layers must be >= 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "denoiser.d_model ({}) must be a positive multiple of denoiser.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.n_queries == 0 {
            return fail("denoiser.n_queries must be >= 1".into());
        }
        if self.steps == 0 {
            return fail("denoiser.steps must be >= 1".into());
        }
        if !(self.update_rate > 0.0 && self.update_rate <= 1.0) {
            return fail(format!("denoiser.update_rate {} not in (0, 1]", self.update_rate));
        }
        if !(self.latent_shift.is_finite() && self.latent_shift >= 0.0) {
            return fail(format!("denoiser.latent_shift {} must be non-negative", self.latent_shift));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return fail(format!("denoiser.latent_scale {} must be positive", self.latent_scale));
        }
        Ok(())
    }
}

/// Projection weights of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d_model x d_k`
    pub w_q: Matrix,
    /// `d_model x d_k`
    pub w_k: Matrix,
    /// `d_model x d_k`
    pub w_v: Matrix,
    /// `d_k x d_model`
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    weights: Vec<Vec<HeadWeights>>,
}

/// Builds the model. Weights are `N(0, 1/d_model)`, one stream per
/// `(seed, layer, head, matrix)`.
pub fn init_model(config: &DenoiserConfig) -> Result<ToyDenoiser> {
    config.validate()?;
    let d = config.d_model;
    let dk = config.d_k();
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let draw = |l: usize, h: usize, which: u64, rows: usize, cols: usize| {
        let mut rng = seed::stream(&[seed::TAG_WEIGHTS, config.seed, l as u64, h as u64, which]);
        Matrix::from_raw(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
    };
    let weights = (0..config.layers)
        .map(|l| {
            (0..config.heads)
                .map(|h| HeadWeights {
                    w_q: draw(l, h, 0, d, dk),
                    w_k: draw(l, h, 1, d, dk),
                    w_v: draw(l, h, 2, d, dk),
                    w_o: draw(l, h, 3, dk, d),
                })
                .collect()
        })
        .collect();
    Ok(ToyDenoiser {
        config: config.clone(),
        weights,
    })
}

impl ToyDenoiser {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights {
        &self.weights[layer][head]
    }

    /// SHA-256 over the bit patterns of every weight, hex encoded.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for hw in self.weights.iter().flatten() {
            for m in [&hw.w_q, &hw.w_k, &hw.w_v, &hw.w_o] {
                for v in m.as_slice() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex(&hasher.finalize())
    }

    /// Seeded initial latent `z_T`.
    pub fn initial_latent(&self, seed: u64) -> Matrix {
        let c = &self.config;
        let normal = Normal::new(0.0, c.latent_scale).expect("validated scale");
        let mut rng = seed::stream(&[seed::TAG_LATENT, seed]);
        let mut data: Vec<f64> = (0..c.n_queries * c.d_model).map(|_| normal.sample(&mut rng)).collect();
        if c.latent_shift > 0.0 {
            let mut shift_rng = seed::stream(&[seed::TAG_SHIFT, c.seed]);
            let shift: Vec<f64> = (0..c.d_model)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut shift_rng);
                    c.latent_shift * x
                })
                .collect();
            for row in data.chunks_mut(c.d_model) {
                row.iter_mut().zip(&shift).for_each(|(x, s)| *x += s);
            }
        }
        Matrix::from_raw(c.n_queries, c.d_model, data)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Checksum of a matrix's exact contents (first 16 hex digits of SHA-256).
pub fn matrix_checksum(m: &Matrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hex(&hasher.finalize()[..8])
}

/// Rewrites the key input of a layer before it is projected.
pub trait KeyHook {
    /// Injection strength reported for `step`, recorded in the trace.
    fn alpha(&self, _step: usize) -> f64 {
        0.0
    }

    fn apply(&self, step: usize, layer: usize, key_input: &Matrix) -> Result<Matrix>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl KeyHook for IdentityHook {
    fn apply(&self, _step: usize, _layer: usize, key_input: &Matrix) -> Result<Matrix> {
        Ok(key_input.clone())
    }
}

/// Adapts a closure into a hook.
pub struct FnHook<F>(pub F);

impl<F> KeyHook for FnHook<F>
where
    F: Fn(usize, usize, &Matrix) -> Result<Matrix>,
{
    fn apply(&self, step: usize, layer: usize, key_input: &Matrix) -> Result<Matrix> {
        (self.0)(step, layer, key_input)
    }
}

/// What one denoising step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub latent: Matrix,
    /// `maps[layer][head]`, each `n_queries x n_keys`.
    pub maps: Vec<Vec<Matrix>>,
    /// Hooked key input per layer.
    pub key_inputs: Vec<Matrix>,
}

pub fn denoise_step(
    model: &ToyDenoiser,
    z: &Matrix,
    text: &EmbeddingSeq,
    step: usize,
    hook: &dyn KeyHook,
) -> Result<StepOutput> {
    let c = &model.config;
    if z.shape() != (c.n_queries, c.d_model) {
        return dim_err(format!(
            "latent is {}x{}, expected {}x{}",
            z.rows(),
            z.cols(),
            c.n_queries,
            c.d_model
        ));
    }
    let text_m = &text.matrix;
    if text_m.cols() != c.d_model || text_m.rows() == 0 {
        return dim_err(format!("text embedding width {} != d_model {}", text_m.cols(), c.d_model));
    }

    let mut mixed = Matrix::zeros(c.n_queries, c.d_model);
    let mut maps = Vec::with_capacity(c.layers);
    let mut key_inputs = Vec::with_capacity(c.layers);
    for (l, heads) in model.weights.iter().enumerate() {
        let key_input = hook.apply(step, l, text_m)?;
        if key_input.shape() != text_m.shape() {
            return dim_err(format!("hook changed key input shape at layer {l}"));
        }
        let mut layer_maps = Vec::with_capacity(c.heads);
        for hw in heads {
            let q = z.matmul(&hw.w_q)?;
            let k = key_input.matmul(&hw.w_k)?;
            let v = text_m.matmul(&hw.w_v)?;
            let out = scaled_dot_attention(&q, &k, &v)?;
            mixed = mixed.add(&out.context.matmul(&hw.w_o)?)?;
            layer_maps.push(out.map);
        }
        maps.push(layer_maps);
        key_inputs.push(key_input);
    }
    let h_mean = mixed.scale(1.0 / c.layers as f64);
    let eta = c.update_rate;
    let latent = z.scale(1.0 - eta).add_scaled(&z.add(&h_mean)?, eta)?;
    Ok(StepOutput {
        latent,
        maps,
        key_inputs,
    })
}

/// Everything recorded at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based execution index: step 1 is the first denoising step.
    pub step: usize,
    /// Diffusion timestep `t = T - step + 1`.
    pub timestep: usize,
    pub alpha: f64,
    /// `maps[layer][head]`.
    pub maps: Vec<Vec<Matrix>>,
    pub key_inputs: Vec<Matrix>,
    /// Latent entering this step.
    pub latent: Matrix,
}

/// Attention maps and key inputs of a whole sampling run, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub steps: Vec<StepRecord>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Record for 1-based step `step`.
    pub fn step(&self, step: usize) -> Option<&StepRecord> {
        step.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    pub fn n_layers(&self) -> usize {
        self.steps.first().map_or(0, |s| s.maps.len())
    }

    pub fn n_heads(&self) -> usize {
        self.steps.first().and_then(|s| s.maps.first()).map_or(0, Vec::len)
    }

    pub fn n_queries(&self) -> usize {
        self.first_map().map_or(0, Matrix::rows)
    }

    pub fn n_keys(&self) -> usize {
        self.first_map().map_or(0, Matrix::cols)
    }

    fn first_map(&self) -> Option<&Matrix> {
        self.steps.first()?.maps.first()?.first()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.alpha).collect()
    }
}

/// Incremental sampler; [`run_sampler`] drives it to completion.
pub struct Sampler<'a> {
    model: &'a ToyDenoiser,
    text: &'a EmbeddingSeq,
    latent: Matrix,
    trace: AttentionTrace,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a ToyDenoiser, text: &'a EmbeddingSeq, seed: u64) -> Self {
        Self {
            model,
            text,
            latent: model.initial_latent(seed),
            trace: AttentionTrace::default(),
        }
    }

    pub fn latent(&self) -> &Matrix {
        &self.latent
    }

    /// The 1-based step the next call to [`Sampler::advance`] executes, or
    /// `None` once all steps ran.
    pub fn next_step(&self) -> Option<usize> {
        let done = self.trace.len();
        (done < self.model.config.steps).then_some(done + 1)
    }

    pub fn advance(&mut self, hook: &dyn KeyHook) -> Result<()> {
        let step = self
            .next_step()
            .ok_or_else(|| Error::Input("sampler already finished".into()))?;
        let out = denoise_step(self.model, &self.latent, self.text, step, hook)?;
        let latent_in = std::mem::replace(&mut self.latent, out.latent);
        self.trace.steps.push(StepRecord {
            step,
            timestep: self.model.config.steps - step + 1,
            alpha: hook.alpha(step),
            maps: out.maps,
            key_inputs: out.key_inputs,
            latent: latent_in,
        });
        Ok(())
    }

    pub fn finish(self) -> (AttentionTrace, Matrix) {
        (self.trace, self.latent)
    }
}

/// Runs all `T` steps from a seeded initial latent.
pub fn run_sampler(
    model: &ToyDenoiser,
    text: &EmbeddingSeq,
    hook: &dyn KeyHook,
    seed: u64,
) -> Result<(AttentionTrace, Matrix)> {
    let mut sampler = Sampler::new(model, text, seed);
    while sampler.next_step().is_some() {
        sampler.advance(hook)?;
    }
    Ok(sampler.finish())
}
