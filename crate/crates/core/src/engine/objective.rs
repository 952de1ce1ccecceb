//! Alignment objective over the injection strength and its derivative.
//!
//! For each augmented layer the attention logits are affine in the
//! strength: `S(a) = Q K^T / sqrt(d_k) + a * Q dK^T / sqrt(d_k)`. Both terms
//! are precomputed, so one evaluation costs a softmax per head.

use std::collections::BTreeSet;

use crate::denoiser::ToyDenoiser;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{softmax_in_place, softmax_rows, Matrix};

use super::DeltaKey;

/// Logit terms of one head at a frozen latent.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadContext {
    base_logits: Matrix,
    delta_logits: Matrix,
}

impl HeadContext {
    /// `base` is `Q K^T / sqrt(d_k)`, `delta` is `Q dK^T / sqrt(d_k)`.
    pub fn from_logits(base: Matrix, delta: Matrix) -> Result<Self> {
        if base.shape() != delta.shape() || base.is_empty() {
            return dim_err("base and delta logits must share a non-empty shape");
        }
        Ok(Self {
            base_logits: base,
            delta_logits: delta,
        })
    }

    /// From projected queries, keys and key differences.
    pub fn from_projections(queries: &Matrix, keys: &Matrix, delta_keys: &Matrix) -> Result<Self> {
        let scale = 1.0 / (queries.cols() as f64).sqrt();
        Self::from_logits(
            queries.matmul_transposed(keys)?.scale(scale),
            queries.matmul_transposed(delta_keys)?.scale(scale),
        )
    }

    pub fn n_queries(&self) -> usize {
        self.base_logits.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.base_logits.cols()
    }

    /// Attention map at strength `alpha`.
    pub fn attention(&self, alpha: f64) -> Matrix {
        let logits = self.base_logits.add_scaled(&self.delta_logits, alpha).expect("same shape");
        softmax_rows(&logits).expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerContext {
    pub layer: usize,
    pub heads: Vec<HeadContext>,
    /// Per-query target attention.
    pub target: Vec<f64>,
}

/// Frozen snapshot of one sampling step over which the strength is
/// optimised. Building it never touches the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub layers: Vec<LayerContext>,
    pub missing: BTreeSet<usize>,
}

impl StepContext {
    pub fn new(step: usize, layers: Vec<LayerContext>, missing: BTreeSet<usize>) -> Result<Self> {
        if missing.is_empty() {
            return Err(Error::Input("step context needs at least one missing token".into()));
        }
        for lc in &layers {
            let first = lc.heads.first().ok_or_else(|| Error::Input(format!("layer {} has no heads", lc.layer)))?;
            let (nq, nk) = (first.n_queries(), first.n_keys());
            if lc.heads.iter().any(|h| (h.n_queries(), h.n_keys()) != (nq, nk)) {
                return dim_err(format!("heads of layer {} differ in shape", lc.layer));
            }
            if lc.target.len() != nq {
                return dim_err(format!("target has {} entries, layer has {nq} queries", lc.target.len()));
            }
            if let Some(&i) = missing.iter().find(|&&i| i >= nk) {
                return Err(Error::Input(format!("missing index {i} out of range for {nk} keys")));
            }
        }
        Ok(Self { step, layers, missing })
    }

    /// Mean logit shift per unit strength on the missing columns, over
    /// layers, heads and queries. Positive when queries on average align
    /// with the key difference.
    pub fn mean_delta_logit(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for head in self.layers.iter().flat_map(|lc| &lc.heads) {
            for q in 0..head.n_queries() {
                let row = head.delta_logits.row(q);
                sum += self.missing.iter().map(|&i| row[i]).sum::<f64>();
                n += self.missing.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Snapshot of the model at `latent`, with `key_input` as the un-hooked
    /// key input of every layer. `targets[j]` belongs to `layers[j]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_model(
        model: &ToyDenoiser,
        step: usize,
        latent: &Matrix,
        key_input: &Matrix,
        delta: &DeltaKey,
        layers: &[usize],
        targets: Vec<Vec<f64>>,
        missing: BTreeSet<usize>,
    ) -> Result<Self> {
        if targets.len() != layers.len() {
            return dim_err("one target per augmented layer required");
        }
        let mut out = Vec::with_capacity(layers.len());
        for (&l, target) in layers.iter().zip(targets) {
            if l >= model.config().layers {
                return Err(Error::Input(format!("layer {l} out of range")));
            }
            let heads = (0..model.config().heads)
                .map(|h| {
                    let hw = model.head(l, h);
                    HeadContext::from_projections(
                        &latent.matmul(&hw.w_q)?,
                        &key_input.matmul(&hw.w_k)?,
                        &delta.layer(l).matmul(&hw.w_k)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(LayerContext { layer: l, heads, target });
        }
        Self::new(step, out, missing)
    }
}

/// Loss and its derivative with respect to `alpha`, in one pass.
///
/// Per layer the missing-token aggregate is
/// `agg_q = mean_{h, i in missing} A^h_{q i}` and the loss is
/// `sum_q (agg_q - target_q)^2`. With `D` the delta logits, the softmax
/// derivative is `dA_{qi}/da = A_{qi} (D_{qi} - sum_j A_{qj} D_{qj})`.
pub fn loss_and_gradient(alpha: f64, ctx: &StepContext) -> (f64, f64) {
    let mut loss = 0.0;
    let mut grad = 0.0;
    for lc in &ctx.layers {
        let nq = lc.target.len();
        let norm = 1.0 / (lc.heads.len() * ctx.missing.len()) as f64;
        let mut agg = vec![0.0; nq];
        let mut d_agg = vec![0.0; nq];
        for head in &lc.heads {
            let nk = head.n_keys();
            let mut row = vec![0.0; nk];
            for q in 0..nq {
                let base = head.base_logits.row(q);
                let delta = head.delta_logits.row(q);
                for k in 0..nk {
                    row[k] = base[k] + alpha * delta[k];
                }
                softmax_in_place(&mut row);
                let mean_delta: f64 = row.iter().zip(delta).map(|(a, d)| a * d).sum();
                for &i in &ctx.missing {
                    agg[q] += row[i] * norm;
                    d_agg[q] += row[i] * (delta[i] - mean_delta) * norm;
                }
            }
        }
        for q in 0..nq {
            let r = agg[q] - lc.target[q];
            loss += r * r;
            grad += 2.0 * r * d_agg[q];
        }
    }
    (loss, grad)
}

/// Summed alignment loss over augmented layers.
pub fn alignment_loss(alpha: f64, ctx: &StepContext) -> f64 {
    loss_and_gradient(alpha, ctx).0
}

/// Analytic `dL/d alpha`.
pub fn loss_gradient(alpha: f64, ctx: &StepContext) -> f64 {
    loss_and_gradient(alpha, ctx).1
}
