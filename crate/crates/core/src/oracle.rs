//! Concept oracles: decide which prompt concepts made it into the baseline
//! generation and which did not.
//!
//! Two implementations share [`OracleVerdict`]:
//! - a threshold rule over early attention intensity, pure and replayable;
//! - an HTTP client that sends the packaged QA prompt to a vision-language
//!   model service and parses its strict JSON answer.
//!
//! A third `Fixed` mode takes the missing concepts from configuration.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionTrace;
use crate::error::{Error, Result};
use crate::text::{concept_token_indices, Concept, ConceptPartition, TokenSeq};

/// QA prompt sent to the remote model. `{prompt}` is substituted.
pub const VLM_PROMPT_TEMPLATE: &str = include_str!("../assets/vlm_prompt.txt");

/// Environment variable consulted for the remote endpoint.
pub const ENDPOINT_ENV: &str = "DELTAK_ORACLE_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Threshold,
    Remote,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Relative-mass threshold ρ: a token is missing when its early mean
    /// attention is below `ρ / n_keys`.
    pub rho: f64,
    /// Number of early steps inspected.
    pub window: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Cap on concepts per list; `None` keeps all.
    pub top_k: Option<usize>,
    /// Concepts declared missing in `Fixed` mode.
    pub fixed_missing: Vec<String>,
    /// Concepts declared present in `Fixed` mode. When empty, every
    /// remaining content word run counts as present.
    pub fixed_present: Vec<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Threshold,
            rho: 0.5,
            window: 10,
            endpoint: None,
            timeout_ms: 30_000,
            top_k: None,
            fixed_missing: Vec::new(),
            fixed_present: Vec::new(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("oracle.rho {} not in (0, 1]", self.rho)));
        }
        if self.window == 0 || self.window > steps {
            return Err(Error::Config(format!(
                "oracle.window {} not in [1, {steps}]",
                self.window
            )));
        }
        if self.mode == OracleMode::Remote && self.endpoint.is_none() {
            return Err(Error::Config(format!(
                "remote oracle needs oracle.endpoint or {ENDPOINT_ENV}"
            )));
        }
        if self.mode == OracleMode::Fixed && self.fixed_missing.is_empty() && self.fixed_present.is_empty() {
            return Err(Error::Config("fixed oracle with no concepts".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub partition: ConceptPartition,
    /// Response body in remote mode, empty otherwise.
    pub raw_response: String,
    /// Concepts that resolved to no prompt position, and similar notes.
    pub warnings: Vec<String>,
}

/// Mean attention each key position receives over the first `window`
/// steps, averaged across layers, heads and queries.
pub fn early_token_scores(trace: &AttentionTrace, window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > trace.len() {
        return Err(Error::Input(format!(
            "oracle window {window} exceeds trace length {}",
            trace.len()
        )));
    }
    let n_keys = trace.n_keys();
    let mut sums = vec![0.0; n_keys];
    let mut count = 0usize;
    for rec in &trace.steps[..window] {
        for map in rec.maps.iter().flatten() {
            for row in map.rows_iter() {
                for (s, a) in sums.iter_mut().zip(row) {
                    *s += a;
                }
                count += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Threshold oracle over early attention intensity.
///
/// Stop words are left out. Consecutive content words with the same status
/// form one concept.
pub fn partition_threshold(trace: &AttentionTrace, seq: &TokenSeq, cfg: &OracleConfig) -> Result<OracleVerdict> {
    if trace.n_keys() != seq.len() {
        return Err(Error::Input(format!(
            "trace has {} keys, prompt has {} tokens",
            trace.n_keys(),
            seq.len()
        )));
    }
    if !(cfg.rho > 0.0 && cfg.rho <= 1.0) {
        return Err(Error::Config(format!("oracle.rho {} not in (0, 1]", cfg.rho)));
    }
    let scores = early_token_scores(trace, cfg.window)?;
    let cutoff = cfg.rho / seq.len() as f64;
    let content: BTreeSet<usize> = seq.content_positions().into_iter().collect();

    // (is_missing, positions)
    let mut runs: Vec<(bool, Vec<usize>)> = Vec::new();
    for i in 0..seq.len() {
        if !content.contains(&i) {
            continue;
        }
        let missing = scores[i] < cutoff;
        match runs.last_mut() {
            Some((m, pos)) if *m == missing && pos.last() == Some(&(i - 1)) => pos.push(i),
            _ => runs.push((missing, vec![i])),
        }
    }

    let mean = |pos: &[usize]| pos.iter().map(|&i| scores[i]).sum::<f64>() / pos.len() as f64;
    let pick = |want_missing: bool| -> Vec<Concept> {
        let mut chosen: Vec<&Vec<usize>> = runs.iter().filter(|(m, _)| *m == want_missing).map(|(_, p)| p).collect();
        if let Some(k) = cfg.top_k {
            // weakest missing first, strongest present first
            chosen.sort_by(|a, b| {
                let (x, y) = (mean(a), mean(b));
                if want_missing { x.total_cmp(&y) } else { y.total_cmp(&x) }
            });
            chosen.truncate(k);
            chosen.sort_by_key(|p| p[0]);
        }
        chosen
            .into_iter()
            .map(|p| Concept::new(p.iter().map(|&i| seq.surface[i].as_str()).collect::<Vec<_>>().join(" "), p.iter().copied()))
            .collect()
    };
    Ok(OracleVerdict {
        partition: ConceptPartition::new(pick(false), pick(true)),
        raw_response: String::new(),
        warnings: Vec::new(),
    })
}

/// Partition from concept strings given in configuration.
pub fn partition_fixed(seq: &TokenSeq, cfg: &OracleConfig) -> Result<OracleVerdict> {
    let mut warnings = Vec::new();
    let missing = resolve_all(seq, &cfg.fixed_missing, &mut warnings);
    let present = if cfg.fixed_present.is_empty() {
        let taken: BTreeSet<usize> = missing.iter().flat_map(|c| c.indices.iter().copied()).collect();
        let mut runs: Vec<Vec<usize>> = Vec::new();
        for i in seq.content_positions().into_iter().filter(|i| !taken.contains(i)) {
            match runs.last_mut() {
                Some(run) if run.last() == Some(&(i - 1)) => run.push(i),
                _ => runs.push(vec![i]),
            }
        }
        runs.into_iter()
            .map(|r| Concept::new(r.iter().map(|&i| seq.surface[i].as_str()).collect::<Vec<_>>().join(" "), r))
            .collect()
    } else {
        resolve_all(seq, &cfg.fixed_present, &mut warnings)
    };
    Ok(OracleVerdict {
        partition: ConceptPartition::new(present, missing),
        raw_response: String::new(),
        warnings,
    })
}

fn resolve_all(seq: &TokenSeq, concepts: &[String], warnings: &mut Vec<String>) -> Vec<Concept> {
    concepts
        .iter()
        .map(|text| {
            let indices = concept_token_indices(seq, text);
            if indices.is_empty() {
                warnings.push(format!("concept {text:?} not found in prompt"));
            }
            Concept::new(text.clone(), indices)
        })
        .collect()
}

/// The QA prompt with the user prompt substituted and, when configured, the
/// list cap filled in.
pub fn render_prompt(prompt: &str, top_k: Option<usize>) -> String {
    let t = VLM_PROMPT_TEMPLATE.replace("{prompt}", prompt);
    match top_k {
        Some(k) => t.replace("top k ", &format!("top {k} ")),
        None => t,
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    image_summary: &'a str,
    template: String,
    temperature: u32,
}

/// JSON request body for the remote oracle. Field order and content are
/// fixed, so equal inputs give byte-identical bodies.
pub fn build_request(prompt: &str, image_summary: &str, cfg: &OracleConfig) -> String {
    serde_json::to_string(&RemoteRequest {
        prompt,
        image_summary,
        template: render_prompt(prompt, cfg.top_k),
        temperature: 0,
    })
    .expect("request serialises")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoteAnswer {
    present_tokens: Vec<String>,
    missing_tokens: Vec<String>,
}

/// Parses the model's answer. Anything but a bare JSON object with exactly
/// `present_tokens` and `missing_tokens` (string arrays) is rejected.
pub fn parse_response(raw: &str) -> Result<(Vec<String>, Vec<String>)> {
    let answer: RemoteAnswer = serde_json::from_str(raw).map_err(|e| Error::Protocol {
        message: format!("response is not the expected strict JSON object: {e}"),
        raw: raw.to_string(),
    })?;
    Ok((answer.present_tokens, answer.missing_tokens))
}

/// Sends one request body and returns the response body.
pub trait OracleTransport {
    fn post(&self, body: &str) -> Result<String>;
}

/// Blocking HTTP transport.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
    pub timeout: Duration,
}

impl HttpTransport {
    pub fn from_config(cfg: &OracleConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("no oracle endpoint; set oracle.endpoint or {ENDPOINT_ENV}")))?;
        Ok(Self {
            endpoint,
            timeout: Duration::from_millis(cfg.timeout_ms),
        })
    }
}

impl OracleTransport for HttpTransport {
    fn post(&self, body: &str) -> Result<String> {
        let resp = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .set("Content-Type", "application/json")
            .send_string(body);
        match resp {
            Ok(r) => r.into_string().map_err(|e| Error::Transport(e.to_string())),
            Err(ureq::Error::Status(code, r)) => Err(Error::Transport(format!(
                "HTTP {code}: {}",
                r.into_string().unwrap_or_default()
            ))),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }
}

/// Remote oracle over HTTP, endpoint taken from `cfg`.
pub fn partition_remote(prompt: &str, image_summary: &str, cfg: &OracleConfig) -> Result<OracleVerdict> {
    partition_remote_with(&HttpTransport::from_config(cfg)?, prompt, image_summary, cfg)
}

pub fn partition_remote_with(
    transport: &dyn OracleTransport,
    prompt: &str,
    image_summary: &str,
    cfg: &OracleConfig,
) -> Result<OracleVerdict> {
    let seq = crate::text::tokenize(prompt)?;
    let raw = transport.post(&build_request(prompt, image_summary, cfg))?;
    let (mut present, mut missing) = parse_response(&raw)?;
    if let Some(k) = cfg.top_k {
        present.truncate(k);
        missing.truncate(k);
    }
    let mut warnings = Vec::new();
    let present = resolve_all(&seq, &present, &mut warnings);
    let missing = resolve_all(&seq, &missing, &mut warnings);
    let partition = ConceptPartition::new(present, missing);
    Ok(OracleVerdict {
        partition,
        raw_response: raw,
        warnings,
    })
}

/// Plain-text digest of a trace, sent in place of an image.
pub fn summarize_trace(trace: &AttentionTrace, seq: &TokenSeq, window: usize) -> Result<String> {
    let scores = early_token_scores(trace, window)?;
    let parts: Vec<String> = seq
        .surface
        .iter()
        .zip(&scores)
        .map(|(w, s)| format!("{w}={s:.6}"))
        .collect();
    Ok(format!(
        "Mean cross-attention per prompt token over the first {window} of {} denoising steps \
         (uniform share {:.6}): {}",
        trace.len(),
        1.0 / seq.len() as f64,
        parts.join(", ")
    ))
}
