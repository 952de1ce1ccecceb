//! Line-delimited JSON trace files and plot-ready exports.
//!
//! A trace file is a header line, one line per `(step, layer)` and a footer.
//! Floats are written in shortest round-trip form, so reloading gives back
//! the exact maps. Key inputs and latents are stored as checksums only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{matrix_checksum, AttentionTrace, StepRecord};
use crate::engine::ScheduleRecord;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::text::{ConceptPartition, TokenSeq};

pub const TRACE_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub version: String,
    /// `baseline` or `augmented`.
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub tokens: TokenSeq,
    pub steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub n_keys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub step: usize,
    pub timestep: usize,
    pub layer: usize,
    pub alpha: f64,
    pub key_checksum: String,
    /// Latent entering the step; repeated on every layer of the step.
    pub latent_checksum: String,
    pub maps: Vec<Matrix>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFooter {
    pub schedule: ScheduleRecord,
    pub partition: ConceptPartition,
    pub final_latent_checksum: String,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header(TraceHeader),
    Layer(LayerRecord),
    Footer(TraceFooter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<LayerRecord>,
    pub footer: TraceFooter,
}

impl TraceFile {
    pub fn from_trace(
        kind: &str,
        config: BTreeMap<String, String>,
        tokens: &TokenSeq,
        trace: &AttentionTrace,
        final_latent: &Matrix,
        footer: TraceFooter,
    ) -> Self {
        let mut records = Vec::with_capacity(trace.len() * trace.n_layers());
        for rec in &trace.steps {
            let latent_checksum = matrix_checksum(&rec.latent);
            for (l, maps) in rec.maps.iter().enumerate() {
                records.push(LayerRecord {
                    step: rec.step,
                    timestep: rec.timestep,
                    layer: l,
                    alpha: rec.alpha,
                    key_checksum: rec.key_inputs.get(l).map(matrix_checksum).unwrap_or_default(),
                    latent_checksum: latent_checksum.clone(),
                    maps: maps.clone(),
                });
            }
        }
        Self {
            header: TraceHeader {
                version: TRACE_VERSION.into(),
                kind: kind.into(),
                config,
                tokens: tokens.clone(),
                steps: trace.len(),
                layers: trace.n_layers(),
                heads: trace.n_heads(),
                n_queries: trace.n_queries(),
                n_keys: trace.n_keys(),
            },
            records,
            footer: TraceFooter {
                final_latent_checksum: matrix_checksum(final_latent),
                ..footer
            },
        }
    }

    /// Rebuilds the maps and strengths as an [`AttentionTrace`]. Key inputs
    /// are left empty and latents are `0 x 0`, since only checksums are kept.
    pub fn to_trace(&self) -> AttentionTrace {
        let mut steps: Vec<StepRecord> = Vec::with_capacity(self.header.steps);
        for rec in &self.records {
            if steps.last().map_or(true, |s| s.step != rec.step) {
                steps.push(StepRecord {
                    step: rec.step,
                    timestep: rec.timestep,
                    alpha: rec.alpha,
                    maps: Vec::with_capacity(self.header.layers),
                    key_inputs: Vec::new(),
                    latent: Matrix::zeros(0, 0),
                });
            }
            steps.last_mut().expect("pushed above").maps.push(rec.maps.clone());
        }
        AttentionTrace { steps }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |line: &Line| -> Result<()> {
            out.push_str(&serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
            Ok(())
        };
        push(&Line::Header(self.header.clone()))?;
        for r in &self.records {
            push(&Line::Layer(r.clone()))?;
        }
        push(&Line::Footer(self.footer.clone()))?;
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, m: String| Error::Format(format!("line {n}: {m}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Format("empty trace file".into()))?;
        // Check the version before strict decoding so that newer files get a
        // clear message instead of a field error.
        let peek: serde_json::Value = serde_json::from_str(first).map_err(|e| bad(1, e.to_string()))?;
        if let Some(v) = peek.get("version").and_then(|v| v.as_str()) {
            check_version(v)?;
        }
        let header = match serde_json::from_str(first).map_err(|e| bad(1, e.to_string()))? {
            Line::Header(h) => h,
            _ => return Err(bad(1, "expected header record".into())),
        };
        let mut records = Vec::new();
        let mut footer = None;
        for (i, line) in lines {
            let n = i + 1;
            if footer.is_some() {
                return Err(bad(n, "record after footer".into()));
            }
            match serde_json::from_str(line).map_err(|e| bad(n, e.to_string()))? {
                Line::Header(_) => return Err(bad(n, "second header".into())),
                Line::Layer(r) => records.push(r),
                Line::Footer(f) => footer = Some(f),
            }
        }
        let footer = footer.ok_or_else(|| Error::Format("missing footer".into()))?;
        let file = Self { header, records, footer };
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<()> {
        let h = &self.header;
        if self.records.len() != h.steps * h.layers {
            return Err(Error::Format(format!(
                "{} layer records, header announces {} steps x {} layers",
                self.records.len(),
                h.steps,
                h.layers
            )));
        }
        if h.tokens.len() != h.n_keys {
            return Err(Error::Format("token count differs from key count".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            let (step, layer) = (i / h.layers.max(1) + 1, i % h.layers.max(1));
            if (r.step, r.layer) != (step, layer) {
                return Err(Error::Format(format!(
                    "record {i} is (step {}, layer {}), expected ({step}, {layer})",
                    r.step, r.layer
                )));
            }
            if r.maps.len() != h.heads {
                return Err(Error::Format(format!("record {i} has {} heads", r.maps.len())));
            }
            for m in &r.maps {
                if m.shape() != (h.n_queries, h.n_keys) || m.as_slice().len() != h.n_queries * h.n_keys {
                    return Err(Error::Format(format!("record {i} has a map of the wrong shape")));
                }
                if !m.is_finite() {
                    return Err(Error::Format(format!("record {i} has a non-finite entry")));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Long format: one row per map entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,timestep,layer,head,query,key,alpha,value\n");
        for r in &self.records {
            for (h, m) in r.maps.iter().enumerate() {
                for q in 0..m.rows() {
                    for (k, v) in m.row(q).iter().enumerate() {
                        let _ = writeln!(out, "{},{},{},{h},{q},{k},{},{v}", r.step, r.timestep, r.layer, r.alpha);
                    }
                }
            }
        }
        out
    }

    pub fn to_export(&self) -> ExportDoc {
        let mut steps: Vec<ExportStep> = Vec::new();
        for r in &self.records {
            if steps.last().map_or(true, |s| s.step != r.step) {
                steps.push(ExportStep {
                    step: r.step,
                    timestep: r.timestep,
                    alpha: r.alpha,
                    maps: Vec::new(),
                });
            }
            let rows = r.maps.iter().map(|m| m.rows_iter().map(<[f64]>::to_vec).collect()).collect();
            steps.last_mut().expect("pushed above").maps.push(rows);
        }
        ExportDoc {
            version: self.header.version.clone(),
            kind: self.header.kind.clone(),
            tokens: self.header.tokens.surface.clone(),
            steps,
        }
    }
}

/// Compact JSON export: `steps[s].maps[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDoc {
    pub version: String,
    pub kind: String,
    pub tokens: Vec<String>,
    pub steps: Vec<ExportStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStep {
    pub step: usize,
    pub timestep: usize,
    pub alpha: f64,
    pub maps: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ExportDoc {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Every map entry as `(step, layer, head, query, key, alpha, value)`.
    pub fn entries(&self) -> Vec<ExportEntry> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (l, heads) in s.maps.iter().enumerate() {
                for (h, rows) in heads.iter().enumerate() {
                    for (q, row) in rows.iter().enumerate() {
                        for (k, &value) in row.iter().enumerate() {
                            out.push(ExportEntry { step: s.step, layer: l, head: h, query: q, key: k, alpha: s.alpha, value });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportEntry {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub alpha: f64,
    pub value: f64,
}

/// Parses the long-format CSV written by [`TraceFile::to_csv`].
pub fn parse_export_csv(text: &str) -> Result<Vec<ExportEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,timestep,layer,head,query,key,alpha,value") {
        return Err(Error::Format("unexpected CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("CSV row {}: {line:?}", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ExportEntry {
                step: int(f[0])?,
                layer: int(f[2])?,
                head: int(f[3])?,
                query: int(f[4])?,
                key: int(f[5])?,
                alpha: float(f[6])?,
                value: float(f[7])?,
            })
        })
        .collect()
}

fn check_version(v: &str) -> Result<()> {
    let major: u64 = v
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| Error::Format(format!("unreadable version {v:?}")))?;
    if major != SUPPORTED_MAJOR {
        return Err(Error::Format(format!("unsupported trace version {v} (reader handles {SUPPORTED_MAJOR}.x)")));
    }
    Ok(())
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_model, run_sampler, DenoiserConfig, IdentityHook};
    use crate::metrics::{entropy_series, token_intensity};
    use crate::text::{embed, tokenize};

    fn sample() -> (TraceFile, AttentionTrace) {
        let model = init_model(&DenoiserConfig { steps: 3, layers: 2, ..DenoiserConfig::default() }).unwrap();
        let tokens = tokenize("a cat on a mat").unwrap();
        let text = embed(&tokens, 0, 64).unwrap();
        let (trace, latent) = run_sampler(&model, &text, &IdentityHook, 5).unwrap();
        let cfg = BTreeMap::from([("seed".to_string(), "5".to_string())]);
        let file = TraceFile::from_trace("baseline", cfg, &tokens, &trace, &latent, TraceFooter::default());
        (file, trace)
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let (file, trace) = sample();
        let text = file.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2 + 1);
        let back = TraceFile::parse(&text).unwrap();
        assert_eq!(back, file);
        let rebuilt = back.to_trace();
        for s in 1..=3 {
            assert_eq!(rebuilt.step(s).unwrap().maps, trace.step(s).unwrap().maps);
            let all = (0..5).collect();
            assert_eq!(token_intensity(&rebuilt, &all, s).unwrap(), token_intensity(&trace, &all, s).unwrap());
        }
        assert_eq!(entropy_series(&rebuilt, None).unwrap(), entropy_series(&trace, None).unwrap());
    }

    #[test]
    fn reader_rejects_bad_files() {
        let (file, _) = sample();
        let text = file.to_jsonl().unwrap();
        assert!(matches!(TraceFile::parse(""), Err(Error::Format(_))));
        let newer = text.replacen("\"version\":\"1.0\"", "\"version\":\"2.0\"", 1);
        let err = TraceFile::parse(&newer).unwrap_err().to_string();
        assert!(err.contains("unsupported trace version 2.0"), "{err}");
        assert!(TraceFile::parse(&text.replacen("\"version\":\"1.0\"", "\"version\":\"1.7\"", 1)).is_ok());
        let truncated: Vec<&str> = text.lines().take(4).collect();
        assert!(TraceFile::parse(&truncated.join("\n")).is_err());
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        assert!(TraceFile::parse(&lines.join("\n")).is_err());
        assert!(TraceFile::parse(&text.replacen("\"alpha\"", "\"alfa\"", 1)).is_err());
    }

    #[test]
    fn csv_and_json_exports_agree() {
        let (file, _) = sample();
        let from_csv = parse_export_csv(&file.to_csv()).unwrap();
        let doc = ExportDoc::parse(&file.to_export().to_json().unwrap()).unwrap();
        assert_eq!(from_csv, doc.entries());
        assert_eq!(from_csv.len(), 3 * 2 * 4 * 64 * 5);
        let first = &file.records[0].maps[0];
        assert_eq!(doc.steps[0].maps[0][0][0], first.row(0).to_vec());
    }

    #[test]
    fn atomic_write_replaces_the_target() {
        let dir = std::env::temp_dir().join(format!("deltak-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        write_atomic(&path, b"old").unwrap();
        let (file, _) = sample();
        file.write(&path).unwrap();
        assert_eq!(TraceFile::read(&path).unwrap(), file);
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(&dir).unwrap();
    }
}
