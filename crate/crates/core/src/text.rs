//! Toy text front end: hash tokenizer, seeded embedding table, masking and
//! concept lookup.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Id reserved for the mask placeholder.
pub const MASK_ID: u32 = 0;
pub const MASK_SURFACE: &str = "[MASK]";
pub const VOCAB_SIZE: u32 = 49_408;

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "with", "by", "for",
    "from", "into", "onto", "over", "under", "near", "beside", "behind", "is", "are", "was",
    "were", "be", "its", "their", "this", "that", "these", "those", "as",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Token ids aligned with the words they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub surface: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of tokens that are not stop words or masks.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.tokens[i] != MASK_ID && !is_stop_word(&self.surface[i]))
            .collect()
    }
}

fn word_id(word: &str) -> u32 {
    // FNV-1a: stable across platforms and toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    1 + (h % u64::from(VOCAB_SIZE - 1)) as u32
}

fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercases, splits on whitespace and punctuation, and hashes each word
/// into `[1, VOCAB_SIZE)`.
pub fn tokenize(prompt: &str) -> Result<TokenSeq> {
    let surface = split_words(prompt);
    if surface.is_empty() {
        return Err(Error::Input("prompt contains no words".into()));
    }
    let tokens = surface.iter().map(|w| word_id(w)).collect();
    Ok(TokenSeq { tokens, surface })
}

/// Text embedding standing in for the key-projection input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub matrix: Matrix,
    pub seed: u64,
}

/// Embedding row for a single token id: `N(0, 1/d_model)` entries drawn from
/// a stream keyed by `(seed, id)`.
pub fn embedding_row(token: u32, seed: u64, d_model: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("positive std");
    let mut rng = seed::stream(&[seed::TAG_EMBED, seed, u64::from(token)]);
    (0..d_model).map(|_| normal.sample(&mut rng)).collect()
}

pub fn embed(seq: &TokenSeq, seed: u64, d_model: usize) -> Result<EmbeddingSeq> {
    if d_model == 0 {
        return Err(Error::Dimension("d_model must be at least 1".into()));
    }
    if seq.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    let data: Vec<f64> = seq
        .tokens
        .iter()
        .flat_map(|&t| embedding_row(t, seed, d_model))
        .collect();
    Ok(EmbeddingSeq {
        matrix: Matrix::from_vec(seq.len(), d_model, data)?,
        seed,
    })
}

/// A concept phrase and the prompt positions it resolved to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub text: String,
    pub indices: BTreeSet<usize>,
}

impl Concept {
    pub fn new(text: impl Into<String>, indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            text: text.into(),
            indices: indices.into_iter().collect(),
        }
    }

    /// Resolves `text` against `seq`.
    pub fn resolve(seq: &TokenSeq, text: &str) -> Self {
        Self::new(text, concept_token_indices(seq, text))
    }
}

/// Present/missing split of the prompt's concepts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPartition {
    pub present: Vec<Concept>,
    pub missing: Vec<Concept>,
}

impl ConceptPartition {
    /// Builds a partition, removing from the present side any position that
    /// is also claimed as missing.
    pub fn new(present: Vec<Concept>, missing: Vec<Concept>) -> Self {
        let taken: BTreeSet<usize> = missing.iter().flat_map(|c| c.indices.iter().copied()).collect();
        let present = present
            .into_iter()
            .map(|mut c| {
                c.indices.retain(|i| !taken.contains(i));
                c
            })
            .collect();
        Self { present, missing }
    }

    pub fn present_indices(&self) -> BTreeSet<usize> {
        self.present.iter().flat_map(|c| c.indices.iter().copied()).collect()
    }

    pub fn missing_indices(&self) -> BTreeSet<usize> {
        self.missing.iter().flat_map(|c| c.indices.iter().copied()).collect()
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let all = self.present.iter().chain(&self.missing);
        for c in all {
            if let Some(&bad) = c.indices.iter().find(|&&i| i >= len) {
                return Err(Error::Input(format!(
                    "concept {:?} index {bad} out of range for {len} tokens",
                    c.text
                )));
            }
        }
        if !self.present_indices().is_disjoint(&self.missing_indices()) {
            return Err(Error::Input("present and missing sets overlap".into()));
        }
        Ok(())
    }
}

/// Replaces every token of every missing concept by the mask token, one for
/// one, so positions stay aligned.
pub fn mask_prompt(seq: &TokenSeq, partition: &ConceptPartition) -> Result<TokenSeq> {
    let mut out = seq.clone();
    for i in partition.missing_indices() {
        if i >= seq.len() {
            return Err(Error::Input(format!(
                "mask index {i} out of range for {} tokens",
                seq.len()
            )));
        }
        out.tokens[i] = MASK_ID;
        out.surface[i] = MASK_SURFACE.to_string();
    }
    Ok(out)
}

/// All positions covered by a contiguous occurrence of `concept`'s words.
pub fn concept_token_indices(seq: &TokenSeq, concept: &str) -> BTreeSet<usize> {
    let words = split_words(concept);
    let mut out = BTreeSet::new();
    if words.is_empty() || words.len() > seq.len() {
        return out;
    }
    for start in 0..=seq.len() - words.len() {
        if seq.surface[start..start + words.len()] == words[..] {
            out.extend(start..start + words.len());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_DOGS: &str = "a black dog and a white dog";

    #[test]
    fn tokenize_is_deterministic_and_case_folded() {
        assert_eq!(tokenize("a cat").unwrap(), tokenize("a cat").unwrap());
        assert_eq!(tokenize("Cat").unwrap().tokens, tokenize("cat").unwrap().tokens);
        let seq = tokenize(TWO_DOGS).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.tokens[2], seq.tokens[6]);
        assert_ne!(seq.tokens[1], seq.tokens[5]);
        assert!(seq.tokens.iter().all(|&t| t != MASK_ID && t < VOCAB_SIZE));
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let seq = tokenize("A cat, on a mat!").unwrap();
        assert_eq!(seq.surface, ["a", "cat", "on", "a", "mat"]);
        assert!(tokenize("").is_err());
        assert!(tokenize(" ,. ").is_err());
    }

    #[test]
    fn embedding_lookup_semantics() {
        let seq = tokenize(TWO_DOGS).unwrap();
        let a = embed(&seq, 9, 16).unwrap();
        let b = embed(&seq, 9, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matrix.row(2), a.matrix.row(6));
        assert_ne!(a.matrix.row(1), a.matrix.row(5));
        let masked = embedding_row(MASK_ID, 9, 16);
        assert!(masked.iter().any(|&v| v != 0.0));
        assert!(embed(&seq, 9, 0).is_err());
    }

    #[test]
    fn embedding_rows_have_unit_norm_on_average() {
        let d = 64;
        let mean_norm: f64 = (1..=1000u32)
            .map(|t| embedding_row(t * 7919, 42, d).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / 1000.0;
        assert!((mean_norm - 1.0).abs() < 0.1, "mean norm {mean_norm}");
    }

    #[test]
    fn concept_lookup() {
        let seq = tokenize(TWO_DOGS).unwrap();
        let idx = |c: &str| concept_token_indices(&seq, c).into_iter().collect::<Vec<_>>();
        assert_eq!(idx("white dog"), [5, 6]);
        assert_eq!(idx("black dog"), [1, 2]);
        assert_eq!(idx("dog"), [2, 6]);
        assert_eq!(idx("Red Cat"), Vec::<usize>::new());
        assert_eq!(idx("  "), Vec::<usize>::new());
    }

    #[test]
    fn masking() {
        let seq = tokenize(TWO_DOGS).unwrap();
        assert_eq!(mask_prompt(&seq, &ConceptPartition::default()).unwrap(), seq);

        let all = ConceptPartition::new(vec![], vec![Concept::new("all", 0..seq.len())]);
        assert!(mask_prompt(&seq, &all).unwrap().tokens.iter().all(|&t| t == MASK_ID));

        let seq8 = tokenize("a red cup beside a tall green glass vase").unwrap();
        let seq8 = TokenSeq { tokens: seq8.tokens[..8].to_vec(), surface: seq8.surface[..8].to_vec() };
        let part = ConceptPartition::new(vec![], vec![Concept::new("green glass", [5, 6])]);
        let masked = mask_prompt(&seq8, &part).unwrap();
        let diff: Vec<usize> = (0..8).filter(|&i| masked.tokens[i] != seq8.tokens[i]).collect();
        assert_eq!(diff, [5, 6]);

        let bad = ConceptPartition::new(vec![], vec![Concept::new("x", [99])]);
        assert!(matches!(mask_prompt(&seq, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn missing_wins_on_conflict() {
        let p = ConceptPartition::new(
            vec![Concept::new("dog", [2, 6])],
            vec![Concept::new("white dog", [5, 6])],
        );
        assert!(p.present_indices().is_disjoint(&p.missing_indices()));
        assert_eq!(p.present_indices().into_iter().collect::<Vec<_>>(), [2]);
        p.validate(7).unwrap();
        assert!(p.validate(6).is_err());
    }

    proptest! {
        #[test]
        fn masking_preserves_length_and_delta_support(
            words in proptest::collection::vec("[a-z]{1,6}", 1..12),
            pick in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let prompt = words.join(" ");
            let seq = tokenize(&prompt).unwrap();
            let missing: Vec<usize> = (0..seq.len()).filter(|&i| pick[i]).collect();
            let part = ConceptPartition::new(vec![], vec![Concept::new("m", missing.clone())]);
            let masked = mask_prompt(&seq, &part).unwrap();
            prop_assert_eq!(masked.len(), seq.len());
            let diff = embed(&seq, 3, 8).unwrap().matrix.sub(&embed(&masked, 3, 8).unwrap().matrix).unwrap();
            for i in 0..seq.len() {
                if !missing.contains(&i) {
                    prop_assert!(diff.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
