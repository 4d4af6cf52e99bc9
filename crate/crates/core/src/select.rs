//! Main claim detection: candidate scoring, argmax selection and the random
//! selection baseline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::claimgen::ClaimCandidate;
use crate::error::{Error, Result};
use crate::protocol::{request_scores, Endpoint, LineTransport};
use crate::text::{is_stopword, words};

/// Largest number of texts sent in one scoring request.
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: ClaimCandidate,
    pub claim_probability: f64,
}

/// Anything that yields claim-class probabilities for a batch of texts.
pub trait ClaimScorer {
    fn score_batch(&mut self, batch_id: &str, texts: &[String]) -> Result<Vec<f64>>;
}

/// Which scorer to use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerHandle {
    BuiltinLexical,
    External(Endpoint),
}

impl FromStr for ScorerHandle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "builtin" | "builtin_lexical" => Ok(ScorerHandle::BuiltinLexical),
            other => Ok(ScorerHandle::External(other.parse()?)),
        }
    }
}

impl fmt::Display for ScorerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerHandle::BuiltinLexical => f.write_str("builtin"),
            ScorerHandle::External(e) => e.fmt(f),
        }
    }
}

impl ScorerHandle {
    pub fn connect(&self) -> Result<Box<dyn ClaimScorer>> {
        match self {
            ScorerHandle::BuiltinLexical => Ok(Box::new(LexicalScorer)),
            ScorerHandle::External(endpoint) => Ok(Box::new(ExternalScorer::new(endpoint.connect()?))),
        }
    }
}

/// Scorer behind the line protocol.
pub struct ExternalScorer {
    transport: Box<dyn LineTransport>,
}

impl ExternalScorer {
    pub fn new(transport: Box<dyn LineTransport>) -> Self {
        Self { transport }
    }
}

impl ClaimScorer for ExternalScorer {
    fn score_batch(&mut self, batch_id: &str, texts: &[String]) -> Result<Vec<f64>> {
        request_scores(self.transport.as_mut(), batch_id, texts)
    }
}

const CAUSAL_CUES: &[&str] = &[
    "cause",
    "causes",
    "caused",
    "causing",
    "cure",
    "cures",
    "cured",
    "prevent",
    "prevents",
    "prevented",
    "increase",
    "increases",
    "increased",
    "reduce",
    "reduces",
    "reduced",
    "lower",
    "lowers",
    "raise",
    "raises",
    "treat",
    "treats",
    "trigger",
    "triggers",
    "kill",
    "kills",
    "protect",
    "protects",
    "damage",
    "damages",
    "worsen",
    "worsens",
    "improve",
    "improves",
    "promote",
    "promotes",
];

const CAUSAL_PHRASES: &[[&str; 2]] = &[
    ["leads", "to"],
    ["lead", "to"],
    ["led", "to"],
    ["results", "in"],
    ["result", "in"],
    ["linked", "to"],
    ["associated", "with"],
    ["responsible", "for"],
];

const QUESTION_OPENERS: &[&str] = &[
    "what", "why", "how", "when", "where", "who", "which", "does", "do", "did", "is", "are", "can", "could", "should",
    "will", "would", "was", "were", "has", "have",
];

const BIAS: f64 = -2.5;
const W_CUE: f64 = 2.0;
const W_CONTENT: f64 = 1.0;
const W_DECLARATIVE: f64 = 1.0;
const LENGTH_LIMIT: usize = 40;
const W_LENGTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LexicalFeatures {
    pub tokens: usize,
    pub cue_hits: usize,
    pub content_tokens: usize,
    pub declarative: bool,
}

pub fn lexical_features(text: &str) -> LexicalFeatures {
    let toks = words(text);
    let mut cue_hits = 0;
    let mut in_phrase = vec![false; toks.len()];
    for i in 0..toks.len().saturating_sub(1) {
        if CAUSAL_PHRASES.iter().any(|p| toks[i] == p[0] && toks[i + 1] == p[1]) {
            cue_hits += 1;
            in_phrase[i] = true;
            in_phrase[i + 1] = true;
        }
    }
    cue_hits += toks
        .iter()
        .zip(&in_phrase)
        .filter(|(t, inside)| !**inside && CAUSAL_CUES.contains(&t.as_str()))
        .count();
    let content_tokens = toks
        .iter()
        .zip(&in_phrase)
        .filter(|(t, inside)| !**inside && !is_stopword(t) && !CAUSAL_CUES.contains(&t.as_str()))
        .count();
    let declarative =
        !toks.is_empty() && !QUESTION_OPENERS.contains(&toks[0].as_str()) && !text.trim_end().ends_with('?');
    LexicalFeatures {
        tokens: toks.len(),
        cue_hits,
        content_tokens,
        declarative,
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Training-free claim-likeness score in `[0, 1]`: a logistic over causal
/// cue presence, at least two content tokens, declarative form, and a
/// penalty for every token beyond 40.
pub fn builtin_lexical_score(text: &str) -> f64 {
    let f = lexical_features(text);
    let mut z = BIAS;
    if f.cue_hits > 0 {
        z += W_CUE;
    }
    if f.content_tokens >= 2 {
        z += W_CONTENT;
    }
    if f.declarative {
        z += W_DECLARATIVE;
    }
    z -= W_LENGTH * f.tokens.saturating_sub(LENGTH_LIMIT) as f64;
    logistic(z)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl ClaimScorer for LexicalScorer {
    fn score_batch(&mut self, _batch_id: &str, texts: &[String]) -> Result<Vec<f64>> {
        Ok(texts.iter().map(|t| builtin_lexical_score(t)).collect())
    }
}

/// Scores candidates in order. Each request holds candidates of one
/// document (at most [`MAX_BATCH`]); the batch id is the document id, with
/// a `#n` suffix for documents spanning several requests.
pub fn score_candidates(candidates: &[ClaimCandidate], scorer: &mut dyn ClaimScorer) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("score_candidates"));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for group in candidates.chunk_by(|a, b| a.doc_id == b.doc_id) {
        let chunks: Vec<&[ClaimCandidate]> = group.chunks(MAX_BATCH).collect();
        for (n, chunk) in chunks.iter().enumerate() {
            let batch_id = if chunks.len() == 1 {
                chunk[0].doc_id.clone()
            } else {
                format!("{}#{n}", chunk[0].doc_id)
            };
            let texts: Vec<String> = chunk.iter().map(|c| c.text.clone()).collect();
            let scores = scorer.score_batch(&batch_id, &texts)?;
            if scores.len() != texts.len() {
                return Err(Error::protocol(&batch_id, "score count does not match the batch"));
            }
            for (candidate, p) in chunk.iter().zip(scores) {
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(Error::protocol(&batch_id, format!("probability {p} outside [0, 1]")));
                }
                out.push(ScoredCandidate {
                    candidate: ClaimCandidate {
                        score: Some(p),
                        ..(*candidate).clone()
                    },
                    claim_probability: p,
                });
            }
        }
    }
    Ok(out)
}

/// Highest claim probability; ties go to the earlier onset, then the
/// shorter text, then input order.
pub fn select_main_claim(scored: &[ScoredCandidate]) -> Result<ClaimCandidate> {
    scored
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            b.claim_probability
                .total_cmp(&a.claim_probability)
                .then_with(|| a.candidate.provenance.onset().cmp(&b.candidate.provenance.onset()))
                .then_with(|| a.candidate.text.chars().count().cmp(&b.candidate.text.chars().count()))
                .then_with(|| i.cmp(j))
        })
        .map(|(_, s)| s.candidate.clone())
        .ok_or(Error::EmptyInput("select_main_claim"))
}

/// Uniform pick with a ChaCha8 generator seeded from `seed` (rand_chacha's
/// `ChaCha8Rng::seed_from_u64`, index drawn with `random_range`).
pub fn select_random(candidates: &[ClaimCandidate], seed: u64) -> Result<ClaimCandidate> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("select_random"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(candidates[rng.random_range(0..candidates.len())].clone())
}

/// Per-document seed: the first eight bytes (little endian) of
/// SHA-256(run_seed as little-endian u64 || doc_id).
pub fn document_seed(run_seed: u64, doc_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update(doc_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
