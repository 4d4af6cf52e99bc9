//! Claim–evidence verdict checking and the by-proxy evaluation metrics.
//!
//! NEI predictions are abstentions: they count neither as a prediction
//! nor as an error for precision, but they do cost recall.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::VerdictLabel;
use crate::error::{Error, Result};
use crate::ner::{f1_score, ratio};
use crate::protocol::{request_verdict, Endpoint, LineTransport};
use crate::text::{is_stopword, words};

pub const DEFAULT_OVERLAP_FLOOR: f64 = 0.4;
pub const NEGATION_MARKERS: &[&str] = &["not", "no", "never", "don't", "doesn't"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub doc_id: String,
    pub claim_text: String,
    pub evidence_text: String,
    pub predicted: VerdictLabel,
    pub gold: VerdictLabel,
}

pub trait Verifier {
    fn verify(&mut self, id: &str, claim: &str, evidence: &str) -> Result<VerdictLabel>;
}

/// Which verifier to use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifierHandle {
    Toy,
    External(Endpoint),
}

impl FromStr for VerifierHandle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(VerifierHandle::Toy),
            other => Ok(VerifierHandle::External(other.parse()?)),
        }
    }
}

impl fmt::Display for VerifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifierHandle::Toy => f.write_str("toy"),
            VerifierHandle::External(e) => e.fmt(f),
        }
    }
}

impl VerifierHandle {
    pub fn connect(&self, overlap_floor: f64) -> Result<Box<dyn Verifier>> {
        match self {
            VerifierHandle::Toy => Ok(Box::new(ToyVerifier { overlap_floor })),
            VerifierHandle::External(e) => Ok(Box::new(ExternalVerifier::new(e.connect()?))),
        }
    }
}

/// Content-token overlap rule; see [`toy_verdict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVerifier {
    pub overlap_floor: f64,
}

impl Default for ToyVerifier {
    fn default() -> Self {
        Self {
            overlap_floor: DEFAULT_OVERLAP_FLOOR,
        }
    }
}

impl Verifier for ToyVerifier {
    fn verify(&mut self, _id: &str, claim: &str, evidence: &str) -> Result<VerdictLabel> {
        Ok(toy_verdict(claim, evidence, self.overlap_floor))
    }
}

pub struct ExternalVerifier {
    transport: Box<dyn LineTransport>,
}

impl ExternalVerifier {
    pub fn new(transport: Box<dyn LineTransport>) -> Self {
        Self { transport }
    }
}

impl Verifier for ExternalVerifier {
    fn verify(&mut self, id: &str, claim: &str, evidence: &str) -> Result<VerdictLabel> {
        request_verdict(self.transport.as_mut(), id, claim, evidence)
    }
}

fn negation_parity(tokens: &[String]) -> usize {
    tokens.iter().filter(|t| NEGATION_MARKERS.contains(&t.as_str())).count() % 2
}

fn content_set(tokens: &[String]) -> std::collections::BTreeSet<&str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| !is_stopword(t) && !NEGATION_MARKERS.contains(t))
        .collect()
}

/// Jaccard overlap of content tokens (stopwords and negation markers
/// removed); 0 when both sides are empty.
pub fn content_overlap(claim: &str, evidence: &str) -> f64 {
    let (c, e) = (words(claim), words(evidence));
    let (c, e) = (content_set(&c), content_set(&e));
    let union = c.union(&e).count();
    if union == 0 {
        return 0.0;
    }
    c.intersection(&e).count() as f64 / union as f64
}

/// Overlap at or above `floor` gives SUPPORTS, or REFUTES when the parity
/// of negation markers differs between the two texts; below it, NEI.
pub fn toy_verdict(claim: &str, evidence: &str, floor: f64) -> VerdictLabel {
    if content_overlap(claim, evidence) < floor {
        return VerdictLabel::Nei;
    }
    if negation_parity(&words(claim)) != negation_parity(&words(evidence)) {
        VerdictLabel::Refutes
    } else {
        VerdictLabel::Supports
    }
}

/// Runs one verification; the claim must contain something besides
/// whitespace.
pub fn check(id: &str, claim: &str, evidence: &str, verifier: &mut dyn Verifier) -> Result<VerdictLabel> {
    if claim.trim().is_empty() {
        return Err(Error::InvalidDocument {
            doc_id: id.to_string(),
            message: "empty claim".into(),
        });
    }
    verifier.verify(id, claim, evidence)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub n_gold_sr: usize,
    pub n_pred_sr: usize,
    pub n_correct_sr: usize,
    pub n_pred_nei: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: VerdictCounts,
}

/// Micro over SUPPORTS/REFUTES with NEI as abstention, or the mean of the
/// per-class SUPPORTS and REFUTES scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MetricVariant {
    #[default]
    Micro,
    Macro,
}

impl FromStr for MetricVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(MetricVariant::Micro),
            "macro" => Ok(MetricVariant::Macro),
            other => Err(Error::Config(format!("unknown metric variant {other:?}"))),
        }
    }
}

fn counts(records: &[VerdictRecord], class: Option<VerdictLabel>) -> VerdictCounts {
    let in_scope = |l: VerdictLabel| l.is_decisive() && class.is_none_or(|c| c == l);
    let mut c = VerdictCounts::default();
    for r in records {
        if in_scope(r.gold) {
            c.n_gold_sr += 1;
        }
        if in_scope(r.predicted) {
            c.n_pred_sr += 1;
            if r.predicted == r.gold {
                c.n_correct_sr += 1;
            }
        }
        if r.predicted == VerdictLabel::Nei {
            c.n_pred_nei += 1;
        }
    }
    c
}

pub fn evaluate_verdicts(records: &[VerdictRecord], variant: MetricVariant) -> Result<VerdictScore> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluate_verdicts"));
    }
    let all = counts(records, None);
    let score = |c: &VerdictCounts| {
        let p = ratio(c.n_correct_sr, c.n_pred_sr);
        let r = ratio(c.n_correct_sr, c.n_gold_sr);
        (p, r, f1_score(p, r))
    };
    let (precision, recall, f1) = match variant {
        MetricVariant::Micro => score(&all),
        MetricVariant::Macro => {
            let (ps, rs, fs) = score(&counts(records, Some(VerdictLabel::Supports)));
            let (pr, rr, fr) = score(&counts(records, Some(VerdictLabel::Refutes)));
            ((ps + pr) / 2.0, (rs + rr) / 2.0, (fs + fr) / 2.0)
        }
    };
    Ok(VerdictScore {
        precision,
        recall,
        f1,
        counts: all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 0..=100
    Percent,
    /// 0..=1
    Unit,
}

impl Scale {
    fn max(self) -> f64 {
        match self {
            Scale::Percent => 100.0,
            Scale::Unit => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scale::Percent => "percent",
            Scale::Unit => "unit",
        }
    }
}

/// An F1 value tagged with its scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1 {
    value: f64,
    scale: Scale,
}

impl F1 {
    pub fn new(value: f64, scale: Scale) -> Result<Self> {
        if !(0.0..=scale.max()).contains(&value) {
            return Err(Error::OutOfRange {
                value,
                scale: scale.name(),
            });
        }
        Ok(Self { value, scale })
    }

    pub fn percent(value: f64) -> Result<Self> {
        Self::new(value, Scale::Percent)
    }

    pub fn unit(value: f64) -> Result<Self> {
        Self::new(value, Scale::Unit)
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn scale(self) -> Scale {
        self.scale
    }
}

/// F1 of an extracted-claim input minus F1 of the full post.
pub fn delta_full(variant: F1, full: F1) -> Result<f64> {
    if variant.scale != full.scale {
        return Err(Error::MixedScale);
    }
    Ok(variant.value - full.value)
}

/// Rounds to one decimal, as used in report tables.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
